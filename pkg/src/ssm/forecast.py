"""Predictive summaries of the observation process.

Trajectories are simulated forward under a collection of parameter draws and
reduced to quantile ribbons of the conditional observation mean, so the
bands show parameter plus process uncertainty without reporting-noise
jitter.  Accumulators reset at each grid instant, mirroring how the fitting
tools treat windowed counts.
"""

from __future__ import annotations

import numpy as np

from ssm.observe import stream_mean
from ssm.simulate import advance

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def forecast_table(cm, thetas, t0, times, *, formalism="psr", rng=None,
                   dt=None):
    """Quantiles of each stream's conditional mean over one simulated
    trajectory per parameter draw.

    Returns (stream names, array of shape (n_times, n_streams, 5))."""
    times = np.asarray(times, dtype=float)
    streams = [o.name for o in cm.observations]
    n = len(thetas)
    if n == 0:
        raise ValueError("forecast needs at least one parameter draw")
    means = np.empty((n, len(times), len(streams)))
    for j, values in enumerate(thetas):
        x = cm.init_state(values)
        t = t0
        for i, t_next in enumerate(times):
            x = advance(cm, x, t, t_next, values, rng=rng,
                        formalism=formalism, dt=dt)
            for k, obs in enumerate(cm.observations):
                parts, _ = cm.obs_values(obs.name, x, t_next, values)
                means[j, i, k] = stream_mean(obs.kind, parts)
            x[cm.acc_slice] = 0.0
            t = t_next
    table = np.quantile(means, QUANTILES, axis=0)   # (5, T, S)
    return streams, np.moveaxis(table, 0, -1)


def forecast_rows(cm, thetas, t0, times, *, formalism="psr", rng=None,
                  dt=None):
    """CSV-ready rows (time, stream, q025, q25, q50, q75, q975)."""
    streams, table = forecast_table(
        cm, thetas, t0, times, formalism=formalism, rng=rng, dt=dt
    )
    rows = []
    for i, t in enumerate(np.asarray(times, dtype=float)):
        for k, name in enumerate(streams):
            rows.append((float(t), name, *[float(v) for v in table[i, k]]))
    return rows
