"""Likelihood evaluation: particle filter, moment filter, deterministic.

All filters share the same observation protocol: propagate from the previous
instant to the observation time, weight or update against every stream
reporting at that instant, record the filtered state, then zero the
accumulator coordinates so each window measures what accumulated since the
last instant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssm import observe as ob
from ssm.compiled import DomainError
from ssm.simulate import advance, integrate_ode


class FilterError(RuntimeError):
    """The filter could not produce a finite, well-defined likelihood."""


@dataclass
class FilterResult:
    loglik: float
    times: np.ndarray
    means: np.ndarray                 # filtered means, before accumulator reset
    loglik_terms: np.ndarray          # per-instant contribution
    ess: np.ndarray | None = None     # particle filter only
    path: np.ndarray | None = None    # one ancestral trajectory, if requested
    covs: np.ndarray | None = None    # moment filter only


def systematic_resample(weights, rng):
    """Indices drawn by systematic resampling from normalized weights."""
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


def smc_filter(cm, dataset, params, t0, rng, n_particles=500,
               formalism="psr", dt=None, return_path=False):
    """Bootstrap particle filter with systematic resampling at every
    observation instant.

    The likelihood estimate multiplies, per instant, the mean unnormalized
    weight.  If every particle has zero weight the estimate is minus
    infinity and filtering stops early.
    """
    j = n_particles
    x = cm.init_state(params, size=j)
    n_obs = len(dataset)
    loglik = 0.0
    terms = np.full(n_obs, np.nan)
    means = np.full((n_obs, cm.nx), np.nan)
    ess = np.full(n_obs, np.nan)
    history = [] if return_path else None
    ancestry = [] if return_path else None
    final_weights = None
    prev_t = t0
    for i, (t, obs) in enumerate(dataset):
        x = advance(cm, x, prev_t, t, params, rng=rng, formalism=formalism,
                    dt=dt)
        logw = np.zeros(j)
        for stream, y in obs:
            o = cm.obs(stream)
            parts, _ = cm.obs_values(stream, x, t, params)
            logw += ob.stream_loglik(o.kind, parts, y)
        peak = np.max(logw)
        if not np.isfinite(peak):
            return FilterResult(
                loglik=-np.inf, times=dataset.times, means=means,
                loglik_terms=terms, ess=ess, path=None,
            )
        w = np.exp(logw - peak)
        total = w.sum()
        terms[i] = peak + np.log(total / j)
        loglik += terms[i]
        norm = w / total
        ess[i] = 1.0 / np.sum(norm ** 2)
        means[i] = norm @ x
        if return_path:
            history.append(x.copy())
        idx = systematic_resample(norm, rng)
        x = x[idx]
        x[:, cm.acc_slice] = 0.0
        if return_path:
            ancestry.append(idx)
        final_weights = norm
        prev_t = t
    path = None
    if return_path and n_obs:
        path = np.empty((n_obs, cm.nx))
        pick = int(rng.choice(j, p=final_weights))
        path[-1] = history[-1][pick]
        for i in range(n_obs - 2, -1, -1):
            pick = int(ancestry[i][pick])
            path[i] = history[i][pick]
    return FilterResult(
        loglik=float(loglik), times=dataset.times, means=means,
        loglik_terms=terms, ess=ess, path=path,
    )


# ----------------------------------------------------------------------
# moment filter

def _moment_rates(cm, m, C, t, params):
    prop, drift, vols, jac = cm.dynamics(m, t, params)
    q = cm.process_cov_from(prop, vols, params)
    return drift, jac @ C + C @ jac.T + q


def _moment_step(cm, m, C, t, h, params):
    """RK4 over the coupled mean and covariance equations."""
    dm1, dc1 = _moment_rates(cm, m, C, t, params)
    dm2, dc2 = _moment_rates(cm, m + 0.5 * h * dm1, C + 0.5 * h * dc1,
                             t + 0.5 * h, params)
    dm3, dc3 = _moment_rates(cm, m + 0.5 * h * dm2, C + 0.5 * h * dc2,
                             t + 0.5 * h, params)
    dm4, dc4 = _moment_rates(cm, m + h * dm3, C + h * dc3, t + h, params)
    m = m + (h / 6.0) * (dm1 + 2 * dm2 + 2 * dm3 + dm4)
    C = C + (h / 6.0) * (dc1 + 2 * dc2 + 2 * dc3 + dc4)
    m[cm.comp_slice] = np.clip(m[cm.comp_slice], 0.0, None)
    m[cm.acc_slice] = np.clip(m[cm.acc_slice], 0.0, None)
    return m, 0.5 * (C + C.T)


def _project_psd(C):
    vals = np.linalg.eigvalsh(C)
    lo = vals[0]
    if lo >= 0.0:
        return C
    if lo < -1e-8 * max(1.0, abs(vals[-1])):
        vals2, vecs = np.linalg.eigh(C)
        return (vecs * np.clip(vals2, 0.0, None)) @ vecs.T
    return C - lo * np.eye(C.shape[0])


def ekf_filter(cm, dataset, params, t0, dt=None):
    """Continuous-discrete moment filter.

    Between observations the mean follows the drift and the covariance the
    linearized flow plus process dispersion, integrated jointly by RK4.
    Each reporting stream then applies a scalar update with the innovation
    variance taken from the stream's observation model.
    """
    if not np.all(np.isfinite(cm.init_state(params))):
        raise FilterError("non-finite initial state")
    m = cm.init_state(params)
    C = np.zeros((cm.nx, cm.nx))
    n_obs = len(dataset)
    loglik = 0.0
    terms = np.zeros(n_obs)
    means = np.empty((n_obs, cm.nx))
    covs = np.empty((n_obs, cm.nx, cm.nx))
    prev_t = t0
    eye = np.eye(cm.nx)
    for i, (t, obs) in enumerate(dataset):
        span = t - prev_t
        if span > 0:
            h_max = span / 10.0 if dt is None else dt
            n_sub = max(1, int(np.ceil(span / h_max - 1e-9)))
            h = span / n_sub
            tt = prev_t
            for _ in range(n_sub):
                m, C = _moment_step(cm, m, C, tt, h, params)
                tt += h
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(C))):
            raise FilterError("moments diverged during propagation")
        for stream, y in obs:
            o = cm.obs(stream)
            parts, grad = cm.obs_values(stream, m, t, params)
            mean, var = ob.stream_moments(o.kind, parts)
            y_eff = round(y) if o.kind == "discretized_normal" else y
            hch = float(grad @ C @ grad)
            s = hch + float(var)
            if not np.isfinite(s):
                raise FilterError(
                    f"non-finite innovation variance on stream {stream}"
                )
            # counts sit on a unit grid: a predictive density narrower than
            # one bin would overstate the probability mass, so the
            # innovation variance is bounded below by one bin
            s = max(s, 1.0)
            r_eff = s - hch
            e = y_eff - float(mean)
            k = (C @ grad) / s
            contribution = -0.5 * (np.log(2.0 * np.pi * s) + e * e / s)
            terms[i] += contribution
            loglik += contribution
            m = m + k * e
            m[cm.comp_slice] = np.clip(m[cm.comp_slice], 0.0, None)
            ikh = eye - np.outer(k, grad)
            C = ikh @ C @ ikh.T + np.outer(k, k) * r_eff
            C = _project_psd(0.5 * (C + C.T))
        means[i] = m
        covs[i] = C
        m = m.copy()
        m[cm.acc_slice] = 0.0
        C = C.copy()
        C[cm.acc_slice, :] = 0.0
        C[:, cm.acc_slice] = 0.0
        prev_t = t
    if not np.isfinite(loglik):
        raise FilterError("non-finite log likelihood")
    return FilterResult(
        loglik=float(loglik), times=dataset.times, means=means,
        loglik_terms=terms, covs=covs,
    )


# ----------------------------------------------------------------------
# deterministic likelihood

def ode_loglik(cm, dataset, params, t0, dt=None):
    """Log likelihood of the data along the deterministic trajectory."""
    x = cm.init_state(params)
    n_obs = len(dataset)
    loglik = 0.0
    terms = np.zeros(n_obs)
    means = np.empty((n_obs, cm.nx))
    prev_t = t0
    for i, (t, obs) in enumerate(dataset):
        x = integrate_ode(cm, x, prev_t, t, params, dt=dt)
        for stream, y in obs:
            o = cm.obs(stream)
            parts, _ = cm.obs_values(stream, x, t, params)
            terms[i] += ob.stream_loglik(o.kind, parts, y)
        loglik += terms[i]
        means[i] = x
        x = x.copy()
        x[cm.acc_slice] = 0.0
        prev_t = t
    return FilterResult(
        loglik=float(loglik), times=dataset.times, means=means,
        loglik_terms=terms,
    )
