"""Observed data handling and measurement densities.

Data arrives as a long-format CSV with columns time, stream, value; several
streams may report at the same instant and a stream may skip instants.  Rows
with an empty or NaN value are treated as missing and dropped.  Accumulator
coordinates reset to zero after each observation instant, so an accumulator
stream always reports what was gathered since the previous instant.
"""

from __future__ import annotations

import csv
import math

import numpy as np
from scipy.special import gammaln

REQUIRED_COLUMNS = ("time", "stream", "value")


class DataError(ValueError):
    pass


class DataSet:
    """Long-format observations grouped by time."""

    def __init__(self, rows):
        # rows: iterable of (time, stream, value)
        grouped = {}
        self.file_problems = []
        last = None
        for t, stream, value in rows:
            t = float(t)
            if last is not None and t < last and not self.file_problems:
                self.file_problems.append(
                    f"time column is not sorted (t={t:g} follows t={last:g})"
                )
            last = t
            grouped.setdefault(t, []).append((stream, float(value)))
        self.times = np.array(sorted(grouped), dtype=float)
        self.records = [(t, tuple(grouped[t])) for t in self.times]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def streams(self):
        out = []
        for _, obs in self.records:
            for stream, _ in obs:
                if stream not in out:
                    out.append(stream)
        return out

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty data file") from None
            header = [h.strip() for h in header]
            if header != list(REQUIRED_COLUMNS):
                raise DataError(
                    f"{path}: expected columns time,stream,value, "
                    f"got {','.join(header)}"
                )
            rows = []
            for i, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}:{i}: expected 3 columns")
                t_raw, stream, v_raw = (c.strip() for c in row)
                try:
                    t = float(t_raw)
                except ValueError:
                    raise DataError(f"{path}:{i}: bad time {t_raw!r}") from None
                if not math.isfinite(t):
                    raise DataError(f"{path}:{i}: bad time {t_raw!r}")
                if not stream:
                    raise DataError(f"{path}:{i}: empty stream name")
                if v_raw == "" or v_raw.lower() in ("nan", "na"):
                    continue
                try:
                    v = float(v_raw)
                except ValueError:
                    raise DataError(f"{path}:{i}: bad value {v_raw!r}") from None
                if not math.isfinite(v):
                    continue
                rows.append((t, stream, v))
        return cls(rows)

    def validate(self, spec):
        """Model-aware consistency problems, as human-readable strings."""
        problems = list(self.file_problems)
        known = {o.name: o.distribution for o in spec.observations}
        seen = set()
        for t, obs in self.records:
            for stream, value in obs:
                if stream not in known:
                    problems.append(
                        f"t={t:g}: stream {stream!r} is not declared by the model"
                    )
                    continue
                if (t, stream) in seen:
                    problems.append(
                        f"t={t:g}: duplicate observation for stream {stream!r}"
                    )
                seen.add((t, stream))
                dist = known[stream]
                if dist in ("poisson", "binomial"):
                    if value < 0:
                        problems.append(
                            f"t={t:g}: {stream} is a count stream but value "
                            f"{value:g} is negative"
                        )
                    elif value != round(value):
                        problems.append(
                            f"t={t:g}: {stream} is a count stream but value "
                            f"{value:g} is not an integer"
                        )
        return problems


# ----------------------------------------------------------------------
# measurement log densities; all vectorized over the parameter arguments

def poisson_logpmf(y, mean):
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = y * np.log(mean) - mean - gammaln(y + 1.0)
    out = np.where(mean > 0, out, np.where(y == 0, -mean, -np.inf))
    out = np.where(mean < 0, -np.inf, out)
    return out if out.shape else float(out)


def discretized_normal_logpdf(y, mean, var):
    """Density of the integer nearest to y under N(mean, var).

    The lattice probabilities are approximated by the density value; the
    approximation error is negligible once var is about 1 or larger.
    """
    y = np.round(np.asarray(y, dtype=float))
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)
    out = np.where(var > 0, out, -np.inf)
    return out if out.shape else float(out)


def binomial_logpmf(y, trials, prob):
    y = np.asarray(y, dtype=float)
    n = np.round(np.asarray(trials, dtype=float))
    p = np.asarray(prob, dtype=float)
    ok = (y >= 0) & (y <= n) & (y == np.round(y)) & (p >= 0) & (p <= 1)
    p_in = np.clip(p, 1e-300, 1.0 - 1e-16)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            gammaln(n + 1.0)
            - gammaln(y + 1.0)
            - gammaln(n - y + 1.0)
            + y * np.log(p_in)
            + (n - y) * np.log1p(-p_in)
        )
        # exact boundary cases instead of the clipped approximation
        out = np.where((p == 0), np.where(y == 0, 0.0, -np.inf), out)
        out = np.where((p == 1), np.where(y == n, 0.0, -np.inf), out)
    out = np.where(ok, out, -np.inf)
    return out if out.shape else float(out)


def stream_loglik(kind, parts, y):
    """Log density of observed value y given the compiled stream parts."""
    if kind == "poisson":
        return poisson_logpmf(y, parts["mean"])
    if kind == "discretized_normal":
        return discretized_normal_logpdf(y, parts["mean"], parts["variance"])
    if kind == "binomial":
        return binomial_logpmf(y, parts["trials"], parts["probability"])
    raise ValueError(f"unknown observation distribution {kind!r}")


def stream_moments(kind, parts):
    """Observation mean and variance used by the moment filter."""
    if kind == "poisson":
        mean = np.clip(parts["mean"], 0.0, None)
        return mean, np.maximum(mean, 1e-6)
    if kind == "discretized_normal":
        return parts["mean"], np.maximum(parts["variance"], 1e-6)
    if kind == "binomial":
        n = parts["trials"]
        p = np.clip(parts["probability"], 0.0, 1.0)
        mean = n * p
        return mean, np.maximum(n * p * (1.0 - p), 1e-6)
    raise ValueError(f"unknown observation distribution {kind!r}")


def stream_mean(kind, parts):
    if kind == "binomial":
        return parts["trials"] * np.clip(parts["probability"], 0.0, 1.0)
    return parts["mean"]
