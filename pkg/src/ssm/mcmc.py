"""Random-walk Metropolis on the unconstrained scale, with adaptation.

The proposal is a two-component mixture: a fixed component built from the
initial covariance guess, and an adapted component scaled by 2.38^2/d around
the empirical covariance of the whole chain so far (rejection repeats
included).  A global step multiplier chases a 23.4% acceptance rate with a
geometrically cooling learning rate, so adaptation provably dies out.

The same engine serves both the moment-filter chain and the particle chain;
for the latter the incumbent's likelihood estimate is stored and never
recomputed, which keeps the stationary distribution exact despite the noisy
estimates.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from ssm.compiled import DomainError
from ssm.filters import FilterError, ekf_filter, smc_filter

TARGET_ACCEPT = 0.234
MIX_FIXED = 0.05
BURN_FLOOR = 200


@dataclass
class Trace:
    names: tuple
    values: np.ndarray          # (n, d) natural scale
    unconstrained: np.ndarray   # (n, d)
    loglik: np.ndarray
    logprior: np.ndarray        # natural-scale prior density
    accepted: np.ndarray

    def __len__(self):
        return len(self.loglik)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.names, "log_likelihood",
                        "log_prior", "accepted"])
            for i in range(len(self)):
                w.writerow(
                    [i]
                    + [repr(float(v)) for v in self.values[i]]
                    + [repr(float(self.loglik[i])),
                       repr(float(self.logprior[i])),
                       int(self.accepted[i])]
                )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[:1] != ["iteration"] or header[-3:] != [
                "log_likelihood", "log_prior", "accepted"
            ]:
                raise ValueError(f"{path}: not a chain trace")
            names = tuple(header[1:-3])
            rows = [row for row in r if row]
        values = np.array([[float(v) for v in row[1:-3]] for row in rows])
        loglik = np.array([float(row[-3]) for row in rows])
        logprior = np.array([float(row[-2]) for row in rows])
        accepted = np.array([bool(int(row[-1])) for row in rows])
        return cls(names, values, None, loglik, logprior, accepted)


def ess(series):
    """Effective sample size from the autocorrelation time, truncated at the
    first lag whose autocorrelation falls below 0.05, and capped at 1.05 n.

    A constant chain carries one effective draw at most: every lag is taken
    as perfectly correlated.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 2:
        return float(n)
    centered = x - x.mean()
    denom = float(centered @ centered)
    if denom == 0.0:
        return n / (1.0 + 2.0 * (n - 1))
    rho_sum = 0.0
    for k in range(1, n):
        rho = float(centered[:-k] @ centered[k:]) / denom
        if rho < 0.05:
            break
        rho_sum += rho
    return float(min(n / (1.0 + 2.0 * rho_sum), 1.05 * n))


def _cholesky(cov):
    d = cov.shape[0]
    jitter = 1e-12
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FilterError("proposal covariance is not positive definite")


@dataclass
class ChainResult:
    unconstrained: np.ndarray
    loglik: np.ndarray
    logprior_u: np.ndarray
    accepted: np.ndarray
    payloads: list
    acceptance_rate: float
    step_scale: float


def adaptive_chain(target, u0, sigma0, rng, iterations, *, adapt=True,
                   cooling=0.999, burn_floor=BURN_FLOOR):
    """Metropolis chain over `target(u) -> (loglik, logprior_u, payload)`.

    payload travels with the accepted state (the particle chain stores its
    sampled trajectory there).  Proposals with non-finite posterior are
    rejected outright, and the incumbent values are re-recorded.
    """
    u = np.asarray(u0, dtype=float).copy()
    d = u.size
    ll, lp, payload = target(u)
    if not np.isfinite(ll + lp):
        raise FilterError("chain cannot start from a zero-density point")
    chol_fixed = _cholesky(np.asarray(sigma0, dtype=float))
    lam = 1.0
    opt_scale = 2.38 ** 2 / d
    usum = u.copy()
    sq = np.outer(u, u)
    count = 1
    window = deque(maxlen=100)
    us = np.empty((iterations, d))
    lls = np.empty(iterations)
    lps = np.empty(iterations)
    acc = np.zeros(iterations, dtype=bool)
    payloads = [None] * iterations
    for i in range(iterations):
        use_fixed = (not adapt) or count <= burn_floor \
            or rng.random() < MIX_FIXED
        if use_fixed:
            chol = chol_fixed
            scale = lam if adapt else 1.0
        else:
            emp = sq / count - np.outer(usum, usum) / count ** 2
            chol = _cholesky(opt_scale * emp)
            scale = lam
        v = u + scale * (chol @ rng.standard_normal(d))
        ll_new, lp_new, payload_new = target(v)
        log_ratio = (ll_new + lp_new) - (ll + lp)
        accepted = np.isfinite(ll_new + lp_new) and (
            log_ratio >= 0.0 or np.log(rng.random()) < log_ratio
        )
        if accepted:
            u, ll, lp, payload = v, ll_new, lp_new, payload_new
        window.append(1.0 if accepted else 0.0)
        if adapt:
            rate = sum(window) / len(window)
            lam *= np.exp((cooling ** i) * (rate - TARGET_ACCEPT))
        usum = usum + u
        sq = sq + np.outer(u, u)
        count += 1
        us[i] = u
        lls[i] = ll
        lps[i] = lp
        acc[i] = accepted
        payloads[i] = payload if accepted else None
    return ChainResult(
        unconstrained=us, loglik=lls, logprior_u=lps, accepted=acc,
        payloads=payloads,
        acceptance_rate=float(acc.mean()) if iterations else 0.0,
        step_scale=lam,
    )


def _finish(space, base_values, chain, burn_fraction=0.1):
    n = len(chain.loglik)
    burn = int(np.floor(burn_fraction * n))
    kept = chain.unconstrained[burn:]
    mean_u = kept.mean(axis=0)
    cov_u = np.cov(kept.T, ddof=1).reshape(space.dim, space.dim) \
        if len(kept) > 1 else np.zeros((space.dim, space.dim))
    values = np.empty_like(chain.unconstrained)
    logprior_nat = np.empty(n)
    for i in range(n):
        nat = space.to_natural(chain.unconstrained[i])
        values[i] = [nat[name] for name in space.names]
        logprior_nat[i] = space.log_prior_natural(nat)
    mean_values = dict(base_values)
    kept_vals = values[burn:]
    for k, name in enumerate(space.names):
        mean_values[name] = float(kept_vals[:, k].mean())
    trace = Trace(
        names=space.names, values=values,
        unconstrained=chain.unconstrained, loglik=chain.loglik,
        logprior=logprior_nat, accepted=chain.accepted,
    )
    return trace, mean_values, mean_u, cov_u


@dataclass
class McmcResult:
    trace: Trace
    mean_values: dict
    mean_unconstrained: np.ndarray
    covariance: np.ndarray        # unconstrained scale, after burn-in
    acceptance_rate: float
    final_loglik: float
    paths: list                   # (iteration, path array) pairs
    times: np.ndarray | None


def kmcmc_stage(cm, dataset, space, base_values, t0, rng, *, iterations,
                sigma0, adapt=True, dt=None, burn_fraction=0.1):
    """Chain over the moment-filter likelihood."""

    def target(u):
        with np.errstate(all="ignore"):
            lp = space.log_prior_unconstrained(u)
            if not np.isfinite(lp):
                return -np.inf, lp, None
            values = dict(base_values)
            values.update(space.to_natural(u))
            try:
                ll = ekf_filter(cm, dataset, values, t0, dt=dt).loglik
            except (DomainError, FilterError):
                return -np.inf, lp, None
        return ll, lp, None

    u0 = space.to_unconstrained(base_values)
    chain = adaptive_chain(target, u0, sigma0, rng, iterations, adapt=adapt)
    trace, mean_values, mean_u, cov_u = _finish(space, base_values, chain,
                                                burn_fraction)
    return McmcResult(
        trace=trace, mean_values=mean_values, mean_unconstrained=mean_u,
        covariance=cov_u, acceptance_rate=chain.acceptance_rate,
        final_loglik=float(chain.loglik[-1]), paths=[], times=None,
    )


def pmcmc_stage(cm, dataset, space, base_values, t0, rng, *, iterations,
                sigma0, n_particles=500, formalism="psr", adapt=False,
                dt=None, burn_fraction=0.1, keep_paths=True):
    """Pseudo-marginal chain over the particle-filter estimate.

    The incumbent's estimate is stored, never refreshed; each accepted state
    carries one trajectory drawn from the filter's ancestry."""

    def target(u):
        with np.errstate(all="ignore"):
            lp = space.log_prior_unconstrained(u)
            if not np.isfinite(lp):
                return -np.inf, lp, None
            values = dict(base_values)
            values.update(space.to_natural(u))
            try:
                res = smc_filter(
                    cm, dataset, values, t0, rng=rng,
                    n_particles=n_particles, formalism=formalism, dt=dt,
                    return_path=keep_paths,
                )
            except (DomainError, FilterError):
                return -np.inf, lp, None
        if not np.isfinite(res.loglik):
            return -np.inf, lp, None
        return res.loglik, lp, res.path

    u0 = space.to_unconstrained(base_values)
    chain = adaptive_chain(target, u0, sigma0, rng, iterations, adapt=adapt)
    trace, mean_values, mean_u, cov_u = _finish(space, base_values, chain,
                                                burn_fraction)
    paths = [
        (i, p) for i, p in enumerate(chain.payloads) if p is not None
    ]
    return McmcResult(
        trace=trace, mean_values=mean_values, mean_unconstrained=mean_u,
        covariance=cov_u, acceptance_rate=chain.acceptance_rate,
        final_loglik=float(chain.loglik[-1]), paths=paths,
        times=dataset.times,
    )
