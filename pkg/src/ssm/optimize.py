"""Maximization: simplex search and iterated filtering.

Both operate on the unconstrained parameter scale.  The simplex drives a
deterministic objective (trajectory or moment-filter posterior); iterated
filtering perturbs parameters particle-wise inside a filter, cooling the
perturbation between passes, and moves the estimate by covariance-weighted
increments of the filtered parameter means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssm.compiled import DomainError
from ssm.filters import FilterError, ekf_filter, ode_loglik, smc_filter, \
    systematic_resample
from ssm.observe import stream_loglik
from ssm.simulate import advance


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    simplex: np.ndarray
    values: np.ndarray


def nelder_mead(f, x0, step=0.1, iterations=300, xtol=1e-5, ftol=0.0):
    """Maximize f by the Nelder-Mead simplex method.

    The initial simplex is x0 plus `step` along each coordinate.  Search
    stops when every vertex is within xtol of the best one, when the value
    spread is at or below ftol, or after `iterations` reflections.  A
    constant objective therefore stops before any move, leaving the simplex
    untouched.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    step = np.broadcast_to(np.asarray(step, dtype=float), (d,))
    simplex = np.tile(x0, (d + 1, 1))
    for i in range(d):
        simplex[i + 1, i] += step[i]
    g = np.array([-f(v) for v in simplex])
    if np.all(np.isinf(g)):
        raise ValueError("objective is not finite at any initial vertex")

    n_iter = 0
    converged = False
    while True:
        order = np.argsort(g, kind="stable")
        simplex = simplex[order]
        g = g[order]
        finite = g[np.isfinite(g)]
        spread_x = np.max(np.abs(simplex[1:] - simplex[0]))
        spread_f = (finite.max() - finite.min()) if finite.size else np.inf
        if len(finite) == len(g) and (spread_x <= xtol or spread_f <= ftol):
            converged = True
            break
        if n_iter >= iterations:
            break
        n_iter += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        reflected = centroid + (centroid - worst)
        g_r = -f(reflected)
        if g_r < g[0]:
            expanded = centroid + 2.0 * (centroid - worst)
            g_e = -f(expanded)
            if g_e < g_r:
                simplex[-1], g[-1] = expanded, g_e
            else:
                simplex[-1], g[-1] = reflected, g_r
            continue
        if g_r < g[-2]:
            simplex[-1], g[-1] = reflected, g_r
            continue
        if g_r < g[-1]:
            contracted = centroid + 0.5 * (reflected - centroid)
            g_c = -f(contracted)
            if g_c <= g_r:
                simplex[-1], g[-1] = contracted, g_c
                continue
        else:
            contracted = centroid + 0.5 * (worst - centroid)
            g_c = -f(contracted)
            if g_c < g[-1]:
                simplex[-1], g[-1] = contracted, g_c
                continue
        for i in range(1, d + 1):
            simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
            g[i] = -f(simplex[i])
    order = np.argsort(g, kind="stable")
    simplex = simplex[order]
    g = g[order]
    return SimplexResult(
        x=simplex[0].copy(), value=-g[0], iterations=n_iter,
        converged=converged, simplex=simplex, values=-g,
    )


def posterior_objective(cm, dataset, space, base_values, t0,
                        dt=None, kind="ode"):
    """Unconstrained-scale log posterior with the likelihood from either the
    deterministic trajectory or the moment filter.  Invalid regions map to
    minus infinity so the simplex walks around them."""

    def objective(u):
        # probing far corners is expected to overflow into the -inf branch
        with np.errstate(all="ignore"):
            log_prior = space.log_prior_unconstrained(u)
            if not np.isfinite(log_prior):
                return -np.inf
            values = dict(base_values)
            values.update(space.to_natural(u))
            try:
                if kind == "ode":
                    ll = ode_loglik(cm, dataset, values, t0, dt=dt).loglik
                else:
                    ll = ekf_filter(cm, dataset, values, t0, dt=dt).loglik
            except (DomainError, FilterError):
                return -np.inf
        if not np.isfinite(ll):
            return -np.inf
        return ll + log_prior

    return objective


def maximize_stage(cm, dataset, space, base_values, t0, kind,
                   iterations=300, step=0.1, dt=None, xtol=1e-5,
                   ftol=0.0):
    """Run the simplex on the chosen likelihood backend; returns the merged
    natural-scale values and the likelihood decomposition at the optimum."""
    objective = posterior_objective(cm, dataset, space, base_values, t0,
                                    dt=dt, kind=kind)
    u0 = space.to_unconstrained(base_values)
    res = nelder_mead(objective, u0, step=step, iterations=iterations,
                      xtol=xtol, ftol=ftol)
    values = dict(base_values)
    values.update(space.to_natural(res.x))
    try:
        if kind == "ode":
            ll = ode_loglik(cm, dataset, values, t0, dt=dt).loglik
        else:
            ll = ekf_filter(cm, dataset, values, t0, dt=dt).loglik
    except (DomainError, FilterError):
        ll = -np.inf
    return {
        "values": values,
        "log_likelihood": ll,
        "log_posterior": res.value,
        "iterations": res.iterations,
        "converged": res.converged,
    }


# ----------------------------------------------------------------------
# iterated filtering

@dataclass
class MifResult:
    values: dict
    log_likelihood: float
    theta_trace: np.ndarray       # (iterations+1, dim) unconstrained
    loglik_trace: np.ndarray
    failed_iterations: int


def mif(cm, dataset, space, base_values, t0, rng, *, perturbation_sd,
        n_particles=500, iterations=30, cooling=0.975, prior_tempering=2.0,
        ic_time_fraction=0.75, formalism="psr", dt=None):
    """Iterated filtering.

    Each pass runs a particle filter in which every particle carries its own
    parameter vector: regular parameters are drawn around the current
    estimate with variance b * a^(m-1) * sd^2 at the initial time and then
    random-walk rejuvenated after each resampling with per-gap variance
    a^(m-1) * gap * sd^2; initial-condition parameters are perturbed at the
    initial time only.  Weights carry a 1/n power of the prior so that n
    observations jointly apply it once.  After a pass, the estimate moves by

        theta += V(t_1) * sum_i V(t_i)^+ (mean_i - mean_{i-1})

    over the filtered parameter means, and the initial-condition estimate
    jumps to its filtered mean at the time fraction `ic_time_fraction`
    through the record.  The perturbation cools by `cooling` per completed
    pass.  A pass whose weights all vanish is discarded without cooling.
    """
    names = space.names
    d = space.dim
    sds = np.array([float(perturbation_sd.get(n, 0.0)) for n in names])
    roles = [p.role for p in space.params]
    reg = np.array([s > 0 and r == "estimated" for s, r in zip(sds, roles)])
    ics = np.array(
        [s > 0 and r == "initial_condition" for s, r in zip(sds, roles)]
    )
    theta = space.to_unconstrained(base_values)
    n_obs = len(dataset)
    t_ic = max(0, min(n_obs - 1, int(round(ic_time_fraction * n_obs)) - 1))

    def merged(u_vec):
        out = dict(base_values)
        out.update(space.to_natural(u_vec))
        return out

    def final_loglik(u_vec):
        try:
            return smc_filter(
                cm, dataset, merged(u_vec), t0,
                rng=rng, n_particles=n_particles, formalism=formalism, dt=dt,
            ).loglik
        except (DomainError, FilterError):
            return -np.inf

    theta_trace = [theta.copy()]
    ll_trace = []
    if not np.any(reg | ics) or n_obs == 0:
        ll = final_loglik(theta)
        return MifResult(merged(theta), ll, np.array(theta_trace),
                         np.array([ll]), 0)

    j = n_particles
    n_reg = int(reg.sum())
    completed = 0
    failures = 0
    consecutive_failures = 0
    while completed < iterations:
        a_m = cooling ** completed
        u = np.tile(theta, (j, 1))
        u[:, reg] += rng.standard_normal((j, n_reg)) * np.sqrt(
            prior_tempering * a_m
        ) * sds[reg]
        u[:, ics] += rng.standard_normal((j, int(ics.sum()))) * np.sqrt(
            a_m
        ) * sds[ics]

        with np.errstate(all="ignore"):
            params = dict(base_values)
            params.update(space.natural_columns(u))
            try:
                x = cm.init_state(params, size=j)
            except (DomainError, FilterError):
                x = np.full((j, cm.nx), np.nan)
            prev_t = t0
            ll = 0.0
            mean_prev = theta[reg]
            increment = np.zeros(n_reg)
            v_first = None
            ic_estimate = None
            ok = bool(np.all(np.isfinite(x)))
            for i, (t, obs) in enumerate(dataset):
                if not ok:
                    break
                try:
                    x = advance(cm, x, prev_t, t, params, rng=rng,
                                formalism=formalism, dt=dt)
                except (DomainError, FilterError):
                    ok = False
                    break
                logw = space.log_prior_unconstrained(u) / n_obs
                for stream, y in obs:
                    o = cm.obs(stream)
                    parts, _ = cm.obs_values(stream, x, t, params)
                    logw += stream_loglik(o.kind, parts, y)
                peak = np.max(logw)
                if not np.isfinite(peak):
                    ok = False
                    break
                w = np.exp(logw - peak)
                ll += peak + np.log(w.sum() / j)
                idx = systematic_resample(w / w.sum(), rng)
                u = u[idx]
                x = x[idx]
                x[:, cm.acc_slice] = 0.0
                if i == t_ic:
                    ic_estimate = u[:, ics].mean(axis=0)
                gap = t - prev_t
                if n_reg:
                    mean_i = u[:, reg].mean(axis=0)
                    u[:, reg] += rng.standard_normal((j, n_reg)) * np.sqrt(
                        a_m * gap
                    ) * sds[reg]
                    # the swarm variance is taken after rejuvenation so the
                    # fresh noise keeps it away from singularity even when
                    # resampling has collapsed the selected values
                    sel = u[:, reg]
                    v_i = np.cov(sel.T, ddof=1).reshape(n_reg, n_reg)
                    if v_first is None:
                        v_first = v_i
                    increment += np.linalg.pinv(v_i) @ (mean_i - mean_prev)
                    mean_prev = mean_i
                params = dict(base_values)
                params.update(space.natural_columns(u))
                prev_t = t
        proposal = theta.copy()
        if ok and n_reg:
            delta = v_first @ increment
            # a healthy pass moves by a fraction of the perturbation scale;
            # a pseudo-inverse of a collapsed particle covariance can throw
            # the estimate anywhere, and such a pass is a failed pass
            limit = 5.0 * np.sqrt(prior_tempering * a_m) * sds[reg]
            if not np.all(np.isfinite(delta)) or np.any(np.abs(delta) > limit):
                ok = False
            else:
                proposal[reg] = proposal[reg] + delta
        if ok and np.any(ics) and ic_estimate is not None:
            proposal[ics] = ic_estimate
        if ok and not np.all(np.isfinite(proposal)):
            ok = False
        if not ok:
            failures += 1
            consecutive_failures += 1
            if consecutive_failures >= 10:
                raise FilterError(
                    "iterated filtering failed ten passes in a row"
                )
            continue
        consecutive_failures = 0
        theta = proposal
        completed += 1
        theta_trace.append(theta.copy())
        ll_trace.append(ll)
    final_ll = final_loglik(theta)
    return MifResult(
        values=merged(theta),
        log_likelihood=final_ll,
        theta_trace=np.array(theta_trace),
        loglik_trace=np.array(ll_trace),
        failed_iterations=failures,
    )
