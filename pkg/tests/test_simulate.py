"""Simulation backends against closed forms and distributional oracles."""

import numpy as np
import pytest

from helpers import SIR, build, sir_model
from ssm.compiled import CompiledModel, DomainError
from ssm import simulate as sim

SIR_PARAMS = {"beta": 0.5, "gamma": 0.25, "N": 1000.0, "I0": 10.0}


def compiled_sir(**overrides):
    return CompiledModel(sir_model(**overrides))


LOGISTIC = {
    "ssm_model": 1,
    "name": "logistic",
    "compartments": [{"name": "P", "initial": "P0"}],
    "parameters": [
        {"name": "P0", "prior": {"dirac": 50.0}, "role": "fixed"},
        {"name": "r", "prior": {"dirac": 0.8}, "role": "fixed"},
        {"name": "K", "prior": {"dirac": 800.0}, "role": "fixed"},
    ],
    "reactions": [
        {"effect": {"P": 1}, "source": "P", "rate": "r*(1 - P/K)"}
    ],
    "observations": [],
}

DECAY = {
    "ssm_model": 1,
    "name": "decay",
    "compartments": [{"name": "C", "initial": "C0"}],
    "parameters": [
        {"name": "C0", "prior": {"dirac": 500.0}, "role": "fixed"},
        {"name": "mu", "prior": {"dirac": 0.5}, "role": "fixed"},
    ],
    "reactions": [{"from": "C", "to": "EXTERNAL", "rate": "mu"}],
    "observations": [],
}


def compiled(doc, **overrides):
    return CompiledModel(build(doc, **overrides))


def logistic_closed_form(t, p0=50.0, r=0.8, k=800.0):
    return k / (1.0 + (k / p0 - 1.0) * np.exp(-r * t))


class TestOde:
    def test_sir_drift_hand_values(self):
        cm = compiled_sir()
        x0 = cm.init_state(SIR_PARAMS)
        drift = cm.drift(x0, 0.0, SIR_PARAMS)
        # a_infection = 0.5*10/1000*990 = 4.95, a_recovery = 0.25*10 = 2.5
        assert drift == pytest.approx([-4.95, 2.45, 2.5, 4.95], abs=1e-12)

    def test_logistic_matches_closed_form(self):
        cm = compiled(LOGISTIC)
        p = {"P0": 50.0, "r": 0.8, "K": 800.0}
        x = cm.init_state(p)
        for t0, t1 in [(0.0, 2.0), (2.0, 5.0), (5.0, 12.0)]:
            x = sim.integrate_ode(cm, x, t0, t1, p, dt=0.05)
            assert x[0] == pytest.approx(logistic_closed_form(t1), rel=1e-7)

    def test_rk4_error_shrinks_at_fourth_order(self):
        cm = compiled(LOGISTIC)
        p = {"P0": 50.0, "r": 0.8, "K": 800.0}
        exact = logistic_closed_form(4.0)
        errs = []
        for dt in (0.5, 0.25, 0.125):
            x = sim.integrate_ode(cm, cm.init_state(p), 0.0, 4.0, p, dt=dt)
            errs.append(abs(x[0] - exact))
        assert 10.0 < errs[0] / errs[1] < 22.0
        assert 10.0 < errs[1] / errs[2] < 22.0

    def test_sir_final_size(self):
        # s_inf solves s = s0*exp(-R0*(1 - s)); Newton from s=0.01
        cm = compiled_sir()
        p = SIR_PARAMS
        r0 = p["beta"] / p["gamma"]
        s0 = (p["N"] - p["I0"]) / p["N"]
        s = 0.01
        for _ in range(60):
            f = s - s0 * np.exp(-r0 * (1.0 - s))
            fp = 1.0 - s0 * r0 * np.exp(-r0 * (1.0 - s))
            s -= f / fp
        x = sim.integrate_ode(cm, cm.init_state(p), 0.0, 400.0, p, dt=0.2)
        assert x[0] / p["N"] == pytest.approx(s, abs=1e-4)

    def test_population_conserved(self):
        cm = compiled_sir()
        x = sim.integrate_ode(cm, cm.init_state(SIR_PARAMS), 0.0, 40.0,
                              SIR_PARAMS, dt=0.25)
        assert x[:3].sum() == pytest.approx(1000.0, abs=1e-8)

    def test_accumulator_counts_cumulative_infections(self):
        cm = compiled_sir()
        x = sim.integrate_ode(cm, cm.init_state(SIR_PARAMS), 0.0, 400.0,
                              SIR_PARAMS, dt=0.2)
        # every infection passes S -> I, so cases = S(0) - S(inf)
        assert x[3] == pytest.approx(990.0 - x[0], abs=1e-6)

    def test_time_switched_rate(self):
        cm = compiled(DECAY, reactions=[
            {"from": "C", "to": "EXTERNAL", "rate": "ifelse(t < 5, 0.0, mu)"}
        ])
        p = {"C0": 500.0, "mu": 0.5}
        x0 = cm.init_state(p)
        assert cm.propensities(x0, 4.0, p)[0] == 0.0
        assert cm.propensities(x0, 6.0, p)[0] == pytest.approx(250.0)
        # RK4 stages touching the switch instant cost O(dt) locally there
        out = sim.integrate_ode(cm, x0, 0.0, 10.0, p, dt=0.05)
        assert out[0] == pytest.approx(500.0 * np.exp(-0.5 * 5.0), rel=5e-3)

    def test_absolute_outflow_raises_domain_error(self):
        cm = compiled(DECAY, reactions=[
            {
                "effect": {"C": -1},
                "source": "EXTERNAL",
                "rate": "60.0",
                "absolute_outflow": True,
            }
        ])
        p = {"C0": 500.0, "mu": 0.5}
        with pytest.raises(DomainError):
            sim.integrate_ode(cm, cm.init_state(p), 0.0, 20.0, p, dt=0.25)

    def test_batched_ode_matches_single(self):
        cm = compiled_sir()
        x0 = cm.init_state(SIR_PARAMS, size=3)
        x0[1, 1] = 20.0
        x0[1, 0] = 980.0
        batch = sim.advance(cm, x0, 0.0, 3.0, SIR_PARAMS, formalism="ode",
                            dt=0.1)
        for j in range(3):
            single = sim.integrate_ode(cm, x0[j], 0.0, 3.0, SIR_PARAMS, dt=0.1)
            assert batch[j] == pytest.approx(single, rel=1e-12)


class TestJacobian:
    def numeric_jacobian(self, cm, x, t, p, h=1e-6):
        n = cm.nx
        out = np.zeros((n, n))
        for j in range(n):
            hi = x.copy()
            lo = x.copy()
            hi[j] += h
            lo[j] -= h
            out[:, j] = (cm.drift(hi, t, p) - cm.drift(lo, t, p)) / (2 * h)
        return out

    def test_sir_jacobian_matches_differences(self):
        cm = compiled_sir()
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = np.abs(rng.normal(scale=200.0, size=cm.nx)) + 5.0
            jac = cm.jacobian(x, 0.0, SIR_PARAMS)
            num = self.numeric_jacobian(cm, x, 0.0, SIR_PARAMS)
            assert jac == pytest.approx(num, rel=2e-5, abs=1e-7)

    def test_chain_rule_through_log_coordinate(self):
        doc = build(
            SIR,
            parameters=[
                {"name": "N", "prior": {"dirac": 1000.0}, "role": "fixed"},
                {"name": "I0", "prior": {"dirac": 10.0}, "role": "fixed"},
                {"name": "beta0", "prior": {"dirac": 1.2}, "role": "fixed"},
                {"name": "vol_b", "prior": {"dirac": 0.2}, "role": "fixed"},
                {
                    "name": "gamma",
                    "prior": {"uniform": [0.05, 5.0]},
                    "transform": "log",
                    "role": "estimated",
                },
            ],
            diffusions=[
                {
                    "name": "beta",
                    "transform": "log",
                    "drift": "0.0",
                    "volatility": "vol_b",
                    "initial": "beta0",
                }
            ],
        )
        cm = CompiledModel(doc)
        p = {"N": 1000.0, "I0": 10.0, "beta0": 1.2, "vol_b": 0.2,
             "gamma": 0.4}
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = cm.init_state(p)
            x[:3] = np.abs(rng.normal(scale=300.0, size=3)) + 5.0
            x[cm.diff_slice] = rng.normal(scale=0.5)
            jac = cm.jacobian(x, 0.0, p)
            num = TestJacobian.numeric_jacobian(self, cm, x, 0.0, p)
            assert jac == pytest.approx(num, rel=3e-5, abs=1e-7)

    def test_observation_gradient(self):
        cm = compiled_sir()
        x = np.array([400.0, 50.0, 550.0, 120.0])
        _, grad = cm.obs_values("cases_obs", x, 0.0, SIR_PARAMS)
        assert grad == pytest.approx([0.0, 0.0, 0.0, 1.0])


class TestDispersion:
    def test_demographic_reference_matrix(self):
        cm = compiled_sir()
        x0 = cm.init_state(SIR_PARAMS)
        disp = sim.assemble_dispersion(cm, x0, 0.0, SIR_PARAMS)
        a_inf, a_rec = 4.95, 2.5
        expected = np.array([
            [a_inf, -a_inf, 0.0],
            [-a_inf, a_inf + a_rec, -a_rec],
            [0.0, -a_rec, a_rec],
        ])
        assert disp == pytest.approx(expected, abs=1e-12)

    def test_environmental_reference_matrix(self):
        doc = dict(SIR)
        reactions = [
            {
                "from": "S",
                "to": "I",
                "rate": "beta*I/N",
                "accumulators": ["cases"],
                "white_noise": {"group": "transmission", "sd": "sigma_env"},
            },
            {"from": "I", "to": "R", "rate": "gamma"},
        ]
        params = SIR["parameters"] + [
            {"name": "sigma_env", "prior": {"dirac": 0.3}, "role": "fixed"}
        ]
        cm = compiled(SIR, reactions=reactions, parameters=params)
        p = dict(SIR_PARAMS, sigma_env=0.3)
        x0 = cm.init_state(p)
        disp = sim.assemble_dispersion(cm, x0, 0.0, p)
        a_inf, a_rec, s2 = 4.95, 2.5, 0.09
        l_inf = np.array([-1.0, 1.0, 0.0])
        l_rec = np.array([0.0, -1.0, 1.0])
        expected = (
            a_inf * np.outer(l_inf, l_inf)
            + a_rec * np.outer(l_rec, l_rec)
            + s2 * a_inf ** 2 * np.outer(l_inf, l_inf)
        )
        assert disp == pytest.approx(expected, abs=1e-10)
        only_env = sim.assemble_dispersion(cm, x0, 0.0, p, demographic=False)
        assert only_env == pytest.approx(
            s2 * a_inf ** 2 * np.outer(l_inf, l_inf), abs=1e-10
        )

    def test_identity_full_rank_expansion(self):
        # L Q L' assembled from factors equals the sum over reactions plus
        # the environmental outer product, on a model with both noise kinds
        doc = build(SIR, reactions=[
            {
                "from": "S",
                "to": "I",
                "rate": "beta*I/N",
                "accumulators": ["cases"],
                "white_noise": {"group": "transmission", "sd": "sigma_env"},
            },
            {"from": "I", "to": "R", "rate": "gamma"},
        ], parameters=SIR["parameters"] + [
            {"name": "sigma_env", "prior": {"dirac": 0.25}, "role": "fixed"}
        ])
        cm = CompiledModel(doc)
        p = dict(SIR_PARAMS, sigma_env=0.25)
        x = np.array([700.0, 150.0, 150.0, 80.0])
        prop = cm.propensities(x, 0.0, p)
        full = cm.process_cov(x, 0.0, p)
        manual = np.zeros((cm.nx, cm.nx))
        for k in range(cm.n_react):
            col = cm.stoich_full[:, k]
            manual += prop[k] * np.outer(col, col)
        env = cm.stoich_full[:, 0] * prop[0] * 0.25
        manual += np.outer(env, env)
        assert full == pytest.approx(manual, abs=1e-10)


class TestSde:
    def test_linear_death_moments(self):
        # dX = -mu X dt + sqrt(mu X) dW has E = C0 e^(-mu t) and
        # V = C0 e^(-mu t)(1 - e^(-mu t)), the linear death process moments
        cm = compiled(DECAY)
        p = {"C0": 500.0, "mu": 0.5}
        rng = np.random.default_rng(2024)
        n = 20000
        x = cm.init_state(p, size=n)
        x = sim.advance(cm, x, 0.0, 1.0, p, rng=rng, formalism="sde", dt=0.01)
        decay = np.exp(-0.5)
        mean_exact = 500.0 * decay
        var_exact = 500.0 * decay * (1.0 - decay)
        assert x[:, 0].mean() == pytest.approx(mean_exact, abs=1.0)
        assert x[:, 0].var() == pytest.approx(var_exact, rel=0.06)

    def test_variance_scales_inversely_with_population(self):
        rng = np.random.default_rng(5)
        fractions = {}
        for n_pop in (400.0, 4000.0):
            params = dict(SIR_PARAMS, N=n_pop, I0=n_pop * 0.01)
            cm = compiled_sir()
            x = cm.init_state(params, size=4000)
            x = sim.advance(cm, x, 0.0, 2.0, params, rng=rng,
                            formalism="sde", dt=0.05)
            fractions[n_pop] = np.var(x[:, 1] / n_pop)
        ratio = fractions[400.0] / fractions[4000.0]
        assert 6.0 < ratio < 16.0

    def test_conservation_and_reproducibility(self):
        # every compartment far from the boundary, so nothing gets clamped,
        # the effect columns cancel exactly and population is conserved
        cm = compiled_sir(
            compartments=[
                {"name": "S", "initial": "N - I0 - 200"},
                {"name": "I", "initial": "I0"},
                {"name": "R", "initial": "200"},
            ]
        )
        params = dict(SIR_PARAMS, I0=50.0)
        x0 = cm.init_state(params, size=50)
        a = sim.advance(cm, x0, 0.0, 4.0, params,
                        rng=np.random.default_rng(9), formalism="sde", dt=0.1)
        b = sim.advance(cm, x0, 0.0, 4.0, params,
                        rng=np.random.default_rng(9), formalism="sde", dt=0.1)
        c = sim.advance(cm, x0, 0.0, 4.0, params,
                        rng=np.random.default_rng(10), formalism="sde", dt=0.1)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a[:, :3].sum(axis=1) == pytest.approx(1000.0, abs=1e-8)

    def test_clamping_never_removes_mass(self):
        cm = compiled_sir()
        x0 = cm.init_state(SIR_PARAMS, size=200)
        out = sim.advance(cm, x0, 0.0, 6.0, SIR_PARAMS,
                          rng=np.random.default_rng(9), formalism="sde",
                          dt=0.1)
        assert np.all(out >= 0.0)
        assert np.all(out[:, :3].sum(axis=1) >= 1000.0 - 1e-8)

    def test_driven_parameter_moments(self):
        # identity-transform random walk with drift: mean c t, variance q^2 t
        from helpers import local_level_model

        cm = CompiledModel(local_level_model())
        p = {"x0": 2.0, "c_drift": 0.3, "q_sd": 0.5, "tau2": 1.0}
        rng = np.random.default_rng(77)
        x = cm.init_state(p, size=30000)
        x = sim.advance(cm, x, 0.0, 4.0, p, rng=rng, formalism="sde", dt=0.1)
        assert x[:, 0].mean() == pytest.approx(2.0 + 0.3 * 4.0, abs=0.02)
        assert x[:, 0].var() == pytest.approx(0.25 * 4.0, rel=0.03)


class TestPsr:
    def test_slice_means_match_rates(self):
        cm = compiled_sir()
        rng = np.random.default_rng(31)
        n = 40000
        x = cm.init_state(SIR_PARAMS, size=n)
        dt = 0.05
        stepped = sim.psr_step(cm, x, 0.0, dt, SIR_PARAMS, rng)
        new_cases = stepped[:, 3] - x[:, 3]
        recoveries = x[:, 1] - stepped[:, 1] + new_cases
        # exit probability per susceptible 1 - exp(-beta I/N dt)
        p_inf = -np.expm1(-0.5 * 10.0 / 1000.0 * dt)
        p_rec = -np.expm1(-0.25 * dt)
        se_inf = np.sqrt(990 * p_inf * (1 - p_inf) / n)
        se_rec = np.sqrt(10 * p_rec * (1 - p_rec) / n)
        assert new_cases.mean() == pytest.approx(990 * p_inf, abs=5 * se_inf)
        assert recoveries.mean() == pytest.approx(10 * p_rec, abs=5 * se_rec)

    def test_competing_exits_split_by_rate(self):
        doc = build(DECAY, compartments=[
            {"name": "C", "initial": "C0"},
            {"name": "A", "initial": "0"},
            {"name": "B", "initial": "0"},
        ], reactions=[
            {"from": "C", "to": "A", "rate": "0.3"},
            {"from": "C", "to": "B", "rate": "0.7"},
        ])
        cm = CompiledModel(doc)
        p = {"C0": 200.0, "mu": 0.5}
        rng = np.random.default_rng(17)
        x = cm.init_state(p, size=2000)
        x = sim.advance(cm, x, 0.0, 12.0, p, rng=rng, formalism="psr", dt=0.25)
        exited = x[:, 1] + x[:, 2]
        assert exited.mean() > 199.0
        frac_a = x[:, 1].sum() / exited.sum()
        assert frac_a == pytest.approx(0.3, abs=0.01)

    def test_stayers_match_survival(self):
        cm = compiled(DECAY)
        p = {"C0": 400.0, "mu": 0.5}
        rng = np.random.default_rng(23)
        n = 5000
        x = cm.init_state(p, size=n)
        x = sim.psr_step(cm, x, 0.0, 1.0, p, rng)
        surv = np.exp(-0.5)
        se = np.sqrt(400 * surv * (1 - surv) / n)
        assert x[:, 0].mean() == pytest.approx(400 * surv, abs=5 * se)

    def test_integer_states_and_conservation(self):
        cm = compiled_sir()
        rng = np.random.default_rng(41)
        x = cm.init_state(SIR_PARAMS, size=300)
        x = sim.advance(cm, x, 0.0, 10.0, SIR_PARAMS, rng=rng,
                        formalism="psr", dt=0.25)
        assert np.array_equal(x[:, :3], np.round(x[:, :3]))
        assert np.all(x[:, :3].sum(axis=1) == 1000.0)
        assert np.all(x >= 0.0)

    def test_environmental_noise_inflates_variance(self):
        params = SIR["parameters"] + [
            {"name": "sigma_env", "prior": {"dirac": 0.0}, "role": "fixed"}
        ]
        reactions = [
            {
                "from": "S",
                "to": "I",
                "rate": "beta*I/N",
                "accumulators": ["cases"],
                "white_noise": {"group": "transmission", "sd": "sigma_env"},
            },
            {"from": "I", "to": "R", "rate": "gamma"},
        ]
        cm = compiled(SIR, parameters=params, reactions=reactions)
        out = {}
        for sd in (0.0, 1.0):
            p = dict(SIR_PARAMS, sigma_env=sd)
            rng = np.random.default_rng(8)
            x = cm.init_state(p, size=3000)
            x = sim.advance(cm, x, 0.0, 5.0, p, rng=rng, formalism="psr",
                            dt=0.25)
            out[sd] = np.var(x[:, 3])
        assert out[1.0] > 2.0 * out[0.0]

    def test_gamma_increment_moments(self):
        params = SIR["parameters"] + [
            {"name": "sigma_env", "prior": {"dirac": 0.6}, "role": "fixed"}
        ]
        reactions = [
            {
                "from": "S",
                "to": "I",
                "rate": "beta*I/N",
                "accumulators": ["cases"],
                "white_noise": {"group": "transmission", "sd": "sigma_env"},
            },
            {"from": "I", "to": "R", "rate": "gamma"},
        ]
        cm = compiled(SIR, parameters=params, reactions=reactions)
        p = dict(SIR_PARAMS, sigma_env=0.6)
        rng = np.random.default_rng(13)
        from ssm.simulate import _noise_deltas

        dt = 0.2
        delta = _noise_deltas(cm, dt, p, (60000,), rng)
        assert delta[:, 1] == pytest.approx(np.full(60000, dt))
        draws = delta[:, 0]
        assert draws.mean() == pytest.approx(dt, rel=0.01)
        assert draws.var() == pytest.approx(0.36 * dt, rel=0.03)

    def test_zero_sd_noise_collapses_to_dt(self):
        params = SIR["parameters"] + [
            {"name": "sigma_env", "prior": {"dirac": 0.0}, "role": "fixed"}
        ]
        reactions = [
            {
                "from": "S",
                "to": "I",
                "rate": "beta*I/N",
                "accumulators": ["cases"],
                "white_noise": {"group": "transmission", "sd": "sigma_env"},
            },
            {"from": "I", "to": "R", "rate": "gamma"},
        ]
        cm = compiled(SIR, parameters=params, reactions=reactions)
        from ssm.simulate import _noise_deltas

        delta = _noise_deltas(cm, 0.3, dict(SIR_PARAMS, sigma_env=0.0),
                              (16,), np.random.default_rng(1))
        assert np.array_equal(delta, np.full((16, 2), 0.3))


class TestJump:
    def test_external_inflow_is_poisson(self):
        doc = build(DECAY, reactions=[
            {"from": "EXTERNAL", "to": "C", "rate": "12.0"}
        ], compartments=[{"name": "C", "initial": "0"}])
        cm = CompiledModel(doc)
        p = {"C0": 0.0, "mu": 0.5}
        rng = np.random.default_rng(19)
        counts = np.array([
            sim.gillespie_interval(cm, cm.init_state(p), 0.0, 2.0, p, rng,
                                   dt_max=5.0)[0]
            for _ in range(800)
        ])
        lam = 24.0
        assert counts.mean() == pytest.approx(lam, abs=5 * np.sqrt(lam / 800))
        assert counts.var() == pytest.approx(lam, rel=0.2)

    def test_single_individual_survival_curve(self):
        cm = compiled(DECAY, parameters=[
            {"name": "C0", "prior": {"dirac": 1.0}, "role": "fixed"},
            {"name": "mu", "prior": {"dirac": 0.7}, "role": "fixed"},
        ])
        p = {"C0": 1.0, "mu": 0.7}
        rng = np.random.default_rng(29)
        n = 3000
        for t in (0.5, 1.0, 2.0):
            alive = sum(
                sim.gillespie_interval(cm, cm.init_state(p), 0.0, t, p, rng,
                                       dt_max=10.0)[0]
                for _ in range(n)
            )
            surv = np.exp(-0.7 * t)
            se = np.sqrt(surv * (1 - surv) / n)
            assert alive / n == pytest.approx(surv, abs=5 * se)

    def test_competing_exits_split_by_rate(self):
        doc = build(DECAY, compartments=[
            {"name": "C", "initial": "C0"},
            {"name": "A", "initial": "0"},
            {"name": "B", "initial": "0"},
        ], reactions=[
            {"from": "C", "to": "A", "rate": "0.3"},
            {"from": "C", "to": "B", "rate": "0.7"},
        ])
        cm = CompiledModel(doc)
        p = {"C0": 40.0, "mu": 0.5}
        rng = np.random.default_rng(37)
        tot_a = tot_b = 0.0
        for _ in range(300):
            x = sim.gillespie_interval(cm, cm.init_state(p), 0.0, 25.0, p,
                                       rng, dt_max=25.0)
            tot_a += x[1]
            tot_b += x[2]
        n = tot_a + tot_b
        se = np.sqrt(0.3 * 0.7 / n)
        assert tot_a / n == pytest.approx(0.3, abs=5 * se)

    def test_conservation_and_integrality(self):
        cm = compiled_sir()
        rng = np.random.default_rng(43)
        x = sim.gillespie_interval(cm, cm.init_state(SIR_PARAMS), 0.0, 8.0,
                                   SIR_PARAMS, rng, dt_max=0.5)
        assert x[:3].sum() == 1000.0
        assert np.array_equal(x, np.round(x))
        assert x[3] == 990.0 - x[0]

    def test_paths_reproducible_by_seed(self):
        cm = compiled_sir()
        times = np.arange(0.0, 6.0)
        a = sim.simulate_paths(cm, SIR_PARAMS, times, formalism="jump",
                               rng=np.random.default_rng(3), trajectories=3)
        b = sim.simulate_paths(cm, SIR_PARAMS, times, formalism="jump",
                               rng=np.random.default_rng(3), trajectories=3)
        assert np.array_equal(a, b)


class TestPaths:
    def test_shapes_and_monotone_accumulator(self):
        cm = compiled_sir()
        times = np.arange(0.0, 13.0)
        for formalism in ("ode", "sde", "psr"):
            out = sim.simulate_paths(
                cm, SIR_PARAMS, times, formalism=formalism,
                rng=np.random.default_rng(6), trajectories=4, dt=0.25,
            )
            assert out.shape == (4, 13, 4)
            assert np.all(np.diff(out[:, :, 3], axis=1) >= -1e-9)
            assert np.array_equal(out[:, 0, :], np.tile(
                cm.init_state(SIR_PARAMS), (4, 1)))

    def test_mean_of_stochastic_paths_tracks_ode(self):
        cm = compiled_sir()
        big = dict(SIR_PARAMS, N=100000.0, I0=1000.0)
        times = np.array([0.0, 5.0, 10.0])
        ode = sim.simulate_paths(cm, big, times, formalism="ode", dt=0.1)
        psr = sim.simulate_paths(cm, big, times, formalism="psr",
                                 rng=np.random.default_rng(12),
                                 trajectories=200, dt=0.25)
        rel = np.abs(psr[:, -1, 1].mean() - ode[0, -1, 1]) / ode[0, -1, 1]
        assert rel < 0.02
