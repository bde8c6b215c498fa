"""Compilation of a ModelSpec into fast numeric evaluators.

The state vector is laid out as

    x = [compartments | driven parameter coordinates | accumulators]

where a driven (diffusing) parameter occupies one coordinate on its
transformed scale and rate formulas see the natural-scale quantity.  From the
declared reactions we build, symbolically, the propensity of each reaction,
the drift of every coordinate and the exact Jacobian of the drift, then emit
one Python function evaluating all of them.  The same generated source is
compiled twice: once against math.* for fast scalar use (moment filters) and
once against numpy.* so a whole swarm of states, or per-particle parameter
values, can be pushed through in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssm import expr as ex
from ssm.model import Identity, Log, Logit, ModelSpec


class DomainError(RuntimeError):
    """State or propensity left the valid domain during integration."""


def _state_local(name):
    return f"_s_{name}"


def _param_local(name):
    return f"_p_{name}"


def _natural_local(name):
    return f"_q_{name}"


@dataclass
class ObsFns:
    """Compiled pieces of one observation stream.

    `parts` lists what the generated function returns before the gradient
    entries: ('mean',) for poisson, ('mean', 'variance') for
    discretized_normal, ('trials', 'probability') for binomial.
    """

    name: str
    kind: str
    parts: tuple
    grad_cols: tuple
    scalar: callable
    vector: callable


class CompiledModel:
    """Evaluators and structural matrices derived from a ModelSpec."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        comp = list(spec.compartments)
        diff = [d.name for d in spec.diffusions]
        accs = list(spec.accumulators)
        self.state_names = tuple(comp + diff + accs)
        self.n_comp = len(comp)
        self.n_diff = len(diff)
        self.n_acc = len(accs)
        self.nx = len(self.state_names)
        self.n_react = spec.n_reactions
        self.comp_slice = slice(0, self.n_comp)
        self.diff_slice = slice(self.n_comp, self.n_comp + self.n_diff)
        self.acc_slice = slice(self.n_comp + self.n_diff, self.nx)

        # stoichiometry over the full state: accumulators count one firing
        # per reaction that feeds them, driven parameters take no jumps
        full = np.zeros((self.nx, self.n_react))
        full[: self.n_comp, :] = spec.stoichiometry
        for r in spec.reactions:
            for acc in r.accumulators:
                full[self.state_names.index(acc), r.index] = 1.0
        self.stoich_full = full

        self.source_index = tuple(r.source for r in spec.reactions)
        self.reaction_labels = tuple(r.label for r in spec.reactions)

        by_source = {}
        external = []
        for k, src in enumerate(self.source_index):
            if src is None:
                external.append(k)
            else:
                by_source.setdefault(src, []).append(k)
        # competing exits grouped by the compartment they drain, plus the
        # absolute-rate reactions and any compartments they may overdraw
        self.reactions_by_source = tuple(
            (src, tuple(ks)) for src, ks in sorted(by_source.items())
        )
        self.external_reactions = tuple(external)
        caps = []
        for k in external:
            need = tuple(
                (c, -delta) for c, delta in spec.reactions[k].effect if delta < 0
            )
            caps.append(need)
        self.external_caps = tuple(caps)

        # noise groups: (sd parameter name, member reaction indices)
        self.noise_groups = tuple(
            (g.sd_param, np.array(g.members, dtype=int)) for g in spec.noise_groups
        )

        self._build_symbols()
        self._build_propensities()
        source = self._emit_module()
        self.source = source
        scalar_ns = dict(ex.SCALAR_NAMESPACE)
        vector_ns = dict(ex.VECTOR_NAMESPACE)
        exec(compile(source, f"<model {spec.name}>", "exec"), scalar_ns)
        exec(compile(source, f"<model {spec.name}>", "exec"), vector_ns)
        self._core_scalar = scalar_ns["core"]
        self._core_vector = vector_ns["core"]
        self._init_vector = vector_ns["init"]
        self.observations = tuple(
            ObsFns(
                o.name,
                o.distribution,
                self._obs_parts[i],
                self._obs_grad_cols[i],
                scalar_ns[f"obs{i}"],
                vector_ns[f"obs{i}"],
            )
            for i, o in enumerate(spec.observations)
        )
        self._obs_by_name = {o.name: o for o in self.observations}

    # ------------------------------------------------------------------
    # symbol bookkeeping

    def _build_symbols(self):
        spec = self.spec
        resolve = {}
        for i, name in enumerate(spec.compartments):
            resolve[name] = _state_local(name)
        for d in spec.diffusions:
            resolve[d.name] = _natural_local(d.name)
        for name in spec.accumulators:
            resolve[name] = _state_local(name)
        for p in spec.parameters:
            resolve[p.name] = _param_local(p.name)
        resolve["t"] = "t"
        self._resolve_map = resolve

        # chain factor d(natural)/d(coordinate) for every state column,
        # written against natural-scale symbols
        chains = []
        for name in spec.compartments:
            chains.append((name, None))
        for d in spec.diffusions:
            q = ex.Sym(d.name)
            if isinstance(d.transform, Identity):
                chains.append((d.name, None))
            elif isinstance(d.transform, Log):
                chains.append((d.name, q))
            elif isinstance(d.transform, Logit):
                chains.append((d.name, ex.mul(q, ex.sub(ex.ONE, q))))
            else:
                raise ValueError(f"unsupported transform on driven parameter {d.name}")
        for name in spec.accumulators:
            chains.append((name, None))
        self._column_chains = chains

    def _resolve(self, name):
        return self._resolve_map[name]

    def _partials(self, tree):
        """Nonzero (state column, derivative Expr) pairs, chain applied."""
        out = []
        syms = tree.free_symbols()
        for j, (name, chain) in enumerate(self._column_chains):
            if name not in syms:
                continue
            d = ex.differentiate(tree, name)
            if chain is not None:
                d = ex.mul(d, chain)
            if d != ex.ZERO:
                out.append((j, d))
        return out

    def _build_propensities(self):
        spec = self.spec
        props = []
        for r in spec.reactions:
            if r.source is None:
                props.append(r.rate)
            else:
                props.append(ex.mul(r.rate, ex.Sym(spec.compartments[r.source])))
        self._prop_exprs = props

    # ------------------------------------------------------------------
    # code generation

    def _prologue(self, lines, needed):
        spec = self.spec
        for i, name in enumerate(spec.compartments):
            if name in needed:
                lines.append(f"    {_state_local(name)} = x[..., {i}]")
        for d_i, d in enumerate(spec.diffusions):
            col = self.n_comp + d_i
            if d.name in needed:
                u = f"x[..., {col}]"
                q = _natural_local(d.name)
                if isinstance(d.transform, Identity):
                    lines.append(f"    {q} = {u}")
                elif isinstance(d.transform, Log):
                    lines.append(f"    {q} = exp({u})")
                else:  # logit
                    lines.append(f"    {q} = 1.0/(1.0 + exp(-({u})))")
        for a_i, name in enumerate(spec.accumulators):
            if name in needed:
                col = self.n_comp + self.n_diff + a_i
                lines.append(f"    {_state_local(name)} = x[..., {col}]")
        for p in spec.parameters:
            if p.name in needed:
                lines.append(f"    {_param_local(p.name)} = p['{p.name}']")

    def _emit_module(self):
        spec = self.spec
        code = ex.to_python
        resolve = self._resolve

        # --- core: propensities, drift, volatilities, jacobian nonzeros
        prop_partials = [self._partials(tree) for tree in self._prop_exprs]
        diff_drift_partials = [self._partials(d.drift) for d in spec.diffusions]

        needed = set()
        for tree in self._prop_exprs:
            needed |= tree.free_symbols()
        for d in spec.diffusions:
            needed |= d.drift.free_symbols() | d.volatility.free_symbols()
        for plist in prop_partials + diff_drift_partials:
            for _, tree in plist:
                needed |= tree.free_symbols()

        lines = ["def core(x, t, p):"]
        self._prologue(lines, needed)

        for k, tree in enumerate(self._prop_exprs):
            lines.append(f"    _a{k} = {code(tree, resolve)}")

        grad_names = {}
        for k, plist in enumerate(prop_partials):
            for j, tree in plist:
                grad_names[(k, j)] = f"_g{k}_{j}"
                lines.append(f"    _g{k}_{j} = {code(tree, resolve)}")

        def comb(pairs):
            """Source for a signed integer combination of locals."""
            terms = []
            for coef, local in pairs:
                if coef == 1:
                    terms.append(f"+ {local}")
                elif coef == -1:
                    terms.append(f"- {local}")
                else:
                    terms.append(f"+ ({coef})*{local}")
            s = " ".join(terms)
            return s.lstrip("+ ") if s.startswith("+ ") else s

        # drift rows
        drift_locals = []
        for i in range(self.n_comp):
            pairs = [
                (int(self.stoich_full[i, k]), f"_a{k}")
                for k in range(self.n_react)
                if self.stoich_full[i, k] != 0
            ]
            local = f"_d{i}"
            lines.append(f"    {local} = {comb(pairs) if pairs else '0.0'}")
            drift_locals.append(local)
        for d_i, d in enumerate(spec.diffusions):
            local = f"_d{self.n_comp + d_i}"
            lines.append(f"    {local} = {code(d.drift, resolve)}")
            drift_locals.append(local)
        for a_i in range(self.n_acc):
            row = self.n_comp + self.n_diff + a_i
            pairs = [
                (1, f"_a{k}")
                for k in range(self.n_react)
                if self.stoich_full[row, k] != 0
            ]
            local = f"_d{row}"
            lines.append(f"    {local} = {comb(pairs) if pairs else '0.0'}")
            drift_locals.append(local)

        vol_locals = []
        for d_i, d in enumerate(spec.diffusions):
            local = f"_v{d_i}"
            lines.append(f"    {local} = {code(d.volatility, resolve)}")
            vol_locals.append(local)

        # jacobian nonzeros: compartment and accumulator rows combine the
        # propensity partials, driven rows differentiate their drift formula
        jac_cols = {}
        for k, plist in enumerate(prop_partials):
            for j, _ in plist:
                jac_cols.setdefault(j, set()).add(k)

        jac_index = []
        jac_locals = []
        for i in range(self.nx):
            if self.n_comp <= i < self.n_comp + self.n_diff:
                d_i = i - self.n_comp
                for j, tree in diff_drift_partials[d_i]:
                    local = f"_j{i}_{j}"
                    lines.append(f"    {local} = {code(tree, resolve)}")
                    jac_index.append((i, j))
                    jac_locals.append(local)
                continue
            for j, ks in sorted(jac_cols.items()):
                pairs = [
                    (int(self.stoich_full[i, k]), grad_names[(k, j)])
                    for k in sorted(ks)
                    if self.stoich_full[i, k] != 0
                ]
                if not pairs:
                    continue
                local = f"_j{i}_{j}"
                lines.append(f"    {local} = {comb(pairs)}")
                jac_index.append((i, j))
                jac_locals.append(local)

        returns = (
            [f"_a{k}" for k in range(self.n_react)]
            + drift_locals
            + vol_locals
            + jac_locals
        )
        lines.append(f"    return ({', '.join(returns)}{',' if returns else ''})")
        self.jac_index = tuple(jac_index)

        # --- init: state from parameter values
        lines.append("")
        lines.append("def init(p):")
        init_needed = set()
        for tree in spec.compartment_initials:
            init_needed |= tree.free_symbols()
        for d in spec.diffusions:
            init_needed.add(d.initial_param)
        for p in spec.parameters:
            if p.name in init_needed:
                lines.append(f"    {_param_local(p.name)} = p['{p.name}']")
        entries = [code(tree, resolve) for tree in spec.compartment_initials]
        for d in spec.diffusions:
            v = _param_local(d.initial_param)
            if isinstance(d.transform, Identity):
                entries.append(v)
            elif isinstance(d.transform, Log):
                entries.append(f"log({v})")
            else:
                entries.append(f"log(({v})/(1.0 - ({v})))")
        entries.extend(["0.0"] * self.n_acc)
        lines.append(f"    return ({', '.join(entries)}{',' if entries else ''})")

        # --- observation streams
        self._obs_parts = []
        self._obs_grad_cols = []
        for i, o in enumerate(spec.observations):
            lines.append("")
            lines.append(f"def obs{i}(x, t, p):")
            if o.distribution == "binomial":
                parts = ("trials", "probability")
                part_exprs = [o.trials, o.probability]
                mean_expr = ex.mul(o.trials, o.probability)
            elif o.distribution == "discretized_normal":
                parts = ("mean", "variance")
                part_exprs = [o.mean, o.variance]
                mean_expr = o.mean
            else:
                parts = ("mean",)
                part_exprs = [o.mean]
                mean_expr = o.mean
            grads = self._partials(mean_expr)
            needed = set()
            for tree in part_exprs:
                needed |= tree.free_symbols()
            for _, tree in grads:
                needed |= tree.free_symbols()
            body = []
            self._prologue(body, needed)
            outs = []
            for part_i, tree in enumerate(part_exprs):
                body.append(f"    _o{part_i} = {code(tree, resolve)}")
                outs.append(f"_o{part_i}")
            for j, tree in grads:
                body.append(f"    _og{j} = {code(tree, resolve)}")
                outs.append(f"_og{j}")
            lines.extend(body)
            lines.append(f"    return ({', '.join(outs)},)")
            self._obs_parts.append(parts)
            self._obs_grad_cols.append(tuple(j for j, _ in grads))

        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------
    # evaluation helpers

    def _split_core(self, raw, lead_shape):
        m, nx, nd = self.n_react, self.nx, self.n_diff
        prop = _pack(raw[:m], lead_shape, m)
        drift = _pack(raw[m : m + nx], lead_shape, nx)
        vols = _pack(raw[m + nx : m + nx + nd], lead_shape, nd)
        jac = np.zeros(lead_shape + (nx, nx))
        for (r, c), v in zip(self.jac_index, raw[m + nx + nd :]):
            jac[..., r, c] = v
        return prop, drift, vols, jac

    def dynamics(self, x, t, p):
        """Propensities, drift, volatilities and drift Jacobian at state x.

        x may carry leading batch dimensions; parameter values may be arrays
        broadcasting against them.
        """
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        if lead:
            raw = self._core_vector(x, t, p)
        else:
            raw = self._core_scalar(x, t, p)
        return self._split_core(raw, lead)

    def propensities(self, x, t, p):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        core = self._core_vector if lead else self._core_scalar
        raw = core(x, t, p)
        return _pack(raw[: self.n_react], lead, self.n_react)

    def drift(self, x, t, p):
        return self.dynamics(x, t, p)[1]

    def jacobian(self, x, t, p):
        return self.dynamics(x, t, p)[3]

    def volatilities(self, x, t, p):
        return self.dynamics(x, t, p)[2]

    def init_state(self, p, size=None):
        """Initial state from parameter values; accumulator coordinates are 0.

        With `size`, returns (size, nx); parameter values may then be arrays
        of matching length.
        """
        raw = self._init_vector(p)
        if size is None:
            out = np.empty(self.nx)
            for i, v in enumerate(raw):
                out[i] = v
            return out
        out = np.empty((size, self.nx))
        for i, v in enumerate(raw):
            out[:, i] = v
        return out

    def group_sds(self, p):
        """White-noise sd value per noise group, in declaration order."""
        return [p[sd_name] for sd_name, _ in self.noise_groups]

    def env_columns(self, prop, p):
        """Environmental dispersion columns: for each noise group, the
        state-space direction sum of member effect columns weighted by their
        propensities, scaled by the group sd."""
        lead = prop.shape[:-1]
        cols = np.zeros(lead + (self.nx, len(self.noise_groups)))
        for g_i, (sd_name, members) in enumerate(self.noise_groups):
            sd = np.asarray(p[sd_name], dtype=float)
            acc = np.zeros(lead + (self.nx,))
            for k in members:
                acc += self.stoich_full[:, k] * prop[..., k, None]
            cols[..., g_i] = acc * sd[..., None]
        return cols

    def process_cov(self, x, t, p, demographic=True, environmental=True):
        """Full-state instantaneous covariance of the diffusion approximation."""
        prop, _, vols, _ = self.dynamics(x, t, p)
        return self.process_cov_from(prop, vols, p, demographic, environmental)

    def process_cov_from(self, prop, vols, p, demographic=True, environmental=True):
        lead = prop.shape[:-1]
        cov = np.zeros(lead + (self.nx, self.nx))
        if demographic and self.n_react:
            a = np.clip(prop, 0.0, None)
            cov += np.einsum("...k,ik,jk->...ij", a, self.stoich_full, self.stoich_full)
        if environmental and self.noise_groups:
            cols = self.env_columns(np.clip(prop, 0.0, None), p)
            cov += np.einsum("...ig,...jg->...ij", cols, cols)
        for d_i in range(self.n_diff):
            row = self.n_comp + d_i
            cov[..., row, row] += vols[..., d_i] ** 2
        return cov

    # ------------------------------------------------------------------
    # observations

    def obs(self, name):
        return self._obs_by_name[name]

    def obs_values(self, name, x, t, p):
        """Evaluate one stream; returns (parts dict, grad over state or None).

        The gradient is of the observed mean (trials*probability for a
        binomial stream) and is only assembled when the state has no batch
        dimensions, which is the moment-filter case.
        """
        o = self._obs_by_name[name]
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        fn = o.vector if lead else o.scalar
        raw = fn(x, t, p)
        n_parts = len(o.parts)
        parts = {}
        for i, part in enumerate(o.parts):
            parts[part] = _pack_scalar(raw[i], lead)
        grad = np.zeros(lead + (self.nx,))
        for j, v in zip(o.grad_cols, raw[n_parts:]):
            grad[..., j] = v
        return parts, grad

    def natural_diffusions(self, x):
        """Natural-scale values of the driven parameters for reporting."""
        x = np.asarray(x, dtype=float)
        out = []
        for d_i, d in enumerate(self.spec.diffusions):
            u = x[..., self.n_comp + d_i]
            out.append(np.asarray(d.transform.inverse(u), dtype=float))
        return out


def _pack(cols, lead_shape, n):
    out = np.empty(lead_shape + (n,))
    for i, v in enumerate(cols):
        out[..., i] = v
    return out


def _pack_scalar(v, lead_shape):
    if lead_shape:
        return np.broadcast_to(np.asarray(v, dtype=float), lead_shape).copy()
    return float(v)


def compile_model(spec: ModelSpec) -> CompiledModel:
    return CompiledModel(spec)
