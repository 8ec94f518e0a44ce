"""Turning a rule assignment into an evaluable smoothed program.

compile() resolves everything static about an assignment (table-gap
fallbacks, correlation constants, validity checks) and returns a
SmoothedProgram whose evaluate* methods propagate NodeStats through the
graph in topological order. Evaluation is vectorized over a flat pixel
batch and can shard the batch across worker threads; every random draw is
keyed by (seed, stream, node, pixel, sample), so results are bit-identical
for any worker count or batch partition.
"""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng, rules
from .autodiff import gradients, node_values
from .ir import (COMPARISON_OPS, UNARY_OPS, Node, ProgramGraph,
                 depends_on_spatial_input)
from .rules import (EvalDiagnostics, NodeStats, RuleAssignment, RuleError,
                    RuleTag)


class EvaluationError(RuntimeError):
    """Evaluation failed at a specific node: a rule precondition was
    violated at runtime or a statistic came out non-finite."""

    def __init__(self, node_id: int, op: str, detail: str):
        super().__init__(f"node {node_id} ({op}): {detail}")
        self.node_id = node_id
        self.op = op


@dataclass(frozen=True)
class InputSpec:
    """How program inputs map onto an image grid.

    Shaders are authored in a fixed view of ref_size x ref_size units, so
    a W x H render samples the same scene at any resolution: pixel (i, j)
    maps to ((i + .5) * ref_size / W, (j + .5) * ref_size / H) and the
    jitter std is sigma_px output pixels converted to view units. t is a
    deterministic parameter unless t_sigma is set."""
    sigma_px: float = 0.5
    ref_size: float = 256.0
    t_value: float = 0.0
    t_sigma: float = 0.0

    def grid(self, w: int, h: int):
        """(means, sigmas, pixel_ids) for the full image, flattened in row
        order."""
        if w < 1 or h < 1:
            raise ValueError("image dimensions must be positive")
        sx = self.ref_size / w
        sy = self.ref_size / h
        xs = (np.arange(w, dtype=float) + 0.5) * sx
        ys = (np.arange(h, dtype=float) + 0.5) * sy
        gx, gy = np.meshgrid(xs, ys)
        means = {"x": gx.ravel(), "y": gy.ravel(), "t": self.t_value}
        sigmas = {"x": self.sigma_px * sx, "y": self.sigma_px * sy,
                  "t": self.t_sigma}
        pixel_ids = np.arange(w * h, dtype=np.int64)
        return means, sigmas, pixel_ids


# ---------------------------------------------------------------------------
# deterministic cost model
#
# Abstract per-pixel work units per node, used as the runtime objective
# during tuning so search results do not depend on machine load. Wall-clock
# timing (measure_runtime) exists alongside for reports. One unit is
# nominally one arithmetic op; MODEL_MS_PER_UNIT converts units*pixels to
# the reported "modeled ms".

MODEL_MS_PER_UNIT = 1e-6

_DIRECT_UNITS = {
    "add": 1.0, "sub": 1.0, "mul": 1.0, "div": 1.5, "mod": 2.5,
    "neg": 0.5, "recip": 1.5, "sqrt": 1.5, "powi": 1.5,
    "sin": 2.0, "cos": 2.0, "tan": 2.5, "sinh": 2.5, "cosh": 2.5,
    "tanh": 2.5, "exp": 2.0, "log": 2.0,
    "fract": 1.2, "floor": 1.0, "ceil": 1.0, "heaviside": 1.0,
    "cmp_gt": 1.0, "cmp_ge": 1.0, "cmp_lt": 1.0, "cmp_le": 1.0,
    "select": 1.5, "const": 0.0, "input": 0.0,
}

_ADAPTIVE_BINARY_UNITS = {
    "add": 2.0, "sub": 2.0, "mul": 4.0, "div": 12.0, "mod": 10.0,
    "cmp_gt": 7.0, "cmp_ge": 7.0, "cmp_lt": 7.0, "cmp_le": 7.0,
}
_SELECT_UNITS = 14.0
_RHO_AFFINE_SURCHARGE = 4.0


def node_model_units(node: Node, tag: RuleTag | None) -> float:
    """Modeled per-pixel cost of one node under its effective rule."""
    op = node.op
    base = _DIRECT_UNITS[op]
    if op in ("const", "input") or tag is None:
        return base
    extra = _RHO_AFFINE_SURCHARGE if tag.rho_mode == "affine" else 0.0
    if tag.kind == "none":
        return base + 0.5
    if tag.kind == "mc":
        return tag.n * (base + 2.0) + 6.0
    if op == "neg":
        return base
    if tag.kind == "dorn":
        if op in UNARY_OPS:
            return 2.0 * base + 0.5
        return base + 1.0
    if op == "select":
        return _SELECT_UNITS + extra
    if op in _ADAPTIVE_BINARY_UNITS:
        return _ADAPTIVE_BINARY_UNITS[op] + extra
    # unary closed forms: adaptive evaluates two table entries, compact
    # evaluates antiderivatives at interval endpoints
    if tag.kind == "adaptive":
        return 2.0 * base + 1.0
    if tag.kernel == "tent":
        return 6.0 * base + 3.0
    return 4.0 * base + 2.0


# ---------------------------------------------------------------------------

@dataclass
class SmoothedProgram:
    """An evaluable smoothed shader: graph + resolved rules + sigma scales.

    Immutable after compile (with_sigma_scales returns a copy); evaluation
    methods are pure given the seed."""
    graph: ProgramGraph
    assignment: RuleAssignment
    effective: dict[int, RuleTag]
    sigma_scales: dict[int, float] = field(default_factory=dict)
    seed: int = 0
    bessel: bool = False
    substitutions: list = field(default_factory=list)

    def with_sigma_scales(self, scales: dict[int, float]) \
            -> "SmoothedProgram":
        for nid, s in scales.items():
            if not s > 0.0:
                raise ValueError(f"sigma scale for node {nid} must be "
                                 f"positive, got {s}")
        return replace(self, sigma_scales=dict(scales))

    def scale_for(self, node_id: int) -> float:
        return self.sigma_scales.get(node_id, 1.0)

    # -- core propagation --------------------------------------------------

    def _rho_for(self, node: Node, tag: RuleTag, ctx: "_AffineContext",
                 diag: EvalDiagnostics | None):
        mode = tag.rho_mode or "zero"
        if mode == "zero":
            return (0.0, 0.0, 0.0) if node.op == "select" else 0.0
        if mode == "sampled":
            rho = self.assignment.rho_constants.get(node.id)
            if rho is None:
                raise RuleError(f"node {node.id} lacks a trained rho "
                                f"constant")
            return rho
        if node.op == "select":
            return ctx.select_rhos(node, diag)
        a, b = node.operands
        return ctx.pair_rho(a, b, diag)

    def _eval_block(self, means: dict, sigmas: dict,
                    pixel_ids: np.ndarray,
                    diag: EvalDiagnostics | None) -> dict[str, NodeStats]:
        g = self.graph
        stats: list[NodeStats | None] = [None] * len(g)
        samples: dict[int, np.ndarray] = {}
        ctx = _AffineContext(g, means)
        # free sample buffers after their last consumer (outputs pinned)
        last_use = {nid: nid for nid in range(len(g))}
        for node in g.nodes:
            for oid in node.operands:
                last_use[oid] = node.id
        for _, nid in g.outputs:
            last_use[nid] = len(g)
        pending = sorted(last_use.items(), key=lambda kv: kv[1])
        free_idx = 0

        for node in g.nodes:
            nid = node.id
            if node.op == "input":
                mu = np.asarray(means[node.name], dtype=float)
                sig = np.asarray(sigmas.get(node.name, 0.0), dtype=float)
                sig = sig * self.scale_for(nid)
                stats[nid] = NodeStats(mu, sig * sig)
            elif node.op == "const":
                stats[nid] = NodeStats(float(node.value), 0.0)
            else:
                tag = self.effective[nid]
                try:
                    # non-finite results raise typed errors below; numpy's
                    # intermediate warnings on the way there are noise
                    with np.errstate(all="ignore"):
                        out = self._propagate(node, tag, stats, samples,
                                              pixel_ids, ctx, diag)
                except RuleError as e:
                    raise EvaluationError(nid, node.op, str(e)) from e
                scale = self.scale_for(nid)
                if scale != 1.0:
                    out = NodeStats(out.mean, out.var * (scale * scale))
                self._check_finite(node, out)
                stats[nid] = out
            while free_idx < len(pending) and pending[free_idx][1] <= nid:
                dead = pending[free_idx][0]
                if dead != nid:
                    samples.pop(dead, None)
                free_idx += 1
        return {name: stats[out_id] for name, out_id in g.outputs}

    def _propagate(self, node: Node, tag: RuleTag, stats, samples,
                   pixel_ids, ctx, diag) -> NodeStats:
        op = node.op
        operands = [stats[i] for i in node.operands]
        if tag.kind == "mc":
            block = self._mc_samples(node, tag, stats, samples, pixel_ids)
            samples[node.id] = block
            return rules.mc_summarize(block, self.bessel, diag)
        if tag.kind == "none":
            return rules.propagate_none(op, operands, node.power, diag)
        if tag.kind == "dorn":
            return rules.propagate_dorn(op, operands, node.power, diag)
        if tag.kind == "adaptive":
            if op == "select":
                rhos = self._rho_for(node, tag, ctx, diag)
                return rules.propagate_select(*operands, rhos=rhos,
                                              diag=diag)
            if op in UNARY_OPS:
                return rules.propagate_adaptive_unary(op, operands[0],
                                                      node.power, diag)
            if op == "mod":
                return rules.propagate_mod(operands[0], operands[1], diag)
            rho = self._rho_for(node, tag, ctx, diag)
            if op == "div":
                return rules.propagate_div(operands[0], operands[1], rho,
                                           diag)
            if op in COMPARISON_OPS:
                return rules.propagate_comparison(op, operands[0],
                                                  operands[1], rho,
                                                  diag=diag)
            return rules.propagate_adaptive_binary(op, operands[0],
                                                   operands[1], rho, diag)
        # compact: closed forms under a finite-support kernel; binary
        # moment algebra is kernel-free, so only unary lookups and the
        # comparison step change with the kernel choice
        if op in UNARY_OPS:
            return rules.propagate_compact(op, operands[0], tag.kernel,
                                           node.power, diag=diag)
        if op == "select":
            return rules.propagate_select(*operands, diag=diag)
        if op == "mod":
            return rules.propagate_mod(operands[0], operands[1], diag)
        if op == "div":
            return rules.propagate_div(operands[0], operands[1], 0.0, diag)
        if op in COMPARISON_OPS:
            return rules.propagate_comparison(op, operands[0], operands[1],
                                              0.0, hat=tag.kernel, diag=diag)
        return rules.propagate_adaptive_binary(op, operands[0], operands[1],
                                               0.0, diag)

    def _mc_samples(self, node: Node, tag: RuleTag, stats, samples,
                    pixel_ids) -> np.ndarray:
        g = self.graph
        n = tag.n
        blocks = []
        for idx, oid in enumerate(node.operands):
            onode = g.node(oid)
            ostats = stats[oid]
            otag = self.effective.get(oid)
            if otag is not None and otag.kind == "mc" and otag.n == n \
                    and oid in samples:
                block = samples[oid]
            elif onode.op == "const":
                block = np.broadcast_to(float(onode.value),
                                        (n,) + pixel_ids.shape)
            elif onode.op == "input":
                block = rules.draw_samples(ostats, oid, pixel_ids, n,
                                           self.seed,
                                           rng.STREAM_INPUT_JITTER)
            else:
                block = rules.draw_samples(ostats, oid, pixel_ids, n,
                                           self.seed,
                                           rng.STREAM_NODE_JITTER)
            block = rules.repair_samples(node.op, idx, block, ostats.mean,
                                         node.power)
            blocks.append(block)
        return rules.mc_node(node.op, blocks, node.power)

    @staticmethod
    def _check_finite(node: Node, out: NodeStats) -> None:
        bad = 0
        mean = np.asarray(out.mean)
        var = np.asarray(out.var)
        if not np.all(np.isfinite(mean)):
            bad += int(np.count_nonzero(~np.isfinite(mean)))
        if not np.all(np.isfinite(var)):
            bad += int(np.count_nonzero(~np.isfinite(var)))
        if bad:
            raise EvaluationError(node.id, node.op,
                                  f"{bad} non-finite values")

    # -- public evaluation entry points -------------------------------------

    def evaluate_stats(self, means: dict, sigmas: dict,
                       pixel_ids: np.ndarray, workers: int = 1,
                       diag: EvalDiagnostics | None = None
                       ) -> dict[str, NodeStats]:
        """Output NodeStats per output name over a flat pixel batch."""
        pixel_ids = np.asarray(pixel_ids)
        npix = int(pixel_ids.size)
        if workers <= 1 or npix < 2 * workers:
            return self._eval_block(means, sigmas, pixel_ids, diag)

        def sliced(d, lo, hi):
            return {k: (np.asarray(v, dtype=float)[lo:hi]
                        if np.ndim(v) > 0 else v) for k, v in d.items()}

        bounds = np.linspace(0, npix, workers + 1).astype(int)
        chunks = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            lo, hi = int(lo), int(hi)
            if hi > lo:
                chunks.append((sliced(means, lo, hi),
                               sliced(sigmas, lo, hi), pixel_ids[lo:hi],
                               EvalDiagnostics()))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda c: self._eval_block(c[0], c[1], c[2], c[3]), chunks))
        if diag is not None:
            for c in chunks:
                diag.merge(c[3])
        out: dict[str, NodeStats] = {}
        for name, _ in self.graph.outputs:
            mean = np.concatenate(
                [np.broadcast_to(np.asarray(p[name].mean, dtype=float),
                                 c[2].shape) for p, c in zip(parts, chunks)])
            var = np.concatenate(
                [np.broadcast_to(np.asarray(p[name].var, dtype=float),
                                 c[2].shape) for p, c in zip(parts, chunks)])
            out[name] = NodeStats(mean, var)
        return out

    def evaluate(self, means: dict, sigmas: dict, pixel_ids: np.ndarray,
                 workers: int = 1,
                 diag: EvalDiagnostics | None = None) -> dict[str,
                                                              np.ndarray]:
        """Output means only (the rendered color per the smoothing model)."""
        stats = self.evaluate_stats(means, sigmas, pixel_ids, workers, diag)
        return {name: np.asarray(s.mean, dtype=float)
                for name, s in stats.items()}

    def model_runtime_ms(self, w: int, h: int) -> float:
        """Deterministic modeled render time: per-pixel units times pixel
        count. The tuner's runtime objective."""
        units = 0.0
        for node in self.graph.nodes:
            units += node_model_units(node, self.effective.get(node.id))
        return units * w * h * MODEL_MS_PER_UNIT


def evaluate_batch(p: SmoothedProgram, w: int, h: int,
                   spec: InputSpec | None = None, workers: int = 1,
                   diag: EvalDiagnostics | None = None
                   ) -> dict[str, np.ndarray]:
    """Full-image evaluation: dict of (h, w) mean buffers per output."""
    spec = spec or InputSpec()
    means, sigmas, pixel_ids = spec.grid(w, h)
    flat = p.evaluate(means, sigmas, pixel_ids, workers, diag)
    out = {}
    for name, buf in flat.items():
        arr = np.asarray(buf, dtype=float)
        if arr.ndim == 0:  # constant output
            arr = np.full(h * w, float(arr))
        out[name] = arr.reshape(h, w)
    return out


def measure_runtime(p: SmoothedProgram, w: int, h: int,
                    spec: InputSpec | None = None, runs: int = 5,
                    warmup: int = 1, workers: int = 1) -> float:
    """Median wall-clock milliseconds over `runs` renders (after warmup).
    For reports; the tuner ranks variants by model_runtime_ms instead."""
    runs = max(runs, 5)
    for _ in range(max(warmup, 1)):
        evaluate_batch(p, w, h, spec, workers)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        evaluate_batch(p, w, h, spec, workers)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# affine-correlation support

class _AffineContext:
    """Lazy direct-value pass and gradient cache for affine rho lookups.

    Gradients are taken with respect to the jittered spatial inputs at the
    pixel's unjittered position."""

    def __init__(self, g: ProgramGraph, means: dict):
        self.g = g
        self.means = means
        self._values = None
        self._grads: dict[int, dict[int, np.ndarray]] = {}
        self.wrt = [nid for name, nid in g.inputs.items()
                    if g.input_roles.get(name) == "spatial"]

    def values(self):
        if self._values is None:
            inputs = {name: self.means[name]
                      for name in self.g.inputs}
            self._values = node_values(self.g, inputs)
        return self._values

    def grad(self, target: int) -> dict[int, np.ndarray]:
        if target not in self._grads:
            self._grads[target] = gradients(self.g, self.values(), target,
                                            self.wrt)
        return self._grads[target]

    def pair_rho(self, a_id: int, b_id: int,
                 diag: EvalDiagnostics | None):
        rho, _ = rules.rho_affine(self.g, a_id, b_id,
                                  {name: self.means[name]
                                   for name in self.g.inputs},
                                  wrt=self.wrt, values=self.values(),
                                  grad_cache=self._grads, diag=diag)
        return rho

    def select_rhos(self, node: Node, diag: EvalDiagnostics | None):
        c_id, a_id, b_id = node.operands
        rho_ca = self.pair_rho(c_id, a_id, diag)
        rho_cb = self.pair_rho(c_id, b_id, diag)
        # gradients of the two branch products c*a and (1-c)*b via the
        # product rule at the evaluation point
        vals = self.values()
        gc, ga, gb = (self.grad(c_id), self.grad(a_id), self.grad(b_id))
        c, a, b = vals[c_id], vals[a_id], vals[b_id]
        num = na = nb = 0.0
        for i in self.wrt:
            g1 = c * np.asarray(ga[i], float) + a * np.asarray(gc[i], float)
            g2 = (1.0 - c) * np.asarray(gb[i], float) \
                - b * np.asarray(gc[i], float)
            num = num + g1 * g2
            na = na + g1 * g1
            nb = nb + g2 * g2
        zero = (np.asarray(na) == 0.0) | (np.asarray(nb) == 0.0)
        if diag is not None and np.any(zero):
            diag.zero_gradient_rho += int(np.count_nonzero(zero))
        with np.errstate(divide="ignore", invalid="ignore"):
            rho_mm = np.where(zero, 0.0,
                              num / np.sqrt(np.where(zero, 1.0, na * nb)))
        return rho_ca, rho_cb, np.clip(rho_mm, -1.0, 1.0)


# ---------------------------------------------------------------------------
# compilation

def _static_mod_check(g: ProgramGraph, effective: dict[int, RuleTag]):
    """Reject provably random moduli at compile time: a mod node whose
    rule requires a deterministic second operand but whose modulus subtree
    reads a jittered spatial input. Runtime checks still cover the rest
    (e.g. variance introduced by upstream rules)."""
    for node in g.nodes:
        if node.op != "mod":
            continue
        tag = effective.get(node.id)
        if tag is None or tag.kind not in ("adaptive", "compact"):
            continue
        if depends_on_spatial_input(g, node.operands[1]):
            raise ValueError(
                f"mod node {node.id}: modulus depends on a jittered "
                f"spatial input, which the '{tag.kind}' rule cannot "
                f"represent")


def train_rho_constants(g: ProgramGraph, assignment: RuleAssignment,
                        spec: InputSpec | None = None, n: int = 1024,
                        seed: int = 0) -> None:
    """Fill sampled-mode correlation constants from paired jitter samples.

    Draws n positions uniformly over the view, evaluates every subtree at
    the position and at a Gaussian-jittered position, and correlates the
    per-node differences. Differencing removes the cross-position drift so
    the constant reflects jitter-induced correlation only."""
    todo = assignment.needs_rho_training(g)
    if not todo:
        return
    spec = spec or InputSpec()
    key_x = rng.hash_key(seed, rng.STREAM_RHO_TRAIN, 1)
    key_y = rng.hash_key(seed, rng.STREAM_RHO_TRAIN, 2)
    counters = np.arange(n, dtype=np.uint64)
    base = {"x": rng.uniform(key_x, counters) * spec.ref_size,
            "y": rng.uniform(key_y, counters) * spec.ref_size,
            "t": np.full(n, spec.t_value)}
    jit = dict(base)
    for axis, ident in (("x", 3), ("y", 4)):
        z = rng.normal(rng.hash_key(seed, rng.STREAM_RHO_TRAIN, ident),
                       counters)
        jit[axis] = base[axis] + spec.sigma_px * z
    if spec.t_sigma > 0.0:
        z = rng.normal(rng.hash_key(seed, rng.STREAM_RHO_TRAIN, 5),
                       counters)
        jit["t"] = base["t"] + spec.t_sigma * z
    present = {name: base[name] for name in g.inputs}
    jitter = {name: jit[name] for name in g.inputs}
    v0 = node_values(g, present)
    v1 = node_values(g, jitter)
    delta = [np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
             if np.ndim(a) or np.ndim(b) else np.zeros(n)
             for a, b in zip(v0, v1)]

    def d(nid):
        arr = np.asarray(delta[nid], dtype=float)
        return np.broadcast_to(arr, (n,)) if arr.ndim == 0 else arr

    for nid in todo:
        node = g.node(nid)
        if node.op == "select":
            c_id, a_id, b_id = node.operands
            c0, a0, b0 = (np.asarray(v0[i], float) for i in node.operands)
            c1, a1, b1 = (np.asarray(v1[i], float) for i in node.operands)
            m1 = c1 * a1 - c0 * a0
            m2 = (1.0 - c1) * b1 - (1.0 - c0) * b0
            assignment.rho_constants[nid] = (
                rules.rho_sampled(d(c_id), d(a_id)),
                rules.rho_sampled(d(c_id), d(b_id)),
                rules.rho_sampled(np.broadcast_to(m1, (n,)),
                                  np.broadcast_to(m2, (n,))))
        else:
            a_id, b_id = node.operands
            assignment.rho_constants[nid] = rules.rho_sampled(d(a_id),
                                                              d(b_id))


def compile_program(g: ProgramGraph, assignment: RuleAssignment,
                    sigma_scales: dict[int, float] | None = None,
                    seed: int = 0, bessel: bool = False,
                    train_spec: InputSpec | None = None,
                    train_seed: int | None = None) -> SmoothedProgram:
    """Validate the assignment, resolve fallbacks and rho constants, and
    build the evaluable program."""
    assignment.validate(g)
    effective: dict[int, RuleTag] = {}
    substitutions = []
    for node in g.nodes:
        if node.op == "input":
            continue
        tag = assignment.tags[node.id]
        resolved, reason = rules.effective_tag(node.op, node.power, tag)
        effective[node.id] = resolved
        if reason is not None:
            substitutions.append((node.id, tag.kind, reason))
    _static_mod_check(g, effective)
    if assignment.needs_rho_training(g):
        train_rho_constants(g, assignment, train_spec,
                            seed=train_seed if train_seed is not None
                            else seed)
    p = SmoothedProgram(graph=g, assignment=assignment, effective=effective,
                        sigma_scales=dict(sigma_scales or {}), seed=seed,
                        bessel=bessel, substitutions=substitutions)
    for nid, s in p.sigma_scales.items():
        if not s > 0.0:
            raise ValueError(f"sigma scale for node {nid} must be positive")
    return p


def all_rule_assignment(g: ProgramGraph, kind: str, n: int = 8,
                        rho_mode: str = "affine",
                        kernel: str = "box") -> RuleAssignment:
    """Uniform assignment helper: one rule kind on every compute node."""
    tags: dict[int, RuleTag] = {}
    for node in g.nodes:
        if node.op == "input":
            continue
        if kind == "mc":
            tags[node.id] = RuleTag("mc", n=n)
        elif kind == "compact":
            tags[node.id] = RuleTag("compact", kernel=kernel)
        elif kind == "adaptive":
            mode = rho_mode if (node.op in rules.RHO_OPS
                                or node.op == "select") else None
            tags[node.id] = RuleTag("adaptive", rho_mode=mode)
        else:
            tags[node.id] = RuleTag(kind)
    return RuleAssignment(tags)
