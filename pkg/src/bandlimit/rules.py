"""Per-node approximation rules.

Each compute node of a program graph carries a rule tag that says how its
output statistics are produced from its operand statistics:

  dorn      table means, heuristic standard deviations
  adaptive  closed-form Gaussian means and variances, correlation-aware
  mc        sampled estimators with a fixed per-node sample count
  compact   box or tent kernel with truncation near singularities
  none      exact evaluation of the original op on operand means

All propagation is vectorized: NodeStats fields are scalars or arrays over
a pixel batch. Everything here is pure given (stats, tag, seed); sampling
uses counter-based streams so results are independent of batch partitioning.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from . import rng
from .autodiff import gradients, node_values, op_value
from .ir import COMPARISON_OPS, UNARY_OPS, ProgramGraph
from .kernels import (SQRT3, box_interval, forms, gaussian_mean_square,
                      has_gaussian, has_tent, kernel_halfwidth,
                      singularity_distance, tent_interval)

RULE_KINDS = ("dorn", "adaptive", "mc", "compact", "none")
MC_SAMPLE_COUNTS = (2, 4, 8, 16, 32)
RHO_MODES = ("zero", "sampled", "affine")
COMPACT_KERNELS = ("box", "tent")

# fraction of the distance to the nearest singularity the kernel may span
LAMBDA_MARGIN = 0.5

# binary ops whose propagation consumes a correlation coefficient
RHO_OPS = frozenset({"add", "sub", "mul", "div"}) | COMPARISON_OPS
SINGULAR_UNARY = frozenset({"recip", "sqrt", "log", "tan"})


@dataclass
class NodeStats:
    """Mean and variance of one node's output over the pixel batch."""
    mean: np.ndarray | float
    var: np.ndarray | float

    def sigma(self):
        return np.sqrt(self.var)


class RuleError(ValueError):
    """A rule was asked to do something its preconditions forbid."""


@dataclass(frozen=True)
class RuleTag:
    kind: str
    n: int | None = None          # mc only
    rho_mode: str | None = None   # adaptive only, ops in RHO_OPS / select
    kernel: str | None = None     # compact only

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind '{self.kind}'")
        if self.kind == "mc":
            if self.n not in MC_SAMPLE_COUNTS:
                raise ValueError(f"mc sample count must be one of "
                                 f"{MC_SAMPLE_COUNTS}, got {self.n}")
        elif self.n is not None:
            raise ValueError("sample count is only meaningful for mc")
        if self.kind == "compact":
            if self.kernel not in COMPACT_KERNELS:
                raise ValueError(f"compact kernel must be one of "
                                 f"{COMPACT_KERNELS}, got {self.kernel}")
        elif self.kernel is not None:
            raise ValueError("kernel is only meaningful for compact")
        if self.rho_mode is not None:
            if self.kind != "adaptive":
                raise ValueError("rho mode is only meaningful for adaptive")
            if self.rho_mode not in RHO_MODES:
                raise ValueError(f"unknown rho mode '{self.rho_mode}'")


@dataclass
class RuleAssignment:
    """Complete rule choice for a graph: one tag per non-input node.

    rho_constants holds trained correlation coefficients for nodes whose
    tag is adaptive/sampled; select nodes store a triple (c-a, c-b,
    branch-branch)."""
    tags: dict[int, RuleTag]
    rho_constants: dict[int, float | tuple[float, float, float]] = \
        field(default_factory=dict)

    def validate(self, g: ProgramGraph) -> None:
        for node in g.nodes:
            if node.op == "input":
                continue
            tag = self.tags.get(node.id)
            if tag is None:
                raise ValueError(f"node {node.id} ({node.op}) has no rule")
            if tag.rho_mode is not None and node.op not in RHO_OPS \
                    and node.op != "select":
                raise ValueError(f"node {node.id} ({node.op}) cannot carry "
                                 f"a rho mode")
        for nid, rho in self.rho_constants.items():
            vals = rho if isinstance(rho, tuple) else (rho,)
            if any(not -1.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"rho constant out of [-1,1] at node {nid}")

    def needs_rho_training(self, g: ProgramGraph) -> list[int]:
        out = []
        for node in g.nodes:
            tag = self.tags.get(node.id)
            if tag is not None and tag.rho_mode == "sampled" \
                    and node.id not in self.rho_constants \
                    and (node.op in RHO_OPS or node.op == "select"):
                out.append(node.id)
        return out

    def to_json(self) -> str:
        blob = {}
        for nid, tag in sorted(self.tags.items()):
            entry: dict = {"kind": tag.kind}
            if tag.n is not None:
                entry["n"] = tag.n
            if tag.rho_mode is not None:
                entry["rho_mode"] = tag.rho_mode
            if tag.kernel is not None:
                entry["kernel"] = tag.kernel
            if nid in self.rho_constants:
                rho = self.rho_constants[nid]
                entry["rho_const"] = list(rho) if isinstance(rho, tuple) \
                    else rho
            blob[str(nid)] = entry
        return json.dumps(blob, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RuleAssignment":
        blob = json.loads(text)
        tags: dict[int, RuleTag] = {}
        consts: dict[int, float | tuple] = {}
        for key, entry in blob.items():
            nid = int(key)
            tags[nid] = RuleTag(kind=entry["kind"], n=entry.get("n"),
                                rho_mode=entry.get("rho_mode"),
                                kernel=entry.get("kernel"))
            if "rho_const" in entry:
                rho = entry["rho_const"]
                consts[nid] = tuple(rho) if isinstance(rho, list) \
                    else float(rho)
        return cls(tags, consts)


@dataclass(frozen=True)
class TruncationInfo:
    """Distance to the nearest undefined point, and the safety fraction."""
    r: np.ndarray | float
    lam: float = LAMBDA_MARGIN

    def effective_halfwidth(self, h):
        return np.minimum(h, self.lam * self.r)


@dataclass
class EvalDiagnostics:
    """Counters surfaced alongside evaluation results."""
    variance_clamps: int = 0
    nonfinite_values: int = 0
    zero_gradient_rho: int = 0
    substitutions: list = field(default_factory=list)

    def merge(self, other: "EvalDiagnostics") -> None:
        self.variance_clamps += other.variance_clamps
        self.nonfinite_values += other.nonfinite_values
        self.zero_gradient_rho += other.zero_gradient_rho
        self.substitutions.extend(other.substitutions)


def _finish(mean, var, diag: EvalDiagnostics | None) -> NodeStats:
    """Clamp variance at zero (counting events) and box up the stats."""
    var = np.asarray(var, dtype=float)
    neg = var < 0.0
    if np.any(neg):
        if diag is not None:
            diag.variance_clamps += int(np.count_nonzero(neg))
        var = np.where(neg, 0.0, var)
    return NodeStats(np.asarray(mean, dtype=float), var)


# ---------------------------------------------------------------------------
# dorn baseline

def _dorn_sigma(op: str, stats: Sequence[NodeStats]):
    """Dorn's standard-deviation heuristics. Multiplication or division by
    a deterministic operand scales sigma by the operand's magnitude; the
    zero-sigma test generalizes the literal-constant case."""
    sigs = [s.sigma() for s in stats]
    if op == "add" or op == "sub":
        return sigs[0] + sigs[1]
    if op == "mul":
        sa, sb = sigs
        ma = np.abs(np.asarray(stats[0].mean, dtype=float))
        mb = np.abs(np.asarray(stats[1].mean, dtype=float))
        return np.where(sa == 0.0, ma * sb,
                        np.where(sb == 0.0, mb * sa, sa * sb))
    if op == "div":
        sa, sb = sigs
        mb = np.abs(np.asarray(stats[1].mean, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(sb == 0.0, sa / mb, sa / sb)
    if op in COMPARISON_OPS:
        # difference node then step function: sum rule, then pass-through
        return sigs[0] + sigs[1]
    # all other ops: average of the non-zero input sigmas
    total = sum(sigs)
    count = sum((s > 0.0).astype(float) if isinstance(s, np.ndarray)
                else float(s > 0.0) for s in sigs)
    count = np.asarray(count, dtype=float)
    return np.where(count > 0.0, total / np.maximum(count, 1.0), 0.0)


def _gaussian_mean_only(op, mu, sigma, power):
    """Table mean under the Gaussian kernel with per-pixel sigma=0 pixels
    evaluated exactly (the closed forms can 0/0 there)."""
    exact = op_value(op, [mu], power)
    fo = forms(op, power)
    with np.errstate(all="ignore"):
        smoothed = fo.g_mean(mu, np.where(sigma == 0.0, 1.0, sigma))
    return np.where(sigma == 0.0, exact, smoothed)


def effective_tag(op: str, power: int | None,
                  tag: RuleTag) -> tuple[RuleTag, str | None]:
    """Resolve table gaps before evaluation: a rule that would need a
    missing closed form degrades to the compact box kernel for that node.
    Returns the tag to execute and a reason string when a substitution
    happened (None otherwise). Purely static in (op, power, tag)."""
    if op not in UNARY_OPS or op == "neg":
        return tag, None
    if tag.kind == "dorn" and not has_gaussian(op, power, want_square=False):
        return (RuleTag("compact", kernel="box"),
                f"dorn: no Gaussian mean for '{op}'")
    if tag.kind == "adaptive" and not has_gaussian(op, power,
                                                   want_square=True):
        return (RuleTag("compact", kernel="box"),
                f"adaptive: no Gaussian closed form for '{op}'")
    if tag.kind == "compact" and tag.kernel == "tent" and \
            not has_tent(op, power):
        return (RuleTag("compact", kernel="box"),
                f"tent: no second antiderivative for '{op}'")
    return tag, None


def propagate_dorn(op: str, stats: Sequence[NodeStats],
                   power: int | None = None,
                   diag: EvalDiagnostics | None = None) -> NodeStats:
    """Baseline rule: table means where closed forms exist, arithmetic on
    means for binary ops, heuristic sigma propagation. Unary ops without a
    Gaussian mean are resolved to compact-box before this is called."""
    if op == "neg":
        return _finish(-np.asarray(stats[0].mean, float), stats[0].var, diag)
    sigma_out = _dorn_sigma(op, stats)
    mu = [np.asarray(s.mean, dtype=float) for s in stats]
    if op in COMPARISON_OPS:
        diff = mu[0] - mu[1]
        if op in ("cmp_lt", "cmp_le"):
            diff = -diff
        d = NodeStats(diff, (stats[0].sigma() + stats[1].sigma()) ** 2)
        mean = _step_mean_gaussian(d)
    elif len(stats) == 1:
        if not has_gaussian(op, power, want_square=False):
            raise RuleError(f"dorn has no Gaussian mean for '{op}'")
        mean = _gaussian_mean_only(op, mu[0], stats[0].sigma(), power)
    else:
        mean = op_value(op, mu, power)
    return _finish(mean, sigma_out ** 2, diag)


def propagate_none(op: str, stats: Sequence[NodeStats],
                   power: int | None = None,
                   diag: EvalDiagnostics | None = None) -> NodeStats:
    """Exact nodal evaluation on operand means. Sigma still propagates (by
    Dorn's heuristics) so downstream rules keep their kernel widths; an
    all-none program reproduces direct evaluation exactly."""
    mu = [np.asarray(s.mean, dtype=float) for s in stats]
    mean = op_value(op, mu, power)
    if op == "neg":
        return _finish(mean, stats[0].var, diag)
    return _finish(mean, _dorn_sigma(op, stats) ** 2, diag)


# ---------------------------------------------------------------------------
# adaptive Gaussian rule

def propagate_adaptive_unary(op: str, stats: NodeStats,
                             power: int | None = None,
                             diag: EvalDiagnostics | None = None
                             ) -> NodeStats:
    """Closed-form Gaussian mean and variance. Caller guarantees the op has
    both table entries (otherwise it resolves the node to compact-box)."""
    if op == "neg":
        return _finish(-np.asarray(stats.mean, float), stats.var, diag)
    mu = np.asarray(stats.mean, dtype=float)
    sigma = stats.sigma()
    exact = op_value(op, [mu], power)
    with np.errstate(all="ignore"):
        safe = np.where(sigma == 0.0, 1.0, sigma)
        mean, square = gaussian_mean_square(op, mu, safe, power)
    mean = np.where(sigma == 0.0, exact, mean)
    square = np.where(sigma == 0.0, exact * exact, square)
    return _finish(mean, square - mean * mean, diag)


def propagate_adaptive_binary(op: str, a: NodeStats, b: NodeStats, rho,
                              diag: EvalDiagnostics | None = None
                              ) -> NodeStats:
    """Moments of a+b, a-b, a*b for jointly Gaussian operands with
    correlation rho. These are exact bivariate-normal identities."""
    rho = np.clip(np.asarray(rho, dtype=float), -1.0, 1.0)
    ma, mb = np.asarray(a.mean, float), np.asarray(b.mean, float)
    va, vb = np.asarray(a.var, float), np.asarray(b.var, float)
    sa, sb = np.sqrt(va), np.sqrt(vb)
    if op == "add":
        return _finish(ma + mb, va + vb + 2.0 * rho * sa * sb, diag)
    if op == "sub":
        return _finish(ma - mb, va + vb - 2.0 * rho * sa * sb, diag)
    if op == "mul":
        mean = ma * mb + rho * sa * sb
        var = (ma * ma * vb + va * mb * mb
               + 2.0 * rho * ma * mb * sa * sb
               + va * vb * (1.0 + rho * rho))
        return _finish(mean, var, diag)
    raise RuleError(f"'{op}' is not a direct Eq-style binary op")


def propagate_div(a: NodeStats, b: NodeStats, rho,
                  diag: EvalDiagnostics | None = None) -> NodeStats:
    """a/b as a * reciprocal(b). The reciprocal is smoothed with a box
    kernel whose half-width keeps a margin from the pole at zero; the
    product then runs through the bivariate moments with the correlation
    sign flipped (1/b moves against b)."""
    mb = np.asarray(b.mean, dtype=float)
    sb = b.sigma()
    if np.any((mb == 0.0) & (np.asarray(sb) == 0.0)):
        raise RuleError("division by a deterministic zero")
    w = np.minimum(SQRT3 * sb, LAMBDA_MARGIN * np.abs(mb))
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_r, square_r = box_interval("recip", mb - w, mb + w)
    recip = _finish(mean_r, square_r - mean_r * mean_r, diag)
    return propagate_adaptive_binary("mul", a, recip,
                                     -np.asarray(rho, dtype=float), diag)


def propagate_mod(a: NodeStats, b: NodeStats,
                  diag: EvalDiagnostics | None = None) -> NodeStats:
    """mod(a, b) = b * fract(a/b) with a deterministic modulus. fract is
    smoothed with the guarded box kernel in the rescaled coordinate."""
    vb = np.asarray(b.var, dtype=float)
    if np.any(vb != 0.0):
        raise RuleError("mod requires a deterministic modulus")
    mb = np.asarray(b.mean, dtype=float)
    if np.any(mb == 0.0):
        raise RuleError("mod by zero")
    u = np.asarray(a.mean, dtype=float) / mb
    su = a.sigma() / np.abs(mb)
    lo, hi, _ = fract_discontinuity_guard(u, su)
    mean_f, square_f = box_interval("fract", lo, hi)
    mean = mb * mean_f
    var = mb * mb * (square_f - mean_f * mean_f)
    return _finish(mean, var, diag)


def _step_mean_gaussian(d: NodeStats):
    """Gaussian-smoothed Heaviside of a difference node; exact step (with
    H(0) = 0) where the difference is deterministic."""
    mu = np.asarray(d.mean, dtype=float)
    sigma = d.sigma()
    with np.errstate(all="ignore"):
        safe = np.where(sigma == 0.0, 1.0, sigma)
        p = 0.5 * (1.0 + erf(mu / (math.sqrt(2.0) * safe)))
    return np.where(sigma == 0.0, (mu > 0.0).astype(float), p)


def propagate_comparison(op: str, a: NodeStats, b: NodeStats, rho,
                         hat: str = "gaussian",
                         diag: EvalDiagnostics | None = None) -> NodeStats:
    """Comparisons as a smoothed step of the difference: > and >= give
    H(a-b), < and <= give H(b-a) (the boundary has measure zero). The
    output is Bernoulli-like, so its variance is p(1-p)."""
    if op not in COMPARISON_OPS:
        raise RuleError(f"'{op}' is not a comparison")
    d = propagate_adaptive_binary("sub", a, b, rho, diag)
    if op in ("cmp_lt", "cmp_le"):
        d = NodeStats(-np.asarray(d.mean, float), d.var)
    if hat == "gaussian":
        p = _step_mean_gaussian(d)
    elif hat in COMPACT_KERNELS:
        mu = np.asarray(d.mean, dtype=float)
        h = kernel_halfwidth(hat, d.sigma())
        if hat == "box":
            p, _ = box_interval("heaviside", mu - h, mu + h)
        else:
            p, _ = tent_interval("heaviside", mu, h)
    else:
        raise RuleError(f"unknown step smoothing '{hat}'")
    return _finish(p, p - p * p, diag)


def propagate_select(c: NodeStats, a: NodeStats, b: NodeStats,
                     rhos=(0.0, 0.0, 0.0),
                     diag: EvalDiagnostics | None = None) -> NodeStats:
    """select(c, a, b) = c*a + (1-c)*b, propagated through the bivariate
    moment rules. rhos = (rho(c,a), rho(c,b), rho(c*a, (1-c)*b))."""
    rho_ca, rho_cb, rho_mm = rhos
    m1 = propagate_adaptive_binary("mul", c, a, rho_ca, diag)
    inv_c = NodeStats(1.0 - np.asarray(c.mean, dtype=float), c.var)
    # corr(1-c, b) = -corr(c, b)
    m2 = propagate_adaptive_binary("mul", inv_c, b,
                                   -np.asarray(rho_cb, dtype=float), diag)
    return propagate_adaptive_binary("add", m1, m2, rho_mm, diag)


# ---------------------------------------------------------------------------
# compact kernels

def fract_discontinuity_guard(mean, sigma):
    """Box support for smoothing fract, truncated one-sidedly when it
    contains exactly one integer (one jump): the support is cut at the
    integer, keeping the side holding the mean. Zero integers need no cut;
    two or more span at least a full period and are left alone.

    Returns (lo, hi, truncated-mask)."""
    mu = np.asarray(mean, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    h = SQRT3 * sigma
    lo, hi = mu - h, mu + h
    k0 = np.ceil(lo)
    count = np.floor(hi) - k0 + 1.0
    one = count == 1.0
    above = mu >= k0
    lo = np.where(one & above, k0, lo)
    hi = np.where(one & ~above, k0, hi)
    return lo, hi, one


def propagate_compact(op: str, stats: NodeStats, kernel: str,
                      power: int | None = None,
                      trunc: TruncationInfo | None = None,
                      diag: EvalDiagnostics | None = None) -> NodeStats:
    """Unary smoothing with a finite-support kernel. The half-width is
    shrunk to min(h, lambda*r) near undefined points; fract additionally
    gets the single-discontinuity guard (box form)."""
    if op == "neg":
        return _finish(-np.asarray(stats.mean, float), stats.var, diag)
    mu = np.asarray(stats.mean, dtype=float)
    sigma = stats.sigma()
    h = kernel_halfwidth(kernel, sigma)
    if trunc is None:
        trunc = TruncationInfo(singularity_distance(op, mu, power))
    h = trunc.effective_halfwidth(h)
    if op == "fract" and kernel == "box":
        lo, hi, _ = fract_discontinuity_guard(mu, sigma)
        mean, square = box_interval(op, lo, hi, power)
    elif kernel == "box":
        mean, square = box_interval(op, mu - h, mu + h, power)
    else:
        mean, square = tent_interval(op, mu, h, power)
    return _finish(mean, square - mean * mean, diag)


# ---------------------------------------------------------------------------
# Monte Carlo rule

def draw_samples(stats: NodeStats, ident: int, pixel_ids: np.ndarray,
                 n: int, seed: int,
                 stream: int = rng.STREAM_NODE_JITTER) -> np.ndarray:
    """(n, npix) Gaussian samples of a node's distribution, keyed by
    (seed, stream, ident, pixel, sample index)."""
    mu = np.asarray(stats.mean, dtype=float)
    sigma = stats.sigma()
    rows = []
    for s in range(n):
        z = rng.normal_grid(seed, stream, ident, pixel_ids, s)
        rows.append(mu + sigma * z)
    return np.stack(rows)


def repair_samples(op: str, operand_index: int, samples: np.ndarray,
                   operand_mean, power: int | None = None) -> np.ndarray:
    """Replace samples at which the consuming op is undefined with their
    projection onto the margin-truncated kernel support; all other samples
    pass through untouched, so an all-mc program stays bit-identical to
    supersampling wherever direct evaluation is finite."""
    mu = np.asarray(operand_mean, dtype=float)
    if operand_index == 0 and op in SINGULAR_UNARY:
        with np.errstate(all="ignore"):
            bad = ~np.isfinite(op_value(op, [samples], power))
        if not np.any(bad):
            return samples
        w = LAMBDA_MARGIN * singularity_distance(op, mu, power)
    elif operand_index == 1 and op in ("div", "mod"):
        bad = samples == 0.0
        if not np.any(bad):
            return samples
        w = LAMBDA_MARGIN * np.abs(mu)
    else:
        return samples
    return np.where(bad, np.clip(samples, mu - w, mu + w), samples)


def mc_summarize(samples: np.ndarray, bessel: bool = False,
                 diag: EvalDiagnostics | None = None) -> NodeStats:
    """Sample mean and variance over axis 0. The mean accumulates in
    sample order so an all-mc program is bit-identical to averaging n
    direct supersampled evaluations. Variance is the maximum-likelihood
    estimator unless bessel is set."""
    n = samples.shape[0]
    if n < 2:
        raise RuleError("mc needs at least 2 samples")
    acc = samples[0]
    for i in range(1, n):
        acc = acc + samples[i]
    mean = acc / n
    dev = samples[0] - mean
    vacc = dev * dev
    for i in range(1, n):
        dev = samples[i] - mean
        vacc = vacc + dev * dev
    var = vacc / (n - 1 if bessel else n)
    return _finish(mean, var, diag)


def mc_node(op: str, operand_samples: Sequence[np.ndarray],
            power: int | None = None) -> np.ndarray:
    """Apply the op elementwise across the (n, npix) sample blocks."""
    return op_value(op, list(operand_samples), power)


# ---------------------------------------------------------------------------
# correlation estimators

def rho_zero() -> float:
    return 0.0


def rho_sampled(a_samples, b_samples) -> float:
    """Pearson correlation of paired samples; degenerate (constant) sample
    vectors give 0."""
    a = np.asarray(a_samples, dtype=float).ravel()
    b = np.asarray(b_samples, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("need matching paired sample vectors, n >= 2")
    ca, cb = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(ca, ca)) * float(np.dot(cb, cb)))
    if denom == 0.0:
        return 0.0
    return float(np.clip(float(np.dot(ca, cb)) / denom, -1.0, 1.0))


def rho_affine(g: ProgramGraph, a_id: int, b_id: int,
               inputs: dict[str, np.ndarray],
               wrt: Sequence[int] | None = None,
               values: list | None = None,
               grad_cache: dict | None = None,
               diag: EvalDiagnostics | None = None):
    """Correlation from the local linearization: normalized dot product of
    the two subtrees' gradients with respect to the jittered (spatial)
    inputs. Zero-norm gradients yield rho 0 (flagged in diagnostics).

    Returns (rho, zero-mask); rho is per-pixel when inputs are arrays."""
    if wrt is None:
        wrt = [nid for name, nid in g.inputs.items()
               if g.input_roles.get(name) == "spatial"]
    wrt = list(wrt)
    if not wrt:
        return 0.0, np.asarray(True)
    if values is None:
        values = node_values(g, inputs)

    def grads(target):
        if grad_cache is not None and target in grad_cache:
            return grad_cache[target]
        out = gradients(g, values, target, wrt)
        if grad_cache is not None:
            grad_cache[target] = out
        return out

    ga, gb = grads(a_id), grads(b_id)
    num = sum(np.asarray(ga[i], float) * np.asarray(gb[i], float)
              for i in wrt)
    na = sum(np.asarray(ga[i], float) ** 2 for i in wrt)
    nb = sum(np.asarray(gb[i], float) ** 2 for i in wrt)
    zero = (na == 0.0) | (nb == 0.0)
    if diag is not None and np.any(zero):
        diag.zero_gradient_rho += int(np.count_nonzero(zero))
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(zero, 0.0, num / np.sqrt(np.where(zero, 1.0,
                                                         na * nb)))
    return np.clip(rho, -1.0, 1.0), zero


__all__ = [
    "NodeStats", "RuleTag", "RuleAssignment", "TruncationInfo",
    "EvalDiagnostics", "RuleError", "RULE_KINDS", "MC_SAMPLE_COUNTS",
    "RHO_MODES", "COMPACT_KERNELS", "RHO_OPS", "LAMBDA_MARGIN",
    "propagate_dorn", "propagate_none", "propagate_adaptive_unary",
    "propagate_adaptive_binary", "propagate_div", "propagate_mod",
    "propagate_comparison", "propagate_select", "propagate_compact",
    "fract_discontinuity_guard", "draw_samples", "repair_samples",
    "mc_summarize", "mc_node", "rho_zero", "rho_sampled",
    "rho_affine", "effective_tag",
]
