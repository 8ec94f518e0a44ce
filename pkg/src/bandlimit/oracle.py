"""Independent reference computations the closed forms are tested against.

Nothing here shares code with the kernels catalogue: smoothing is done by
adaptive numerical quadrature of the defining convolution, moments by brute
force sampling, and image ground truth by high-rate jittered supersampling
of the direct program. The truncated Taylor expansion is a deliberately
flawed diagnostic kept for comparison plots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtri

from . import rng
from .autodiff import direct_outputs
from .ir import ProgramGraph
from .kernels import SQRT3, SQRT6, forms

GAUSS_TRUNC = 8.0  # integrate the Gaussian kernel over +- 8 sigma
ABS_TOL = 1e-9

# At or below 32 samples the jitter must stay the per-sample iid stream the
# Monte Carlo rule consumes, so low-spp supersampling and all-mc(n) programs
# stay bit-identical. Above that range nothing shares the stream, and the
# jitter switches to a Latin-hypercube stratification of the same Gaussian:
# each input's spp strata are visited once per pixel in keyed-permuted
# order, which keeps exact Gaussian coverage while cutting the residual
# noise of high-rate references well below the iid rate.
STRATIFIED_MIN_SPP = 33


def _integrate(fn: Callable, lo: float, hi: float,
               breakpoints: Sequence[float] = ()) -> float:
    pts = sorted(p for p in breakpoints if lo < p < hi)
    if len(pts) > 80:  # QUADPACK's subdivision budget; thin evenly
        step = len(pts) / 80.0
        pts = [pts[int(i * step)] for i in range(80)]
    val, _ = quad(fn, lo, hi, points=pts or None,
                  limit=max(200, 4 * len(pts) + 50),
                  epsabs=ABS_TOL * 1e-2, epsrel=1e-11)
    return val


def _integer_breakpoints(lo: float, hi: float) -> list[float]:
    return [float(k) for k in range(math.ceil(lo), math.floor(hi) + 1)]


def quadrature_smooth(f: Callable, kernel: str, x: float, sigma: float,
                      want_square: bool = False,
                      breakpoints: Sequence[float] = ()) -> float:
    """E[f(X)] (or E[f^2]) for X kernel-distributed around x, by adaptive
    quadrature of the convolution integral."""
    x = float(x)
    sigma = float(sigma)
    g = (lambda u: float(f(u)) ** 2) if want_square else (lambda u: float(f(u)))
    if sigma == 0.0:
        return g(x)
    if kernel == "gaussian":
        lo, hi = x - GAUSS_TRUNC * sigma, x + GAUSS_TRUNC * sigma
        norm = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)

        def integrand(u):
            return g(u) * norm * math.exp(-(u - x) ** 2 / (2.0 * sigma ** 2))

        return _integrate(integrand, lo, hi, breakpoints)
    if kernel == "box":
        h = SQRT3 * sigma
        return _integrate(g, x - h, x + h, breakpoints) / (2.0 * h)
    if kernel == "tent":
        s = SQRT6 * sigma

        def integrand(u):
            return g(u) * (s - abs(u - x)) / (s * s)

        return _integrate(integrand, x - s, x + s,
                          list(breakpoints) + [x])
    raise ValueError(f"unknown kernel '{kernel}'")


def quadrature_atomic(op: str, kernel: str, x: float, sigma: float,
                      want_square: bool = False,
                      power: int | None = None) -> float:
    """quadrature_smooth specialized to a catalogue op, with discontinuity
    breakpoints supplied automatically."""
    fo = forms(op, power)
    if kernel == "gaussian":
        lo, hi = x - GAUSS_TRUNC * sigma, x + GAUSS_TRUNC * sigma
    else:
        h = (SQRT3 if kernel == "box" else SQRT6) * sigma
        lo, hi = x - h, x + h
    pts: list[float] = []
    if fo.integer_breakpoints:
        pts = _integer_breakpoints(lo, hi)
    elif op == "heaviside":
        pts = [0.0]
    return quadrature_smooth(fo.f, kernel, x, sigma, want_square, pts)


# ---------------------------------------------------------------------------
# brute-force moments

@dataclass
class MomentEstimate:
    mean: float
    var: float
    se_mean: float
    se_var: float

    def within(self, mean: float, var: float, k: float = 3.0) -> bool:
        """True when the analytic (mean, var) lie inside k standard errors."""
        return (abs(mean - self.mean) <= k * self.se_mean
                and abs(var - self.var) <= k * self.se_var)


def _sample_dist(dist: tuple, n: int, gen: np.random.Generator,
                 base: np.ndarray | None = None) -> np.ndarray:
    """dist is ('normal', mu, sigma) | ('uniform', lo, hi) |
    ('box', mu, sigma) -- box meaning the uniform with that std dev."""
    kind = dist[0]
    if kind == "normal":
        _, mu, sigma = dist
        z = base if base is not None else gen.standard_normal(n)
        return mu + sigma * z
    if kind == "uniform":
        _, lo, hi = dist
        return gen.uniform(lo, hi, n)
    if kind == "box":
        _, mu, sigma = dist
        h = SQRT3 * sigma
        return gen.uniform(mu - h, mu + h, n)
    raise ValueError(f"unknown distribution {dist!r}")


def brute_moments(f: Callable, dists: Sequence[tuple], rho: float = 0.0,
                  n: int = 1_000_000, seed: int = 0) -> MomentEstimate:
    """Monte Carlo moments of f(X1, ..., Xk) with independent inputs, except
    that a nonzero rho correlates the first two inputs (both must be
    normal; a Gaussian pair with that correlation is used)."""
    gen = np.random.default_rng(seed)
    samples = []
    if rho != 0.0:
        if len(dists) < 2 or dists[0][0] != "normal" or dists[1][0] != "normal":
            raise ValueError("rho requires two leading normal inputs")
        za = gen.standard_normal(n)
        zb = rho * za + math.sqrt(max(1.0 - rho * rho, 0.0)) \
            * gen.standard_normal(n)
        samples.append(_sample_dist(dists[0], n, gen, base=za))
        samples.append(_sample_dist(dists[1], n, gen, base=zb))
        rest = dists[2:]
    else:
        rest = dists
    for d in rest:
        samples.append(_sample_dist(d, n, gen))
    y = np.asarray(f(*samples), dtype=float)
    mean = float(np.mean(y))
    centered = y - mean
    var = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    se_mean = math.sqrt(var / n)
    se_var = math.sqrt(max(m4 - var * var, 0.0) / n)
    return MomentEstimate(mean, var, se_mean, se_var)


# ---------------------------------------------------------------------------
# supersampling ground truth

def supersample_outputs(g: ProgramGraph, input_means: dict[str, np.ndarray],
                        input_sigmas: dict[str, float],
                        pixel_ids: np.ndarray, spp: int,
                        seed: int = 0) -> dict[str, np.ndarray]:
    """Average of direct evaluations under Gaussian input jitter.

    For spp below STRATIFIED_MIN_SPP, jitter for input v at pixel p, sample
    s is keyed by (seed, input node id of v, p, s): the exact stream the
    Monte Carlo rule uses for inputs, which is what makes an all-MC(n)
    program bit-identical to n-sample supersampling at the same master
    seed. Higher rates stratify the same stream (see STRATIFIED_MIN_SPP).
    """
    acc: dict[str, np.ndarray] = {}
    for s in range(spp):
        jittered: dict[str, np.ndarray] = {}
        for name, mu in input_means.items():
            if name not in g.inputs:  # grid always offers x, y, t
                continue
            sig = input_sigmas.get(name, 0.0)
            mu = np.asarray(mu, dtype=float)
            if sig > 0.0:
                z = _jitter_normals(seed, g.inputs[name], pixel_ids, s, spp)
                jittered[name] = mu + sig * z.reshape(mu.shape)
            else:
                jittered[name] = mu
        outs = direct_outputs(g, jittered)
        for name, val in outs.items():
            val = np.asarray(val, dtype=float)
            acc[name] = acc.get(name, 0.0) + val
    return {name: val / spp for name, val in acc.items()}


def _jitter_normals(seed: int, ident: int, pixel_ids: np.ndarray, s: int,
                    spp: int) -> np.ndarray:
    if spp < STRATIFIED_MIN_SPP:
        return rng.normal_grid(seed, rng.STREAM_INPUT_JITTER, ident,
                               pixel_ids, s)
    u = rng.uniform(rng.hash_key(seed, rng.STREAM_INPUT_JITTER, ident, s),
                    pixel_ids.astype(np.uint64))
    stratum = rng.permuted_index(
        rng.hash_key(seed, rng.STREAM_STRATA, ident), spp, s, pixel_ids)
    # u stays strictly inside (0, 1), so the quantile is always finite
    return ndtri((stratum.astype(np.float64) + u) / spp)


# ---------------------------------------------------------------------------
# truncated Taylor diagnostic

def taylor_truncated(derivatives: Sequence[Callable], x, sigma,
                     terms: int = 2):
    """Gaussian smoothing approximated by the even-derivative series
    sum_k sigma^(2k) / (k! 2^k) f^(2k)(x), truncated to `terms` terms.

    `derivatives[k]` must evaluate the (2k)-th derivative. This estimate
    does not actually bandlimit; it exists to be compared against."""
    if terms < 1:
        raise ValueError("need at least one term")
    if len(derivatives) < terms:
        raise ValueError(f"{terms} terms need {terms} derivative callables")
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    total = np.zeros(np.broadcast(x, sigma).shape)
    for k in range(terms):
        total = total + sigma ** (2 * k) / (math.factorial(k) * 2.0 ** k) \
            * np.asarray(derivatives[k](x), dtype=float)
    return total
