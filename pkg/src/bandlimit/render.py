"""Shader gallery, image metrics, MSAA baselines, and plot emission.

Image buffer convention: (h, w, 3) float64 arrays holding sRGB-encoded
values in [0, 1], row 0 at the top. Evaluation and supersampling happen in
linear space; buffers are converted and clamped when they become images,
and all error math runs on the float buffers before any quantization.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .compile import InputSpec, SmoothedProgram, all_rule_assignment, \
    compile_program, evaluate_batch
from .ir import ProgramGraph, parse_program, to_source
from .oracle import supersample_outputs

MSAA_SAMPLE_COUNTS = (2, 4, 8, 16, 32)
GROUND_TRUTH_SPP = 1000


# ---------------------------------------------------------------------------
# shader gallery

@dataclass(frozen=True)
class Shader:
    """A named 3-channel procedural pattern over the fixed 256-unit view."""
    name: str
    graph: ProgramGraph
    animated: bool = False
    tiled: bool = False

    def __post_init__(self):
        if len(self.graph.outputs) != 3:
            raise ValueError(f"shader '{self.name}' must have exactly 3 "
                             f"output channels")
        for axis in ("x", "y"):
            if axis not in self.graph.inputs:
                raise ValueError(f"shader '{self.name}' must read {axis}")


def shader_hash(shader: Shader) -> str:
    text = shader.name + "\n" + to_source(shader.graph)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# The gallery sticks to ops that are defined on the whole view (no
# division, roots, or logs), so every rule assignment is evaluable and
# tuner fitness failures mean bugs, not domain walks.

_CHECKERBOARD = """
let gx = gt(fract(x * 0.03125), 0.5)
let gy = gt(fract(y * 0.03125), 0.5)
let cell = gx + gy - 2.0 * gx * gy
out r = cell
out g = cell
out b = cell
"""

_CIRCLES = """
let u = fract(x * 0.0625) - 0.5
let v = fract(y * 0.0625) - 0.5
let inside = lt(u * u + v * v, 0.09)
out r = 0.15 + 0.75 * inside
out g = 0.2 + 0.6 * inside
out b = 0.9 - 0.7 * inside
"""

_BRICKS = """
let row = floor(y * 0.05)
let parity = 2.0 * fract(row * 0.5)
let u = fract(x * 0.025 + 0.5 * parity)
let v = fract(y * 0.05)
let body = gt(u, 0.05) * lt(u, 0.95) * gt(v, 0.1) * lt(v, 0.9)
let brick_id = floor(x * 0.025 + 0.5 * parity) + 57.0 * row
let tone = fract(sin(brick_id * 12.9898) * 43758.5453)
out r = 0.15 + body * (0.45 + 0.25 * tone)
out g = 0.1 + body * (0.2 + 0.1 * tone)
out b = 0.1 + body * 0.12
"""

_QUAD_SINE = """
let q = sin(x * x * 0.0006 + y * y * 0.0006 + t)
out r = 0.5 + 0.5 * q
out g = 0.5 + 0.5 * sin(x * y * 0.0004 + t * 0.7)
out b = 0.5 + 0.5 * cos(x * 0.02 + t)
"""

_ZIGZAG = """
let zig = abs(fract(y * 0.04) * 2.0 - 1.0)
let band = fract(x * 0.03 + zig * 0.8)
let on = gt(band, 0.5)
out r = 0.1 + 0.8 * on
out g = 0.2 + 0.6 * zig
out b = 0.8 - 0.6 * on
"""

_BUMPS = """
let xp = x + 6.0 * sin(y * 0.05)
let yp = y + 6.0 * cos(x * 0.05)
let wave = sin(xp * 0.12) * sin(yp * 0.12)
let ridge = gt(wave, 0.0)
out r = 0.15 + 0.7 * ridge
out g = 0.5 + 0.5 * wave
out b = 0.35 + 0.4 * ridge * wave
"""

_SHADER_DEFS = (
    ("checkerboard", _CHECKERBOARD, False, True),
    ("circles", _CIRCLES, False, True),
    ("bricks", _BRICKS, False, True),
    ("quad_sine", _QUAD_SINE, True, False),
    ("zigzag", _ZIGZAG, False, True),
    ("bumps", _BUMPS, False, False),
)


def builtin_shaders() -> list[Shader]:
    out = []
    for name, src, animated, tiled in _SHADER_DEFS:
        out.append(Shader(name=name, graph=parse_program(src, name=name),
                          animated=animated, tiled=tiled))
    return out


def shader_by_name(name: str) -> Shader:
    for s in builtin_shaders():
        if s.name == name:
            return s
    known = ", ".join(n for n, *_ in _SHADER_DEFS)
    raise KeyError(f"unknown shader '{name}' (built-ins: {known})")


# ---------------------------------------------------------------------------
# color transfer and metrics

def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Piecewise sRGB transfer on [0, 1] linear values."""
    a = np.asarray(linear, dtype=float)
    enc = np.where(a <= 0.0031308, 12.92 * a,
                   1.055 * np.power(np.maximum(a, 1e-12), 1.0 / 2.4)
                   - 0.055)
    # 1.055 * 1 ** (1/2.4) - 0.055 leaves float dust; pin the endpoint
    return np.where(a >= 1.0, 1.0, enc)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    a = np.asarray(encoded, dtype=float)
    return np.where(a <= 0.04045, a / 12.92,
                    np.power((a + 0.055) / 1.055, 2.4))


def linear_to_image(linear: np.ndarray) -> np.ndarray:
    """Clamp a linear buffer into [0, 1] and sRGB-encode it."""
    return srgb_encode(np.clip(np.asarray(linear, dtype=float), 0.0, 1.0))


def l2_error_srgb(img: np.ndarray, truth: np.ndarray) -> float:
    """RMS difference over every pixel and channel of two sRGB buffers.
    All-black vs all-white is exactly 1."""
    a = np.asarray(img, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def error_heatmap(img: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """(h, w) per-pixel RMS over channels of the sRGB difference."""
    a = np.asarray(img, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.sqrt(np.mean((a - b) ** 2, axis=-1))


# ---------------------------------------------------------------------------
# rendering

def _stack_channels(flat: dict[str, np.ndarray], graph: ProgramGraph,
                    w: int, h: int) -> np.ndarray:
    chans = [np.broadcast_to(np.asarray(flat[name], dtype=float),
                             (h * w,)).reshape(h, w)
             for name, _ in graph.outputs]
    return np.stack(chans, axis=-1)


def render_image(p: SmoothedProgram, w: int, h: int, t: float = 0.0,
                 sigma_px: float = 0.5, workers: int = 1) -> np.ndarray:
    """Render a smoothed program to an sRGB buffer: output means are the
    colors."""
    spec = InputSpec(sigma_px=sigma_px, t_value=t)
    flat = evaluate_batch(p, w, h, spec, workers=workers)
    linear = _stack_channels({k: v.ravel() for k, v in flat.items()},
                             p.graph, w, h)
    return linear_to_image(linear)


def noaa_render(g: ProgramGraph, w: int, h: int, t: float = 0.0) \
        -> np.ndarray:
    """Aliased baseline: direct evaluation at pixel centers (the all-none
    assignment)."""
    p = compile_program(g, all_rule_assignment(g, "none"))
    return render_image(p, w, h, t=t, sigma_px=0.5)


def supersample_render(g: ProgramGraph, w: int, h: int, spp: int,
                       seed: int = 0, t: float = 0.0,
                       sigma_px: float = 0.5) -> np.ndarray:
    """Average of spp Gaussian-jittered direct evaluations per pixel,
    converted to sRGB. spp=1000 is the designated ground truth."""
    if spp < 1:
        raise ValueError("spp must be at least 1")
    spec = InputSpec(sigma_px=sigma_px, t_value=t)
    means, sigmas, pixel_ids = spec.grid(w, h)
    flat = supersample_outputs(g, means, sigmas, pixel_ids, spp, seed)
    return linear_to_image(_stack_channels(flat, g, w, h))


def msaa_render(g: ProgramGraph, w: int, h: int, spp: int,
                seed: int = 0, t: float = 0.0) -> np.ndarray:
    """MSAA baseline: low-spp jittered supersampling of the direct
    program."""
    if spp not in MSAA_SAMPLE_COUNTS:
        raise ValueError(f"MSAA spp must be one of {MSAA_SAMPLE_COUNTS}, "
                         f"got {spp}")
    return supersample_render(g, w, h, spp, seed=seed, t=t)


def ground_truth_render(shader: Shader, w: int, h: int, seed: int = 0,
                        t: float = 0.0,
                        spp: int = GROUND_TRUTH_SPP) -> np.ndarray:
    return supersample_render(shader.graph, w, h, spp, seed=seed, t=t)


def cached_ground_truth(cache_dir, shader: Shader, w: int, h: int,
                        seed: int = 0, t: float = 0.0,
                        spp: int = GROUND_TRUTH_SPP) -> np.ndarray:
    """Ground truth with an on-disk cache: float buffer (.npy) for exact
    reuse, PNG for viewing, JSON sidecar recording how it was made. Any
    sidecar mismatch re-renders."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    stamp = {"shader": shader.name, "hash": shader_hash(shader),
             "w": w, "h": h, "spp": spp, "seed": seed, "t": t,
             "sigma_px": 0.5}
    base = cache_dir / f"{shader.name}_{w}x{h}_spp{spp}_seed{seed}"
    sidecar = base.with_suffix(".json")
    buf_path = base.with_suffix(".npy")
    if sidecar.exists() and buf_path.exists():
        try:
            if json.loads(sidecar.read_text()) == stamp:
                return np.load(buf_path)
        except (ValueError, OSError):
            pass
    img = ground_truth_render(shader, w, h, seed=seed, t=t, spp=spp)
    np.save(buf_path, img)
    write_png(base.with_suffix(".png"), img)
    sidecar.write_text(json.dumps(stamp, indent=2, sort_keys=True))
    return img


# ---------------------------------------------------------------------------
# image files

def write_png(path, img: np.ndarray) -> None:
    """Quantize an sRGB float buffer to 8-bit PNG. Grayscale (h, w) buffers
    are written single-channel."""
    a = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    q = np.round(a * 255.0).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    Image.fromarray(q, mode=mode).save(Path(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float)
    return arr / 255.0


# ---------------------------------------------------------------------------
# reports

@dataclass
class ErrorReport:
    l2_srgb: float
    runtime_ms: float
    ratio: float            # runtime vs the no-antialiasing baseline
    heatmap: np.ndarray

    def __post_init__(self):
        if self.l2_srgb < 0.0 or self.ratio < 0.0:
            raise ValueError("error and runtime ratio must be nonnegative")


def write_metrics_csv(path, rows) -> None:
    """rows: iterables of (variant_id, runtime_ms, ratio, l2_srgb)."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant_id", "runtime_ms", "ratio", "l2_srgb"])
        for variant_id, runtime_ms, ratio, l2 in rows:
            writer.writerow([variant_id, repr(float(runtime_ms)),
                             repr(float(ratio)), repr(float(l2))])


def emit_pareto_plot(path, frontier, msaa_points=(), noaa_point=None,
                     title: str = "") -> None:
    """SVG runtime/error scatter: tuned frontier, MSAA ladder, no-AA mark.

    frontier and msaa_points are sequences of (runtime_ms, l2_error);
    noaa_point a single such pair."""
    if not frontier:
        raise ValueError("frontier is empty")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    fx = [float(r) for r, _ in frontier]
    fy = [float(e) for _, e in frontier]
    order = np.argsort(fx)
    ax.plot(np.asarray(fx)[order], np.asarray(fy)[order], "o-",
            color="#2a6fb0", label="tuned frontier")
    if msaa_points:
        mx = [float(r) for r, _ in msaa_points]
        my = [float(e) for _, e in msaa_points]
        morder = np.argsort(mx)
        ax.plot(np.asarray(mx)[morder], np.asarray(my)[morder], "s--",
                color="#b05a2a", label="MSAA")
    if noaa_point is not None:
        ax.plot([float(noaa_point[0])], [float(noaa_point[1])], "x",
                color="#555555", markersize=9, label="no AA")
    ax.set_xlabel("runtime (ms)")
    ax.set_ylabel("L2 error (sRGB)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
