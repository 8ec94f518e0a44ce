"""Command line front end.

Subcommands: compile (shader + rule assignment -> render, heatmap,
metrics), render (plain, supersampled, or smoothed), tune (genetic search,
writes frontier JSONL/CSV and a pareto plot), table-check (closed forms vs
quadrature), denoise (PNG in/out), gallery (every built-in with ground
truth and heatmaps). Exit codes: 0 ok, 1 runtime failure, 2 usage.
"""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .compile import EvaluationError, all_rule_assignment, compile_program
from .oracle import quadrature_atomic
from .postprocess import DenoiseConfig, nlmeans_denoise
from .render import (GROUND_TRUTH_SPP, MSAA_SAMPLE_COUNTS, builtin_shaders,
                     cached_ground_truth, emit_pareto_plot, error_heatmap,
                     l2_error_srgb, msaa_render, noaa_render, read_png,
                     render_image, shader_by_name, supersample_render,
                     write_metrics_csv, write_png)
from .rules import RuleAssignment
from .tuner import (GAConfig, TUNE_GRID, evolve, save_frontier, variant_id,
                    write_frontier_csv)

# scaled conformance error: floor the denominator so near-zero oracle
# values demand absolute accuracy of tol * floor instead of blowing up
CONFORMANCE_TOL = 1e-6
CONFORMANCE_FLOOR = 1e-3


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError(
            f"size must look like 256x256, got '{text}'")
    return int(m.group(1)), int(m.group(2))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_assignment(path) -> RuleAssignment:
    return RuleAssignment.from_json(Path(path).read_text())


def _model_ms(g, assignment, w, h, seed=0) -> float:
    return compile_program(g, assignment, seed=seed).model_runtime_ms(w, h)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_compile(args) -> int:
    shader = shader_by_name(args.shader)
    g = shader.graph
    assignment = (_load_assignment(args.assignment) if args.assignment
                  else all_rule_assignment(g, "adaptive"))
    p = compile_program(g, assignment, seed=args.seed)
    w, h = args.size
    img = render_image(p, w, h, sigma_px=args.sigma)
    out = _out_dir(args)
    truth = cached_ground_truth(out / "cache", shader, w, h, seed=args.seed,
                                spp=args.spp or GROUND_TRUTH_SPP)
    ms = p.model_runtime_ms(w, h)
    noaa_ms = _model_ms(g, all_rule_assignment(g, "none"), w, h)
    l2 = l2_error_srgb(img, truth)
    write_png(out / f"{shader.name}_render.png", img)
    write_png(out / f"{shader.name}_heatmap.png", error_heatmap(img, truth))
    write_metrics_csv(out / f"{shader.name}_metrics.csv",
                      [(variant_id(assignment), ms, ms / noaa_ms, l2)])
    print(f"{shader.name}: L2 {l2:.6f} sRGB, modeled {ms:.3f} ms "
          f"({ms / noaa_ms:.2f}x no-AA)")
    return 0


def _cmd_render(args) -> int:
    shader = shader_by_name(args.shader)
    g = shader.graph
    w, h = args.size
    if args.assignment:
        p = compile_program(g, _load_assignment(args.assignment),
                            seed=args.seed)
        img = render_image(p, w, h, sigma_px=args.sigma)
    elif args.spp:
        img = supersample_render(g, w, h, args.spp, seed=args.seed,
                                 sigma_px=args.sigma)
    else:
        img = noaa_render(g, w, h)
    path = _out_dir(args) / f"{shader.name}.png"
    write_png(path, img)
    print(f"wrote {path}")
    return 0


def _cmd_tune(args) -> int:
    shader = shader_by_name(args.shader)
    g = shader.graph
    w, h = args.size
    if w != h:
        raise ValueError(f"tune uses a square grid, got {w}x{h}")
    out = _out_dir(args)
    truth = cached_ground_truth(out / "cache", shader, w, h, seed=args.seed,
                                spp=args.spp or GROUND_TRUTH_SPP)
    front = evolve(g, truth, GAConfig(), seed=args.seed, size=w,
                   workers=args.workers)
    if not front:
        raise EvaluationError(f"no feasible variant found for {shader.name}")
    save_frontier(front, out / f"{shader.name}_frontier.jsonl")
    write_frontier_csv(front, out / f"{shader.name}_frontier.csv")

    msaa_pts = []
    for spp in MSAA_SAMPLE_COUNTS:
        err = l2_error_srgb(msaa_render(g, w, h, spp, seed=args.seed), truth)
        msaa_pts.append((_model_ms(g, all_rule_assignment(g, "mc", n=spp),
                                   w, h), err))
    noaa_pt = (_model_ms(g, all_rule_assignment(g, "none"), w, h),
               l2_error_srgb(noaa_render(g, w, h), truth))
    emit_pareto_plot(out / f"{shader.name}_pareto.svg",
                     [(e.runtime_ms, e.l2_error) for e in front],
                     msaa_points=msaa_pts, noaa_point=noaa_pt,
                     title=shader.name)
    best = front[-1]
    print(f"{shader.name}: {len(front)} frontier variants, "
          f"best L2 {best.l2_error:.6f} at {best.runtime_ms:.3f} ms")
    return 0


def _cmd_table_check(args) -> int:
    failed = False
    for op, power, kernel in kernels.TABLE_ROWS:
        worst = 0.0
        for x, sigma in kernels.conformance_grid(op, kernel, power):
            for want_square in (False, True):
                if kernel == "gaussian":
                    # the mean can exist without the square; read the
                    # table entry directly
                    if not kernels.has_gaussian(op, power,
                                                want_square=want_square):
                        continue
                    fo = kernels.forms(op, power)
                    fn = fo.g_square if want_square else fo.g_mean
                    val = float(fn(x, sigma))
                else:
                    got = kernels.smooth_atomic(op, kernel, x, sigma,
                                                power=power)
                    val = float(got.square if want_square else got.mean)
                ref = quadrature_atomic(op, kernel, x, sigma,
                                        want_square=want_square, power=power)
                scale = max(abs(ref), CONFORMANCE_FLOOR)
                worst = max(worst, abs(val - ref) / scale)
        label = f"{op}^{power}" if power else op
        ok = worst <= CONFORMANCE_TOL
        failed = failed or not ok
        print(f"{label:>12} {kernel:<9} max scaled error {worst:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def _cmd_denoise(args) -> int:
    img = read_png(args.input)
    cfg = DenoiseConfig(h_finest=args.h)
    write_png(args.output, nlmeans_denoise(img, cfg))
    print(f"wrote {args.output}")
    return 0


def _cmd_gallery(args) -> int:
    out = _out_dir(args)
    w, h = args.size
    for shader in builtin_shaders():
        g = shader.graph
        truth = cached_ground_truth(out / "cache", shader, w, h,
                                    seed=args.seed,
                                    spp=args.spp or GROUND_TRUTH_SPP)
        noaa = noaa_render(g, w, h)
        assignment = all_rule_assignment(g, "adaptive")
        p = compile_program(g, assignment, seed=args.seed)
        smoothed = render_image(p, w, h, sigma_px=args.sigma)
        write_png(out / f"{shader.name}_truth.png", truth)
        write_png(out / f"{shader.name}_noaa.png", noaa)
        write_png(out / f"{shader.name}_smoothed.png", smoothed)
        write_png(out / f"{shader.name}_heatmap.png",
                  error_heatmap(smoothed, truth))
        noaa_ms = _model_ms(g, all_rule_assignment(g, "none"), w, h)
        ms = p.model_runtime_ms(w, h)
        rows = [
            (variant_id(all_rule_assignment(g, "none")), noaa_ms, 1.0,
             l2_error_srgb(noaa, truth)),
            (variant_id(assignment), ms, ms / noaa_ms,
             l2_error_srgb(smoothed, truth)),
        ]
        write_metrics_csv(out / f"{shader.name}_metrics.csv", rows)
        print(f"{shader.name}: no-AA L2 {rows[0][3]:.6f}, "
              f"smoothed L2 {rows[1][3]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bandlimit",
        description="Smooth, tune, render, and denoise procedural shaders.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--size", type=_parse_size, default=(256, 256),
                        metavar="WxH", help="render size (default 256x256)")
    common.add_argument("--seed", type=int, default=0,
                        help="master seed (default 0)")
    common.add_argument("--spp", type=int, default=None,
                        help="samples per pixel: the supersample count for "
                             "render, the ground-truth count elsewhere "
                             f"(default {GROUND_TRUTH_SPP})")
    common.add_argument("--out", default="out", metavar="DIR",
                        help="output directory (default ./out)")
    common.add_argument("--sigma", type=float, default=0.5,
                        help="pixel-footprint sigma in pixels (default 0.5)")
    named = argparse.ArgumentParser(add_help=False)
    named.add_argument("--shader", required=True,
                       help="built-in shader name")

    c = sub.add_parser("compile", parents=[common, named],
                       help="compile one variant and report its error")
    c.add_argument("--assignment", metavar="FILE",
                   help="rule assignment JSON (default: all-adaptive)")
    c.set_defaults(func=_cmd_compile)

    r = sub.add_parser("render", parents=[common, named],
                       help="render a shader (no-AA, --spp supersampled, "
                            "or --assignment smoothed)")
    r.add_argument("--assignment", metavar="FILE",
                   help="rule assignment JSON")
    r.set_defaults(func=_cmd_render)

    t = sub.add_parser("tune", parents=[common, named],
                       help="genetic search; writes frontier files and plot")
    t.add_argument("--workers", type=int, default=1,
                   help="parallel fitness evaluators (default 1)")
    t.set_defaults(func=_cmd_tune, size=(TUNE_GRID, TUNE_GRID))

    k = sub.add_parser("table-check",
                       help="closed-form table versus quadrature")
    k.set_defaults(func=_cmd_table_check)

    d = sub.add_parser("denoise", help="non-local-means denoise a PNG")
    d.add_argument("input", help="input PNG")
    d.add_argument("output", help="output PNG")
    d.add_argument("--h", type=float, default=10.0, dest="h",
                   help="finest-level strength, 8-bit units (default 10)")
    d.set_defaults(func=_cmd_denoise)

    gal = sub.add_parser("gallery", parents=[common],
                         help="render every built-in with truth and heatmap")
    gal.set_defaults(func=_cmd_gallery)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, EvaluationError,
            kernels.NoClosedForm) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
