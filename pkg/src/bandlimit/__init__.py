"""Bandlimiting compiler for procedural shaders.

Programs are expression DAGs over pixel coordinates. The compiler replaces
each operation with a smoothed counterpart that propagates mean and
variance through the program, a genetic tuner picks per-node smoothing
rules along the runtime/error frontier, and the render layer turns the
results into images, baselines, and reports.
"""
from .compile import (InputSpec, SmoothedProgram, all_rule_assignment,
                      compile_program, evaluate_batch)
from .ir import GraphBuilder, ProgramGraph, parse_program, to_source
from .postprocess import DenoiseConfig, nlmeans_denoise, pick_finest_h
from .render import (Shader, builtin_shaders, ground_truth_render,
                     l2_error_srgb, msaa_render, noaa_render, render_image,
                     shader_by_name, supersample_render)
from .rules import RuleAssignment, RuleTag
from .tuner import (GAConfig, ParetoEntry, evolve, load_frontier,
                    pareto_frontier, refine_sigma_scales, rule_usage_stats,
                    save_frontier, write_frontier_csv)

__version__ = "0.1.0"

__all__ = [
    "DenoiseConfig", "GAConfig", "GraphBuilder", "InputSpec", "ParetoEntry",
    "ProgramGraph", "RuleAssignment", "RuleTag", "Shader", "SmoothedProgram",
    "all_rule_assignment", "builtin_shaders", "compile_program",
    "evaluate_batch", "evolve", "ground_truth_render", "l2_error_srgb",
    "load_frontier", "msaa_render", "nlmeans_denoise", "noaa_render",
    "pareto_frontier", "parse_program", "pick_finest_h", "refine_sigma_scales",
    "render_image", "rule_usage_stats", "save_frontier", "shader_by_name",
    "supersample_render", "to_source", "write_frontier_csv",
]
