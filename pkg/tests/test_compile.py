"""Compiler and evaluator behavior.

The heavy check here is composition correctness: compiled evaluation of
every 2-node chain must equal calling the rules module by hand, under
every rule kind. The compiler may not add or lose anything relative to
the per-node contracts.
"""
import json
import statistics

import numpy as np
import pytest

from bandlimit import rng, rules
from bandlimit.autodiff import direct_outputs
from bandlimit.compile import (EvaluationError, InputSpec,
                               all_rule_assignment, compile_program,
                               evaluate_batch, measure_runtime,
                               node_model_units, train_rho_constants)
from bandlimit.ir import (BINARY_OPS, COMPARISON_OPS, UNARY_OPS,
                          GraphBuilder, parse_program)
from bandlimit.oracle import supersample_outputs
from bandlimit.rules import (EvalDiagnostics, NodeStats, RuleAssignment,
                             RuleTag, effective_tag)

SEED = 11


def _tag_for(kind, node, n=4):
    if kind == "mc":
        return RuleTag("mc", n=n)
    if kind == "compact-box":
        return RuleTag("compact", kernel="box")
    if kind == "compact-tent":
        return RuleTag("compact", kernel="tent")
    if kind == "adaptive":
        mode = "zero" if (node.op in rules.RHO_OPS or node.op == "select") \
            else None
        return RuleTag("adaptive", rho_mode=mode)
    return RuleTag(kind)


def _assign(g, kind, n=4):
    return RuleAssignment({node.id: _tag_for(kind, node, n)
                           for node in g.nodes if node.op != "input"})


# ---------------------------------------------------------------------------
# manual mirror of the per-node contracts, written against the rules API

def _manual_mc(g, node, tag, stats, samples, pixel_ids, seed):
    blocks = []
    for idx, oid in enumerate(node.operands):
        onode = g.node(oid)
        otag = samples.get(("tag", oid))
        if otag is not None and otag.kind == "mc" and otag.n == tag.n:
            block = samples[oid]
        elif onode.op == "const":
            block = np.broadcast_to(float(onode.value),
                                    (tag.n,) + pixel_ids.shape)
        elif onode.op == "input":
            block = rules.draw_samples(stats[oid], oid, pixel_ids, tag.n,
                                       seed, rng.STREAM_INPUT_JITTER)
        else:
            block = rules.draw_samples(stats[oid], oid, pixel_ids, tag.n,
                                       seed, rng.STREAM_NODE_JITTER)
        block = rules.repair_samples(node.op, idx, block, stats[oid].mean,
                                     node.power)
        blocks.append(block)
    return rules.mc_node(node.op, blocks, node.power)


def _manual_eval(g, assignment, means, sigmas, pixel_ids, seed):
    """Hand-rolled propagation: input stats, then one rules call per node."""
    stats, samples = {}, {}
    for node in g.nodes:
        nid, op = node.id, node.op
        if op == "input":
            mu = np.asarray(means[node.name], dtype=float)
            sig = np.asarray(sigmas.get(node.name, 0.0), dtype=float)
            stats[nid] = NodeStats(mu, sig * sig)
            continue
        if op == "const":
            stats[nid] = NodeStats(float(node.value), 0.0)
            continue
        tag, _ = effective_tag(op, node.power, assignment.tags[nid])
        operands = [stats[i] for i in node.operands]
        if tag.kind == "mc":
            block = _manual_mc(g, node, tag, stats, samples, pixel_ids,
                               seed)
            samples[nid] = block
            samples[("tag", nid)] = tag
            stats[nid] = rules.mc_summarize(block)
            continue
        if tag.kind == "none":
            out = rules.propagate_none(op, operands, node.power)
        elif tag.kind == "dorn":
            out = rules.propagate_dorn(op, operands, node.power)
        elif tag.kind == "adaptive":
            if op == "select":
                out = rules.propagate_select(*operands)
            elif op in UNARY_OPS:
                out = rules.propagate_adaptive_unary(op, operands[0],
                                                     node.power)
            elif op == "mod":
                out = rules.propagate_mod(*operands)
            elif op == "div":
                out = rules.propagate_div(operands[0], operands[1], 0.0)
            elif op in COMPARISON_OPS:
                out = rules.propagate_comparison(op, operands[0],
                                                 operands[1], 0.0)
            else:
                out = rules.propagate_adaptive_binary(op, operands[0],
                                                      operands[1], 0.0)
        else:
            if op in UNARY_OPS:
                out = rules.propagate_compact(op, operands[0], tag.kernel,
                                              node.power)
            elif op == "select":
                out = rules.propagate_select(*operands)
            elif op == "mod":
                out = rules.propagate_mod(*operands)
            elif op == "div":
                out = rules.propagate_div(operands[0], operands[1], 0.0)
            elif op in COMPARISON_OPS:
                out = rules.propagate_comparison(op, operands[0],
                                                 operands[1], 0.0,
                                                 hat=tag.kernel)
            else:
                out = rules.propagate_adaptive_binary(op, operands[0],
                                                      operands[1], 0.0)
        stats[nid] = out
    return {name: stats[nid] for name, nid in g.outputs}


def _run_both(g, kind, means, sigmas, pixel_ids):
    assignment = _assign(g, kind)
    try:
        manual = _manual_eval(g, assignment, means, sigmas, pixel_ids, SEED)
        man_ok = all(np.all(np.isfinite(s.mean)) and np.all(
            np.isfinite(s.var)) for s in manual.values())
    except (rules.RuleError, ValueError):
        manual, man_ok = None, False
    try:
        p = compile_program(g, _assign(g, kind), seed=SEED)
        compiled = p.evaluate_stats(means, sigmas, pixel_ids)
        comp_ok = True
    except (EvaluationError, ValueError):
        compiled, comp_ok = None, False
    return manual, man_ok, compiled, comp_ok


def _chain_graphs():
    """Every 2-node chain over the op inventory (powi at a resolved and an
    unresolved power), plus a select chain."""
    unary = sorted(UNARY_OPS - {"powi"}) + ["powi2", "powi5"]
    binary = sorted(BINARY_OPS)
    graphs = []

    def mk_unary(b, op, arg):
        if op.startswith("powi"):
            return b.unary("powi", arg, power=int(op[4:]))
        return b.unary(op, arg)

    for f1 in unary:
        for f2 in unary:
            b = GraphBuilder(f"{f1}-{f2}")
            x = b.input_var("x")
            b.output("c", mk_unary(b, f2, mk_unary(b, f1, x)))
            graphs.append(b.finish())
        for f2 in binary:
            b = GraphBuilder(f"{f1}-{f2}")
            x = b.input_var("x")
            b.output("c", b.binary(f2, mk_unary(b, f1, x), b.const(0.7)))
            graphs.append(b.finish())
    for f1 in binary:
        for f2 in unary:
            b = GraphBuilder(f"{f1}-{f2}")
            x, y = b.input_var("x"), b.input_var("y")
            b.output("c", mk_unary(b, f2, b.binary(f1, x, y)))
            graphs.append(b.finish())
    b = GraphBuilder("cmp-select")
    x, y = b.input_var("x"), b.input_var("y")
    b.output("c", b.select(b.binary("cmp_gt", x, y), b.const(0.25),
                           b.const(-0.5)))
    graphs.append(b.finish())
    return graphs


_CHAINS = _chain_graphs()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # chains walk into
# NaN territory on purpose; both paths must agree on the failure
@pytest.mark.parametrize("kind", ["none", "dorn", "adaptive", "compact-box",
                                  "compact-tent", "mc"])
def test_composition_matches_manual_propagation(kind):
    means = {"x": np.array([0.8, 1.6, 0.35]),
             "y": np.array([1.7, 0.9, 2.4])}
    sigmas = {"x": 0.15, "y": 0.2}
    pixel_ids = np.arange(3, dtype=np.int64)
    checked = 0
    for g in _CHAINS:
        manual, man_ok, compiled, comp_ok = _run_both(g, kind, means,
                                                      sigmas, pixel_ids)
        assert man_ok == comp_ok, f"{g.name} under {kind}"
        if not man_ok:
            continue
        for name in manual:
            np.testing.assert_array_equal(
                np.asarray(compiled[name].mean, float),
                np.broadcast_to(np.asarray(manual[name].mean, float),
                                pixel_ids.shape),
                err_msg=f"{g.name} under {kind} ({name} mean)")
            np.testing.assert_array_equal(
                np.asarray(compiled[name].var, float),
                np.broadcast_to(np.asarray(manual[name].var, float),
                                pixel_ids.shape),
                err_msg=f"{g.name} under {kind} ({name} var)")
        checked += 1
    # most chains must be evaluable, not error out
    assert checked > len(_CHAINS) // 2


# ---------------------------------------------------------------------------

FUZZ_SHADER = """
let s = sin(x * 0.21) + cos(y * 0.13 + 1.0)
let f = fract(x * 0.04) - fract(y * 0.028)
let m = (x + 3.0) % 2.5
let q = s * f + sqrt(abs(s) + 0.5)
let edge = select(gt(s, f), q, q * 0.5 + m)
out c = edge + floor(y * 0.02) * 0.06
out d = tanh(q) - heaviside(f)
"""


def test_all_none_equals_direct_evaluation_exactly():
    g = parse_program(FUZZ_SHADER)
    gen = np.random.default_rng(5)
    means = {"x": gen.uniform(0.0, 256.0, 10_000),
             "y": gen.uniform(0.0, 256.0, 10_000)}
    p = compile_program(g, all_rule_assignment(g, "none"))
    got = p.evaluate(means, {"x": 0.5, "y": 0.5}, np.arange(10_000))
    want = direct_outputs(g, means)
    for name in ("c", "d"):
        np.testing.assert_array_equal(got[name], want[name])


@pytest.mark.parametrize("n", [2, 8])
def test_all_mc_is_bit_identical_to_supersampling(n):
    g = parse_program(FUZZ_SHADER)
    gen = np.random.default_rng(6)
    means = {"x": gen.uniform(0.0, 256.0, 500),
             "y": gen.uniform(0.0, 256.0, 500)}
    sigmas = {"x": 2.0, "y": 2.0}
    pixel_ids = np.arange(500, dtype=np.int64)
    p = compile_program(g, all_rule_assignment(g, "mc", n=n), seed=SEED)
    got = p.evaluate(means, sigmas, pixel_ids)
    want = supersample_outputs(g, means, sigmas, pixel_ids, n, SEED)
    for name in ("c", "d"):
        np.testing.assert_array_equal(got[name], want[name])


def test_worker_count_does_not_change_results():
    g = parse_program(FUZZ_SHADER)
    spec = InputSpec()
    means, sigmas, pixel_ids = spec.grid(37, 27)  # odd sizes, uneven split
    for kind, kw in (("adaptive", {}), ("mc", {"n": 8})):
        p = compile_program(g, all_rule_assignment(g, kind, **kw), seed=3)
        base = p.evaluate_stats(means, sigmas, pixel_ids, workers=1)
        for workers in (2, 8):
            other = p.evaluate_stats(means, sigmas, pixel_ids,
                                     workers=workers)
            for name, _ in g.outputs:
                np.testing.assert_array_equal(base[name].mean,
                                              other[name].mean)
                np.testing.assert_array_equal(base[name].var,
                                              other[name].var)


MIXED_SHADER = """
let s = sin(x * 0.21) + cos(y * 0.13 + 1.0)
let f = fract(x * 0.04)
out c = select(gt(s, f), s * 0.5, f + 0.25)
"""


def test_mixed_assignment_roundtrips_through_json():
    g = parse_program(MIXED_SHADER)
    kinds = ["none", "dorn", "adaptive", "compact-box", "mc"]
    tags = {}
    for i, node in enumerate(n for n in g.nodes if n.op != "input"):
        tags[node.id] = _tag_for(kinds[i % len(kinds)], node, n=8)
    asn = RuleAssignment(tags)
    blob = asn.to_json()
    asn2 = RuleAssignment.from_json(blob)
    assert asn2.tags == asn.tags
    spec = InputSpec()
    means, sigmas, pixel_ids = spec.grid(16, 16)
    p1 = compile_program(g, asn, seed=2)
    p2 = compile_program(g, asn2, seed=2)
    a = p1.evaluate(means, sigmas, pixel_ids)
    b = p2.evaluate(means, sigmas, pixel_ids)
    np.testing.assert_array_equal(a["c"], b["c"])


# ---------------------------------------------------------------------------
# worked example and rho behavior

def test_square_of_jittered_zero_is_the_variance():
    # smoothing x*x at x=0 with sigma=0.5 must see E[x^2] = 0.25; the
    # affine correlation recognizes the operands as identical
    g = parse_program("out c = x * x")
    p = compile_program(g, all_rule_assignment(g, "adaptive",
                                               rho_mode="affine"))
    out = p.evaluate({"x": np.array([0.0]), "y": np.array([0.0])},
                     {"x": 0.5, "y": 0.5}, np.arange(1))
    assert out["c"][0] == pytest.approx(0.25, abs=1e-12)


def test_affine_rho_orthogonal_gradients_give_zero():
    g = parse_program("out c = (x + y) * (x - y)")
    p = compile_program(g, all_rule_assignment(g, "adaptive",
                                               rho_mode="affine"))
    x = np.array([3.0])
    out = p.evaluate_stats({"x": x, "y": np.array([1.0])},
                           {"x": 0.5, "y": 0.5}, np.arange(1))
    # rho(x+y, x-y) = 0 when sigmas match: mean is exactly mu_a * mu_b
    assert out["c"].mean[0] == pytest.approx(4.0 * 2.0, abs=1e-12)


def test_affine_rho_proportional_subtrees_give_one():
    g = parse_program("out c = (x + x) * (3.0 * x)")
    p = compile_program(g, all_rule_assignment(g, "adaptive",
                                               rho_mode="affine"))
    x = np.array([0.7])
    out = p.evaluate({"x": x, "y": np.array([0.0])}, {"x": 0.5, "y": 0.5},
                     np.arange(1))
    assert out["c"][0] == pytest.approx(6.0 * (0.7 ** 2 + 0.25), abs=1e-12)


def test_sampled_rho_trains_expected_constants():
    g = parse_program("out c = (x + 1.0) * (x + 2.0)")
    asn = all_rule_assignment(g, "adaptive", rho_mode="sampled")
    compile_program(g, asn, seed=4)
    mul = [n for n in g.nodes if n.op == "mul"][0]
    assert asn.rho_constants[mul.id] > 0.95

    g2 = parse_program("out c = (x + y) * (x - y)")
    asn2 = all_rule_assignment(g2, "adaptive", rho_mode="sampled")
    compile_program(g2, asn2, seed=4)
    mul2 = [n for n in g2.nodes if n.op == "mul"][0]
    assert abs(asn2.rho_constants[mul2.id]) < 0.15


def test_sampled_rho_training_is_skipped_when_constants_exist():
    g = parse_program("out c = (x + 1.0) * (x + 2.0)")
    asn = all_rule_assignment(g, "adaptive", rho_mode="sampled")
    train_rho_constants(g, asn, seed=4)
    frozen = dict(asn.rho_constants)
    for nid in frozen:
        asn.rho_constants[nid] = 0.123
    compile_program(g, asn, seed=99)
    assert all(asn.rho_constants[nid] == 0.123 for nid in frozen)


def test_sampled_rho_trains_select_triples():
    g = parse_program("out c = select(gt(x, y), x + 1.0, y * 0.5)")
    asn = all_rule_assignment(g, "adaptive", rho_mode="sampled")
    compile_program(g, asn, seed=4)
    sel = [n for n in g.nodes if n.op == "select"][0]
    rho = asn.rho_constants[sel.id]
    assert isinstance(rho, tuple) and len(rho) == 3
    assert all(-1.0 <= v <= 1.0 for v in rho)


def test_zero_gradient_rho_is_counted_per_pixel():
    g = parse_program("out c = x * 2.0")
    p = compile_program(g, all_rule_assignment(g, "adaptive",
                                               rho_mode="affine"))
    means = {"x": np.linspace(0, 9, 10), "y": np.zeros(10)}
    for workers in (1, 4):
        diag = EvalDiagnostics()
        p.evaluate(means, {"x": 0.5, "y": 0.5}, np.arange(10),
                   workers=workers, diag=diag)
        assert diag.zero_gradient_rho == 10


# ---------------------------------------------------------------------------
# sigma scales

def test_unit_sigma_scales_are_a_noop():
    g = parse_program(FUZZ_SHADER)
    p = compile_program(g, all_rule_assignment(g, "adaptive"), seed=1)
    ones = {node.id: 1.0 for node in g.nodes}
    q = p.with_sigma_scales(ones)
    spec = InputSpec()
    means, sigmas, pixel_ids = spec.grid(16, 16)
    a = p.evaluate_stats(means, sigmas, pixel_ids)
    b = q.evaluate_stats(means, sigmas, pixel_ids)
    for name, _ in g.outputs:
        np.testing.assert_array_equal(a[name].mean, b[name].mean)
        np.testing.assert_array_equal(a[name].var, b[name].var)


def test_input_sigma_scale_equals_scaling_the_input_sigma():
    g = parse_program("out c = sin(x)")
    xid = g.inputs["x"]
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    scaled = p.with_sigma_scales({xid: 2.0})
    means = {"x": np.array([1.1]), "y": np.array([0.0])}
    a = scaled.evaluate(means, {"x": 0.3, "y": 0.0}, np.arange(1))
    b = p.evaluate(means, {"x": 0.6, "y": 0.0}, np.arange(1))
    np.testing.assert_allclose(a["c"], b["c"], rtol=0, atol=0)


def test_node_sigma_scale_shrinks_downstream_smoothing():
    g = parse_program("out c = sin(x + x)")
    add = [n for n in g.nodes if n.op == "add"][0]
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    damped = p.with_sigma_scales({add.id: 1e-6})
    means = {"x": np.array([0.9]), "y": np.array([0.0])}
    sig = {"x": 0.4, "y": 0.0}
    full = p.evaluate(means, sig, np.arange(1))["c"][0]
    tiny = damped.evaluate(means, sig, np.arange(1))["c"][0]
    assert abs(tiny - np.sin(1.8)) < 1e-6
    assert abs(full - np.sin(1.8)) > 1e-3


def test_nonpositive_sigma_scale_is_rejected():
    g = parse_program("out c = sin(x)")
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    with pytest.raises(ValueError):
        p.with_sigma_scales({0: 0.0})
    with pytest.raises(ValueError):
        compile_program(g, all_rule_assignment(g, "adaptive"),
                        sigma_scales={0: -1.0})


# ---------------------------------------------------------------------------
# grids, errors, static checks

def test_grid_uses_fixed_view_coordinates():
    spec = InputSpec()
    means, sigmas, pixel_ids = spec.grid(256, 256)
    assert means["x"][0] == pytest.approx(0.5)
    assert means["x"][255] == pytest.approx(255.5)
    assert sigmas["x"] == pytest.approx(0.5)
    means64, sigmas64, _ = spec.grid(64, 64)
    # same view at quarter resolution: 4x spacing, 4x jitter width
    assert means64["x"][0] == pytest.approx(2.0)
    assert sigmas64["x"] == pytest.approx(2.0)
    assert pixel_ids.shape == (256 * 256,)
    assert len(np.unique(pixel_ids)) == 256 * 256
    with pytest.raises(ValueError):
        spec.grid(0, 4)


def test_output_can_be_a_bare_input():
    g = parse_program("out c = x")
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    out = p.evaluate_stats({"x": np.array([2.5]), "y": np.array([0.0])},
                           {"x": 0.5, "y": 0.5}, np.arange(1))
    assert out["c"].mean[0] == 2.5
    assert float(np.asarray(out["c"].var)) == 0.25


def test_random_modulus_is_rejected_at_compile_time():
    g = parse_program("out c = x % fract(y)")
    with pytest.raises(ValueError, match="mod"):
        compile_program(g, all_rule_assignment(g, "adaptive"))
    # mc has no deterministic-modulus requirement
    compile_program(g, all_rule_assignment(g, "mc", n=4))


def test_division_by_deterministic_zero_names_the_node():
    g = parse_program("out c = x / (t * 0.0)")
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    div = [n for n in g.nodes if n.op == "div"][0]
    with pytest.raises(EvaluationError) as exc:
        p.evaluate({"x": np.array([1.0]), "y": np.array([0.0]),
                    "t": 2.0}, {"x": 0.5, "y": 0.5}, np.arange(1))
    assert exc.value.node_id == div.id
    assert "zero" in str(exc.value)


def test_missing_rule_tag_fails_validation():
    g = parse_program("out c = sin(x)")
    asn = all_rule_assignment(g, "adaptive")
    sin_id = [n for n in g.nodes if n.op == "sin"][0].id
    del asn.tags[sin_id]
    with pytest.raises(ValueError, match="no rule"):
        compile_program(g, asn)


def test_table_gap_substitutions_are_recorded():
    g = parse_program("out c = tan(x)")
    p = compile_program(g, all_rule_assignment(g, "compact", kernel="tent"))
    tan_id = [n for n in g.nodes if n.op == "tan"][0].id
    assert any(nid == tan_id for nid, _, _ in p.substitutions)
    assert p.effective[tan_id] == RuleTag("compact", kernel="box")

    g2 = parse_program("out c = pow(x, 6.0)")
    p2 = compile_program(g2, all_rule_assignment(g2, "adaptive"))
    powi = [n for n in g2.nodes if n.op == "powi"][0]
    assert p2.effective[powi.id] == RuleTag("compact", kernel="box")
    # dorn only needs the mean table, which exists for all powers
    p3 = compile_program(g2, all_rule_assignment(g2, "dorn"))
    assert p3.effective[powi.id] == RuleTag("dorn")


# ---------------------------------------------------------------------------
# runtime models

def test_model_runtime_is_deterministic_and_ordered():
    g = parse_program(FUZZ_SHADER)
    costs = {}
    for kind, kw in (("none", {}), ("dorn", {}), ("adaptive", {}),
                     ("mc", {"n": 8}), ("mc", {"n": 32})):
        p = compile_program(g, all_rule_assignment(g, kind, **kw))
        key = kind + str(kw.get("n", ""))
        costs[key] = p.model_runtime_ms(64, 64)
        assert costs[key] == p.model_runtime_ms(64, 64)
    assert costs["none"] < costs["dorn"] < costs["adaptive"]
    assert costs["adaptive"] < costs["mc8"] < costs["mc32"]
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    assert p.model_runtime_ms(128, 128) == \
        pytest.approx(4.0 * p.model_runtime_ms(64, 64))


def test_model_units_cover_every_op_and_rule():
    g = parse_program(FUZZ_SHADER)
    for kind, kw in (("none", {}), ("dorn", {}), ("adaptive", {}),
                     ("compact", {"kernel": "tent"}), ("mc", {"n": 4})):
        asn = all_rule_assignment(g, kind, **kw)
        for node in g.nodes:
            if node.op == "input":
                assert node_model_units(node, None) == 0.0
            else:
                tag, _ = effective_tag(node.op, node.power,
                                       asn.tags[node.id])
                assert node_model_units(node, tag) >= 0.0


def test_measured_runtime_is_stable():
    g = parse_program(FUZZ_SHADER)
    p = compile_program(g, all_rule_assignment(g, "adaptive"))
    times = [measure_runtime(p, 64, 64, runs=5) for _ in range(5)]
    med = statistics.median(times)
    mad = statistics.median([abs(t - med) for t in times])
    assert med > 0.0
    assert mad <= 0.10 * med, f"timing dispersion {mad / med:.1%}"


def test_batch_render_shapes_and_diag_merge():
    g = parse_program(FUZZ_SHADER)
    p = compile_program(g, all_rule_assignment(g, "adaptive"), seed=1)
    diag = EvalDiagnostics()
    out = evaluate_batch(p, 24, 17, InputSpec(), workers=4, diag=diag)
    assert set(out) == {"c", "d"}
    assert out["c"].shape == (17, 24)
    assert np.isfinite(out["c"]).all() and np.isfinite(out["d"]).all()
