import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandlimit import ir
from bandlimit.autodiff import direct_outputs
from bandlimit.ir import (GraphBuilder, ParseError, dfs_order, parse_program,
                          signature, subtree_nodes, to_source, topo_order)


def test_parse_single_output_chain():
    g = parse_program("out c = sin(x*x)")
    ops = [n.op for n in g.nodes]
    assert ops == ["input", "mul", "sin"]
    assert g.outputs == [("c", 2)]
    assert g.inputs == {"x": 0}
    assert g.input_roles["x"] == "spatial"


def test_structural_sharing_of_repeated_subexpressions():
    g = parse_program("""
        let a = fract(x / 4.0)
        let b = fract(x / 4.0)
        out c = a + b
    """)
    # one const 4.0, one div, one fract: dedup makes a and b the same node
    assert [n.op for n in g.nodes].count("fract") == 1
    assert [n.op for n in g.nodes].count("const") == 1


def test_mul_same_operand_is_single_mul_node():
    g = parse_program("out c = x*x")
    mul = g.nodes[1]
    assert mul.op == "mul" and mul.operands == (0, 0)


def test_min_max_abs_lower_to_select():
    g = parse_program("out c = min(x, y) + max(x, y) + abs(x - y)")
    ops = {n.op for n in g.nodes}
    assert "select" in ops
    assert not ops & {"min", "max", "abs"}
    vals = direct_outputs(g, {"x": np.array([1.0, -2.0]),
                              "y": np.array([0.5, 3.0])})
    np.testing.assert_allclose(vals["c"], [1.5 + 0.5, 1.0 + 5.0])


def test_pow_integer_literal_becomes_powi():
    g = parse_program("out c = pow(x, 4.0)")
    assert [n.op for n in g.nodes] == ["input", "powi"]
    assert g.nodes[1].power == 4
    # the folded exponent literal must not linger as a dead node
    assert all(n.op != "const" for n in g.nodes)


def test_pow_above_table_limit_chains_muls():
    g = parse_program("out c = pow(x, 11.0)")
    out = direct_outputs(g, {"x": np.array([1.3])})["c"]
    np.testing.assert_allclose(out, 1.3 ** 11)
    assert all((n.power or 0) <= ir.MAX_POW_INT for n in g.nodes)


def test_pow_negative_and_fractional():
    g = parse_program("out c = pow(x, -2.0)")
    assert "recip" in [n.op for n in g.nodes]
    np.testing.assert_allclose(
        direct_outputs(g, {"x": np.array([2.0])})["c"], 0.25)
    g2 = parse_program("out c = pow(x, 0.5)")
    assert {"exp", "log"} <= {n.op for n in g2.nodes}
    np.testing.assert_allclose(
        direct_outputs(g2, {"x": np.array([9.0])})["c"], 3.0, rtol=1e-12)


def test_comparison_functions_and_select():
    g = parse_program("out c = select(gt(x, 0.0), x, 0.0 - x)")
    vals = direct_outputs(g, {"x": np.array([-3.0, 4.0])})["c"]
    np.testing.assert_allclose(vals, [3.0, 4.0])


def test_mod_operator():
    g = parse_program("out c = x % 2.0")
    vals = direct_outputs(g, {"x": np.array([5.5, -1.25])})["c"]
    np.testing.assert_allclose(vals, [1.5, 0.75])


def test_parse_errors_carry_position():
    with pytest.raises(ParseError) as e:
        parse_program("out c = sin(x\nout d = y")
    assert e.value.line == 2
    with pytest.raises(ParseError, match="undefined name"):
        parse_program("out c = nope + 1.0")
    with pytest.raises(ParseError, match="reserved"):
        parse_program("let x = 1.0 out c = x")
    with pytest.raises(ParseError, match="already defined"):
        parse_program("let a = 1.0 let a = 2.0 out c = a")
    with pytest.raises(ParseError, match="duplicate output"):
        parse_program("out c = x out c = y")
    with pytest.raises(ValueError, match="no outputs"):
        parse_program("let a = x + 1.0")


def test_topo_order_parents_after_operands():
    g = parse_program("out c = sin(x*x) + cos(y)")
    order = topo_order(g)
    pos = {nid: i for i, nid in enumerate(order)}
    for n in g.nodes:
        for op in n.operands:
            assert pos[op] < pos[n.id]


def test_subtree_nodes():
    g = parse_program("out c = sin(x*x) + cos(y)")
    sin_id = next(n.id for n in g.nodes if n.op == "sin")
    sub = subtree_nodes(g, sin_id)
    ops = sorted(g.nodes[i].op for i in sub)
    assert ops == ["input", "mul", "sin"]
    with pytest.raises(KeyError):
        subtree_nodes(g, 999)


def test_dfs_order_hand_enumerated():
    # out = sin(x*x) + cos(y): pre-order from the root add node
    g = parse_program("out c = sin(x*x) + cos(y)")
    by_op = {n.id: n.op for n in g.nodes}
    names = [by_op[i] for i in dfs_order(g)]
    assert names == ["add", "sin", "mul", "cos"]
    names_inputs = [by_op[i] for i in dfs_order(g, include_inputs=True)]
    assert names_inputs == ["add", "sin", "mul", "input", "cos", "input"]


def test_round_trip_through_printer():
    src = """
        let u = fract(x / 6.0)
        let v = fract(y / 6.0)
        let edge = gt(u, 0.5) + gt(v, 0.5) - 2.0 * gt(u, 0.5) * gt(v, 0.5)
        out r = edge
        out g = min(u, v)
        out b = abs(u - 0.5) % 0.25
    """
    g1 = parse_program(src, name="board")
    g2 = parse_program(to_source(g1), name="board")
    assert signature(g1) == signature(g2)


def test_builder_validates():
    b = GraphBuilder()
    c = b.const(2.0)
    with pytest.raises(ValueError):
        b.unary("powi", c, power=9)
    with pytest.raises(ValueError):
        b.unary("mystery", c)
    with pytest.raises(ValueError):
        b.binary("select", c, c)
    with pytest.raises(ValueError):
        b.input_var("q")


_EXPR = st.recursive(
    st.sampled_from(["x", "y", "1.5", "0.25", "2.0"]),
    lambda inner: st.builds(
        lambda a, b, op: f"({a} {op} {b})" if op in "+-*" else f"{op}({a})",
        inner, inner,
        st.sampled_from(["+", "-", "*", "sin", "cos", "fract", "exp"])),
    max_leaves=10)


@settings(max_examples=40, deadline=None)
@given(_EXPR)
def test_round_trip_random_expressions(expr):
    g1 = parse_program(f"out c = {expr}")
    g2 = parse_program(to_source(g1))
    assert signature(g1) == signature(g2)


@settings(max_examples=25, deadline=None)
@given(_EXPR)
def test_dfs_covers_all_non_input_nodes(expr):
    g = parse_program(f"out c = {expr}")
    order = dfs_order(g)
    assert sorted(order) == sorted(g.non_input_ids())
