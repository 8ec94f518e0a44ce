"""Direct (unsmoothed) evaluation of a program graph and reverse-mode
gradients over it.

The forward pass is the reference semantics of the language: it is what
'no antialiasing' renders, what the supersampling oracle averages, and what
the affine correlation estimator differentiates. Everything is vectorized:
input values may be scalars or same-shaped numpy arrays.
"""
from __future__ import annotations

import numpy as np

from .ir import ProgramGraph


def op_value(op: str, args: list, power: int | None = None):
    """Evaluate one op on numpy values."""
    if op == "add":
        return args[0] + args[1]
    if op == "sub":
        return args[0] - args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "div":
        return args[0] / args[1]
    if op == "mod":
        a, b = args
        return a - b * np.floor(a / b)
    if op == "neg":
        return -args[0]
    if op == "recip":
        return 1.0 / args[0]
    if op == "powi":
        return args[0] ** power
    if op == "sqrt":
        return np.sqrt(args[0])
    if op == "sin":
        return np.sin(args[0])
    if op == "cos":
        return np.cos(args[0])
    if op == "tan":
        return np.tan(args[0])
    if op == "sinh":
        return np.sinh(args[0])
    if op == "cosh":
        return np.cosh(args[0])
    if op == "tanh":
        return np.tanh(args[0])
    if op == "exp":
        return np.exp(args[0])
    if op == "log":
        return np.log(args[0])
    if op == "fract":
        return args[0] - np.floor(args[0])
    if op == "floor":
        return np.floor(args[0])
    if op == "ceil":
        return np.ceil(args[0])
    if op == "heaviside":
        return (np.asarray(args[0]) > 0).astype(float)
    if op == "cmp_gt":
        return (np.asarray(args[0]) > np.asarray(args[1])).astype(float)
    if op == "cmp_ge":
        return (np.asarray(args[0]) >= np.asarray(args[1])).astype(float)
    if op == "cmp_lt":
        return (np.asarray(args[0]) < np.asarray(args[1])).astype(float)
    if op == "cmp_le":
        return (np.asarray(args[0]) <= np.asarray(args[1])).astype(float)
    if op == "select":
        c, a, b = args
        return c * a + (1.0 - c) * b
    raise ValueError(f"cannot evaluate op '{op}'")


def node_values(g: ProgramGraph, inputs: dict[str, np.ndarray]) -> list:
    """Forward pass; returns one value (scalar or array) per node id."""
    values: list = [None] * len(g)
    for node in g.nodes:
        if node.op == "const":
            values[node.id] = node.value
        elif node.op == "input":
            if node.name not in inputs:
                raise KeyError(f"no value supplied for input '{node.name}'")
            values[node.id] = np.asarray(inputs[node.name], dtype=float)
        else:
            args = [values[i] for i in node.operands]
            values[node.id] = op_value(node.op, args, node.power)
    return values


def direct_outputs(g: ProgramGraph,
                   inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    values = node_values(g, inputs)
    return {name: values[nid] for name, nid in g.outputs}


def _partials(op: str, args: list, value, power: int | None):
    """d(op)/d(arg_i) evaluated at the forward values. Piecewise-constant
    ops differentiate to zero almost everywhere."""
    if op == "add":
        return (1.0, 1.0)
    if op == "sub":
        return (1.0, -1.0)
    if op == "mul":
        return (args[1], args[0])
    if op == "div":
        return (1.0 / args[1], -args[0] / (args[1] * args[1]))
    if op == "mod":
        return (1.0, -np.floor(args[0] / args[1]))
    if op == "neg":
        return (-1.0,)
    if op == "recip":
        return (-1.0 / (args[0] * args[0]),)
    if op == "powi":
        return (power * args[0] ** (power - 1),)
    if op == "sqrt":
        return (0.5 / np.sqrt(args[0]),)
    if op == "sin":
        return (np.cos(args[0]),)
    if op == "cos":
        return (-np.sin(args[0]),)
    if op == "tan":
        return (1.0 + value * value,)
    if op == "sinh":
        return (np.cosh(args[0]),)
    if op == "cosh":
        return (np.sinh(args[0]),)
    if op == "tanh":
        return (1.0 - value * value,)
    if op == "exp":
        return (value,)
    if op == "log":
        return (1.0 / args[0],)
    if op == "fract":
        return (1.0,)
    if op in ("floor", "ceil", "heaviside"):
        return (0.0,)
    if op in ("cmp_gt", "cmp_ge", "cmp_lt", "cmp_le"):
        return (0.0, 0.0)
    if op == "select":
        c, a, b = args
        return (a - b, c, 1.0 - c)
    raise ValueError(f"cannot differentiate op '{op}'")


def gradients(g: ProgramGraph, values: list, target: int,
              wrt: list[int]) -> dict[int, np.ndarray]:
    """Reverse-mode d(target)/d(node) for each node id in wrt.

    `values` is the list from node_values. Returns arrays broadcast to the
    evaluation shape (piecewise-flat ops contribute zero a.e.).
    """
    shape = np.shape(values[target])
    adjoint: dict[int, np.ndarray] = {target: np.ones(shape)}
    wanted = set(wrt)
    for node in reversed(g.nodes[: target + 1]):
        adj = adjoint.get(node.id)
        if adj is None or node.op in ("const", "input"):
            continue
        args = [values[i] for i in node.operands]
        parts = _partials(node.op, args, values[node.id], node.power)
        for operand, part in zip(node.operands, parts):
            contrib = adj * part
            if operand in adjoint:
                adjoint[operand] = adjoint[operand] + contrib
            else:
                adjoint[operand] = contrib
    zero = np.zeros(shape)
    return {nid: adjoint.get(nid, zero) for nid in wanted}
