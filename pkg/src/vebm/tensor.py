"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once and evaluated many times with different leaf
bindings. Values are plain numpy arrays; the graph's ``dtype`` (float32 by
default) is applied to every binding, so the same graph can be evaluated in
float64 when a numerical oracle needs the headroom.

    g = Graph()
    y = g.input("Y")
    w = g.param("w")
    out = g.op("sum", g.op("mul", y, w))
    vals = forward(g, {"Y": np.ones(3), "w": np.arange(3.0)})
    grads = backward(g, vals, out)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class GraphError(ValueError):
    """Malformed graph, unbound leaf or inconsistent shapes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, node, phase):
        self.node = node
        self.phase = phase
        super().__init__(f"non-finite {phase} value at node {node.id} ({node.kind}{' ' + node.name if node.name else ''})")


LEAF_KINDS = ("input", "param", "const")


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None

    @property
    def is_leaf(self):
        return self.kind in LEAF_KINDS


class Graph:
    """An append-only, topologically ordered list of op nodes."""

    def __init__(self, dtype=np.float32):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self.dtype = np.dtype(dtype)
        self._names: dict[str, int] = {}

    def _leaf(self, kind, name):
        if name in self._names:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = Node(len(self.nodes), kind, name=name)
        self.nodes.append(node)
        self._names[name] = node.id
        return node.id

    def input(self, name):
        return self._leaf("input", name)

    def param(self, name):
        return self._leaf("param", name)

    def const(self, name):
        """A leaf that never receives a gradient (e.g. batchnorm running stats)."""
        return self._leaf("const", name)

    def op(self, kind, *inputs, name=None, **attrs):
        from .ops import OPS

        if kind not in OPS:
            raise GraphError(f"unknown op {kind!r}")
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"op {kind!r} references missing node {i}")
        node = Node(len(self.nodes), kind, tuple(inputs), dict(attrs), name)
        self.nodes.append(node)
        if name is not None:
            self._names[name] = node.id
        return node.id

    def id_of(self, key):
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < len(self.nodes):
                raise GraphError(f"no node {key}")
            return int(key)
        try:
            return self._names[key]
        except KeyError:
            raise GraphError(f"no node named {key!r}") from None

    def leaves(self, kind=None):
        return [n for n in self.nodes if n.is_leaf and (kind is None or n.kind == kind)]

    def params(self):
        return {n.name: n.id for n in self.nodes if n.kind == "param"}

    def __len__(self):
        return len(self.nodes)


class Values(dict):
    """Forward results: node id -> array, plus per-op caches for backward."""

    def __init__(self, graph, training):
        super().__init__()
        self.graph = graph
        self.training = training
        self.caches: dict[int, Any] = {}
        # per-node side results, e.g. batch statistics from batchnorm in training mode
        self.aux: dict[int, Any] = {}


def _check_finite(node, arr, phase):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(node, phase)


def forward(graph: Graph, bindings, training=False, dtype=None):
    """Evaluate every node. ``bindings`` maps leaf ids or names to arrays."""
    from .ops import OPS

    dtype = np.dtype(dtype) if dtype is not None else graph.dtype
    bound = {graph.id_of(k): v for k, v in bindings.items()}
    vals = Values(graph, training)
    for node in graph.nodes:
        if node.is_leaf:
            if node.id not in bound:
                raise GraphError(f"unbound leaf {node.name!r}")
            arr = np.asarray(bound[node.id], dtype=dtype)
            _check_finite(node, arr, "input")
            vals[node.id] = arr
            continue
        args = [vals[i] for i in node.inputs]
        try:
            out, cache = OPS[node.kind].forward(args, node.attrs, training)
        except GraphError:
            raise
        except (ValueError, IndexError) as exc:
            raise GraphError(f"node {node.id} ({node.kind}): {exc}") from exc
        if isinstance(cache, dict) and "aux" in cache:
            vals.aux[node.id] = cache["aux"]
        _check_finite(node, out, "forward")
        vals[node.id] = out
        vals.caches[node.id] = cache
    return vals


def _requires_grad(graph, wrt):
    """Nodes lying on some path from a ``wrt`` leaf (or any non-const leaf)."""
    needs = [False] * len(graph)
    for node in graph.nodes:
        if node.is_leaf:
            needs[node.id] = node.kind != "const" and (wrt is None or node.id in wrt)
        else:
            needs[node.id] = any(needs[i] for i in node.inputs)
    return needs


def backward(graph: Graph, values: Values, seed_output, seed_grad=None, wrt=None):
    """Reverse sweep from ``seed_output``.

    Returns a dict node id -> gradient for every differentiable node reached.
    The output must be scalar unless an explicit ``seed_grad`` of its shape
    is given. ``wrt`` (ids or names) restricts which leaves need gradients,
    pruning work on the other branches.
    """
    from .ops import OPS

    out_id = graph.id_of(seed_output)
    if out_id not in values:
        raise GraphError("backward called without forward values")
    out_val = values[out_id]
    if seed_grad is None:
        if out_val.size != 1:
            raise GraphError(f"seed output has shape {out_val.shape}; it must be scalar")
        seed_grad = np.ones_like(out_val)
    else:
        seed_grad = np.asarray(seed_grad, dtype=out_val.dtype)
        if seed_grad.shape != out_val.shape:
            raise GraphError(f"seed grad shape {seed_grad.shape} != output shape {out_val.shape}")
    wrt_ids = None if wrt is None else {graph.id_of(k) for k in wrt}
    needs = _requires_grad(graph, wrt_ids)

    grads: dict[int, np.ndarray] = {out_id: seed_grad}
    for node in reversed(graph.nodes[: out_id + 1]):
        g = grads.get(node.id)
        if g is None or node.is_leaf or not needs[node.id]:
            continue
        args = [values[i] for i in node.inputs]
        in_needs = [needs[i] for i in node.inputs]
        in_grads = OPS[node.kind].backward(g, args, values[node.id], values.caches[node.id], node.attrs, in_needs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not needs[i]:
                continue
            gi = np.asarray(gi, dtype=values[i].dtype)
            if gi.shape != values[i].shape:
                raise GraphError(f"op {node.kind} produced grad of shape {gi.shape} for input of shape {values[i].shape}")
            _check_finite(graph.nodes[i], gi, "gradient")
            grads[i] = grads[i] + gi if i in grads else gi
    return {k: v for k, v in grads.items() if needs[k] or k == out_id}


def finite_diff_grad(graph: Graph, bindings, wrt, h=1e-3, output=None, dtype=np.float64, training=False):
    """Central-difference estimate of d(output)/d(wrt), element by element.

    Evaluated in float64 by default so the oracle's own rounding stays well
    below the tolerances it is used to check.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out_id = graph.id_of(output if output is not None else graph.outputs[0])
    key = graph.id_of(wrt)
    base = {graph.id_of(k): np.asarray(v, dtype=dtype) for k, v in bindings.items()}
    x = base[key].copy()
    grad = np.zeros_like(x)

    def f(xv):
        b = dict(base)
        b[key] = xv
        val = forward(graph, b, training=training, dtype=dtype)[out_id]
        if val.size != 1:
            raise GraphError("finite_diff_grad needs a scalar output")
        return float(val.reshape(()))

    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad
