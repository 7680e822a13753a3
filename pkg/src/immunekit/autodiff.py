"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Graph` is a topologically ordered list of nodes.  Nodes are added
through builder methods (``g.affine(...)``, ``g.relu(...)``) and referred to by
integer id.  :func:`forward` evaluates the graph for a set of input bindings
and caches every intermediate output; :func:`backward` then returns the
gradient of the loss node with respect to any node, including intermediate
ones such as the output of an attack model.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Layers act on
the last axis, so a batch of examples is a 2-D array with one example per row.
"""

import numpy as np

from . import _kernels
from .errors import GraphStateError, NumericError, ShapeError, StructuralError

LOSS_OPS = ("softmax_ce", "margin_hinge", "sq_dist")


class Node:
    __slots__ = ("id", "op", "inputs", "attrs", "name", "value")

    def __init__(self, id, op, inputs, attrs, name):
        self.id = id
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.name = name
        self.value = None

    def __repr__(self):
        return f"Node({self.id}, {self.op!r}, inputs={self.inputs}, name={self.name!r})"


class Graph:
    """Computation graph built node by node.

    Example::

        g = Graph()
        x = g.input("x", width=2)
        w = g.param("w", np.eye(2))
        b = g.param("b", np.zeros(2))
        g.set_loss(g.relu(g.affine(x, w, b)))
        forward(g, {"x": np.array([-1.0, 2.0])})   # -> array([0., 2.])
    """

    def __init__(self):
        self.nodes = []
        self.inputs = {}
        self.params = {}
        self.loss = None
        self.forwarded = False

    # -- construction -----------------------------------------------------

    def _add(self, op, inputs, name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise StructuralError(f"input node {i} does not exist")
        node = Node(len(self.nodes), op, inputs, attrs, name or f"{op}{len(self.nodes)}")
        self.nodes.append(node)
        self.forwarded = False
        return node.id

    def input(self, name, width=None, labels=False):
        """Declare an input bound at forward time.

        ``width`` fixes the size of the last axis.  ``labels=True`` declares an
        integer class-label vector for a loss node.
        """
        if name in self.inputs or name in self.params:
            raise StructuralError(f"duplicate name {name!r}")
        nid = self._add("input", (), name=name, width=width, labels=labels)
        self.inputs[name] = nid
        return nid

    def param(self, name, value):
        """Declare a parameter tensor held by the graph (may be overridden by bindings)."""
        if name in self.inputs or name in self.params:
            raise StructuralError(f"duplicate name {name!r}")
        nid = self._add("param", (), name=name, data=np.asarray(value, dtype=np.float64))
        self.params[name] = nid
        return nid

    def affine(self, x, w, b, name=None):
        return self._add("affine", (x, w, b), name)

    def bias(self, x, b, name=None):
        return self._add("bias", (x, b), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def tanh(self, x, name=None):
        return self._add("tanh", (x,), name)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def scale(self, x, factor, name=None):
        return self._add("scale", (x,), name, factor=float(factor))

    def clip(self, x, lo=0.0, hi=1.0, name=None):
        return self._add("clip", (x,), name, lo=float(lo), hi=float(hi))

    def ball_clip(self, x, center, radius, lo=0.0, hi=1.0, name=None):
        """Project ``x`` onto the L-inf ball of ``radius`` around ``center``, then onto [lo, hi]."""
        return self._add("ball_clip", (x, center), name, radius=float(radius), lo=float(lo), hi=float(hi))

    def softmax_ce(self, logits, labels, reduction="sum", name=None):
        return self._add("softmax_ce", (logits, labels), name, reduction=_check_reduction(reduction))

    def margin_hinge(self, logits, labels, margin, reduction="mean", name=None):
        """``max(margin - (max_{j != y} z_j - z_y), 0)`` per example."""
        return self._add("margin_hinge", (logits, labels), name, margin=float(margin), reduction=_check_reduction(reduction))

    def sq_dist(self, a, b, reduction="mean", name=None):
        """Squared L2 distance per example, reduced over the batch."""
        return self._add("sq_dist", (a, b), name, reduction=_check_reduction(reduction))

    def set_loss(self, node):
        self.loss = node
        self.forwarded = False
        return node

    # -- inspection -------------------------------------------------------

    def value(self, node):
        if not self.forwarded:
            raise GraphStateError("graph has not been evaluated")
        return self.nodes[self._resolve(node)].value

    def per_example(self, node):
        """Unreduced per-example losses cached by a loss node."""
        n = self.nodes[self._resolve(node)]
        if n.op not in LOSS_OPS:
            raise StructuralError(f"node {n.name!r} is not a loss node")
        if not self.forwarded:
            raise GraphStateError("graph has not been evaluated")
        return n.attrs["_per_example"]

    def _resolve(self, key):
        if isinstance(key, str):
            if key in self.inputs:
                return self.inputs[key]
            if key in self.params:
                return self.params[key]
            raise StructuralError(f"no input or parameter named {key!r}")
        key = int(key)
        if not 0 <= key < len(self.nodes):
            raise StructuralError(f"node {key} does not exist")
        return key


def _check_reduction(reduction):
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    return reduction


def _reduce(per_ex, reduction):
    total = per_ex.sum()
    return total / per_ex.shape[0] if reduction == "mean" else total


def _rows(a):
    return a.reshape(-1, a.shape[-1])


# ------------------------------------------------------------------------
# forward


def _bind_input(node, value):
    if node.attrs["labels"]:
        arr = np.asarray(value)
        if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError(f"labels for {node.name!r} must be a 1-D integer array")
        return arr.astype(np.int64, copy=False)
    arr = np.asarray(value, dtype=np.float64)
    width = node.attrs["width"]
    if width is not None and (arr.ndim == 0 or arr.shape[-1] != width):
        raise ShapeError(f"input {node.name!r} expects last dimension {width}, got shape {arr.shape}")
    return arr


def _eval(node, vals):
    op = node.op
    a = node.attrs
    if op == "affine":
        x, w, b = vals
        if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"affine {node.name!r}: x{x.shape} w{w.shape} b{b.shape}")
        return x @ w + b
    if op == "bias":
        x, b = vals
        if x.shape[-1:] != b.shape:
            raise ShapeError(f"bias {node.name!r}: x{x.shape} b{b.shape}")
        return x + b
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sigmoid":
        z = vals[0]
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if op == "add":
        if vals[0].shape != vals[1].shape:
            raise ShapeError(f"add {node.name!r}: {vals[0].shape} vs {vals[1].shape}")
        return vals[0] + vals[1]
    if op == "scale":
        return a["factor"] * vals[0]
    if op == "clip":
        return np.clip(vals[0], a["lo"], a["hi"])
    if op == "ball_clip":
        x, c = vals
        if x.shape != c.shape:
            raise ShapeError(f"ball_clip {node.name!r}: {x.shape} vs {c.shape}")
        return _kernels.clip_to_ball(x, c, a["radius"], a["lo"], a["hi"])
    if op == "softmax_ce":
        z, y = vals
        z = _rows(z)
        if y.shape[0] != z.shape[0] or (y.size and (y.min() < 0 or y.max() >= z.shape[1])):
            raise ShapeError(f"softmax_ce {node.name!r}: labels do not match logits {z.shape}")
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=1, keepdims=True)
        p = e / s
        per_ex = (np.log(s[:, 0]) + zmax[:, 0]) - z[np.arange(z.shape[0]), y]
        a["_probs"] = p
        a["_per_example"] = per_ex
        return np.asarray(_reduce(per_ex, a["reduction"]))
    if op == "margin_hinge":
        z, y = vals
        z = _rows(z)
        if y.shape[0] != z.shape[0]:
            raise ShapeError(f"margin_hinge {node.name!r}: labels do not match logits {z.shape}")
        idx = np.arange(z.shape[0])
        other = z.copy()
        other[idx, y] = -np.inf
        j = other.argmax(axis=1)
        per_ex = np.maximum(a["margin"] - (z[idx, j] - z[idx, y]), 0.0)
        a["_other"] = j
        a["_per_example"] = per_ex
        return np.asarray(_reduce(per_ex, a["reduction"]))
    if op == "sq_dist":
        d = vals[0] - vals[1]
        per_ex = (_rows(d) ** 2).sum(axis=1)
        a["_per_example"] = per_ex
        return np.asarray(_reduce(per_ex, a["reduction"]))
    raise StructuralError(f"unknown op {op!r}")


def forward(graph, bindings):
    """Evaluate ``graph`` and return the loss-node output.

    ``bindings`` maps input names (or node ids) to arrays; parameter nodes may
    also be overridden this way.  All intermediate outputs are cached for
    :func:`backward`.
    """
    if graph.loss is None:
        raise StructuralError("graph has no loss node")
    bound = {graph._resolve(k): v for k, v in bindings.items()}
    missing = [n for n, i in graph.inputs.items() if i not in bound]
    if missing:
        raise StructuralError(f"unbound inputs: {missing}")
    graph.forwarded = False
    for node in graph.nodes:
        if node.op == "input":
            node.value = _bind_input(node, bound[node.id])
            if node.attrs["labels"]:
                continue
        elif node.op == "param":
            node.value = np.asarray(bound[node.id], dtype=np.float64) if node.id in bound else node.attrs["data"]
        else:
            node.value = _eval(node, [graph.nodes[i].value for i in node.inputs])
        if not np.all(np.isfinite(node.value)):
            raise NumericError(f"non-finite value at node {node.name!r}")
    graph.forwarded = True
    return graph.nodes[graph.loss].value


# ------------------------------------------------------------------------
# backward


def _ancestors(graph, root):
    seen = {root}
    stack = [root]
    while stack:
        for i in graph.nodes[stack.pop()].inputs:
            if i not in seen:
                seen.add(i)
                stack.append(i)
    return seen


def _vjp(node, vals, out, dy):
    """Return one gradient (or None) per input of ``node``."""
    op = node.op
    a = node.attrs
    if op == "affine":
        x, w, _ = vals
        dx = dy @ w.T
        x2, d2 = _rows(x), _rows(dy)
        return dx, x2.T @ d2, d2.sum(axis=0)
    if op == "bias":
        return dy, _rows(dy).sum(axis=0)
    if op == "relu":
        return (dy * (vals[0] > 0),)
    if op == "tanh":
        return (dy * (1.0 - out * out),)
    if op == "sigmoid":
        return (dy * out * (1.0 - out),)
    if op == "add":
        return dy, dy
    if op == "scale":
        return (a["factor"] * dy,)
    if op == "clip":
        x = vals[0]
        return (dy * ((x >= a["lo"]) & (x <= a["hi"])),)
    if op == "ball_clip":
        x, c = vals
        r, lo, hi = a["radius"], a["lo"], a["hi"]
        low = np.maximum(c - r, lo)
        up = np.minimum(c + r, hi)
        inside = (x >= low) & (x <= up)
        ball_low = (x < low) & (c - r > lo)
        ball_up = (x > up) & (c + r < hi)
        return dy * inside, dy * (ball_low | ball_up)
    if op == "softmax_ce":
        z = vals[0]
        y = vals[1]
        g = a["_probs"].copy()
        g[np.arange(g.shape[0]), y] -= 1.0
        scale = dy / g.shape[0] if a["reduction"] == "mean" else dy
        return (scale * g).reshape(z.shape), None
    if op == "margin_hinge":
        z = vals[0]
        y = vals[1]
        g = np.zeros(_rows(z).shape)
        active = a["_per_example"] > 0
        idx = np.nonzero(active)[0]
        g[idx, y[idx]] += 1.0
        g[idx, a["_other"][idx]] -= 1.0
        scale = dy / g.shape[0] if a["reduction"] == "mean" else dy
        return (scale * g).reshape(z.shape), None
    if op == "sq_dist":
        d = vals[0] - vals[1]
        n = _rows(d).shape[0]
        g = 2.0 * d * (dy / n if a["reduction"] == "mean" else dy)
        return g, -g
    raise StructuralError(f"no gradient rule for op {op!r}")


def backward(graph, at=None, upstream=None):
    """Gradients of the loss node with respect to the nodes in ``at``.

    ``at`` is an iterable of node ids or input/parameter names.  When ``at`` is
    None, every node reachable from the loss receives a gradient; otherwise only
    the paths leading to the requested nodes are traversed.  A non-scalar loss
    node is seeded with ``upstream`` (default: all ones, i.e. the gradient of
    the sum of its entries).

    Returns a dict keyed exactly as ``at`` was given (node ids when ``at`` is
    None).
    """
    if not graph.forwarded:
        raise GraphStateError("backward called before forward")
    reach = _ancestors(graph, graph.loss)
    if at is None:
        keys = sorted(i for i in reach if graph.nodes[i].op != "input" or not graph.nodes[i].attrs["labels"])
        ids = {k: k for k in keys}
    else:
        keys = list(at)
        ids = {k: graph._resolve(k) for k in keys}
        for k, i in ids.items():
            if i not in reach:
                raise StructuralError(f"node {graph.nodes[i].name!r} is not reachable from the loss node")
    wanted = set(ids.values())

    # nodes lying on a path from a wanted node to the loss
    leads = [False] * len(graph.nodes)
    for node in graph.nodes:
        leads[node.id] = node.id in wanted or any(leads[i] for i in node.inputs)

    loss_node = graph.nodes[graph.loss]
    seed = np.ones_like(loss_node.value) if upstream is None else np.asarray(upstream, dtype=np.float64)
    if seed.shape != loss_node.value.shape:
        raise ShapeError(f"upstream gradient shape {seed.shape} != loss shape {loss_node.value.shape}")
    grads = {graph.loss: seed}
    for node in reversed(graph.nodes[: graph.loss + 1]):
        if node.id not in grads or not node.inputs:
            continue
        if not any(leads[i] for i in node.inputs):
            continue
        dy = grads[node.id]
        vals = [graph.nodes[i].value for i in node.inputs]
        for i, g in zip(node.inputs, _vjp(node, vals, node.value, dy)):
            if g is None or not leads[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + g
            else:
                grads[i] = g
    out = {}
    for k, i in ids.items():
        g = grads.get(i)
        out[k] = np.zeros_like(graph.nodes[i].value, dtype=np.float64) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ------------------------------------------------------------------------
# oracle and projection


def finite_diff_grad(fn, point, h=1e-5):
    """Central-difference gradient of scalar ``fn`` at ``point``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(fn(x))
        flat[k] = orig - h
        fm = float(fn(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def clip_to_ball(x, center, tau, valid_range=(0.0, 1.0)):
    """Elementwise ``min(max(x, center - tau, lo), center + tau, hi)``."""
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != center.shape:
        raise ShapeError(f"x{x.shape} and center{center.shape} differ")
    lo, hi = valid_range
    if tau < 0 or lo > hi:
        raise ValueError("need tau >= 0 and lo <= hi")
    return _kernels.clip_to_ball(x, center, tau, lo, hi)
