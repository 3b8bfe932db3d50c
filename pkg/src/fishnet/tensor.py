"""Tensors, op nodes and the computational graph.

A :class:`Graph` is built once, symbolically, with shape inference and
attribute validation at construction time. It is then evaluated with
:meth:`Graph.forward` and differentiated with :meth:`Graph.backward`; the same
node list is what the gradient-flow analyzer walks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import functional as F
from .errors import AttributeValidationError, FishNetError, ShapeError

OP_KINDS = (
    "input", "parameter", "conv2d", "maxpool", "avgpool", "upsample_nearest",
    "concat", "channel_reduce", "add", "mul", "relu", "sigmoid", "batchnorm",
    "linear", "global_avg_pool", "flatten", "sum", "softmax_xent",
)


class Tensor:
    """Dense array with an optional gradient of identical shape."""

    def __init__(self, values, requires_grad=False, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        if any(d < 1 for d in self.values.shape):
            raise ShapeError("tensor", "all dims >= 1", self.values.shape)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype})"


@dataclass(eq=False)
class OpNode:
    id: int
    kind: str
    inputs: tuple
    attrs: dict
    name: str
    shape: tuple
    tags: dict = field(default_factory=dict)
    requires_grad: bool = False
    output: Optional[Tensor] = None
    state: dict = field(default_factory=dict)
    _cache: Any = field(default=None, repr=False)

    def __repr__(self):
        return f"OpNode({self.id}, {self.kind}, {self.name!r}, shape={self.shape})"

    @property
    def value(self):
        return None if self.output is None else self.output.values

    @property
    def grad(self):
        return None if self.output is None else self.output.grad


@dataclass
class Block:
    """Bookkeeping for one residual-style unit: ``out = skip + branch``."""

    name: str
    kind: str
    add: OpNode
    branch_nodes: set
    branch_weights: list
    gate_weights: list = field(default_factory=list)


def _need(cond, node, expected, actual, detail=""):
    if not cond:
        raise ShapeError(node, expected, actual, detail)


class Graph:
    """Directed acyclic graph of typed ops; nodes are kept in topological order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[OpNode] = []
        self.blocks: list[Block] = []
        self.loss: Optional[OpNode] = None
        self._scope: list[str] = []
        self._tags: dict = {}
        self._names: dict[str, OpNode] = {}

    # -- construction helpers ------------------------------------------------

    @contextlib.contextmanager
    def scope(self, name=None, **tags):
        """Prefix node names with ``name`` and attach ``tags`` to new nodes."""
        saved = dict(self._tags)
        if name:
            self._scope.append(name)
        self._tags.update(tags)
        try:
            yield
        finally:
            if name:
                self._scope.pop()
            self._tags = saved

    def _qualify(self, name):
        full = ".".join(self._scope + [name])
        if full in self._names:
            i = 1
            while f"{full}_{i}" in self._names:
                i += 1
            full = f"{full}_{i}"
        return full

    def _add(self, kind, inputs, attrs, name, shape, requires_grad=None):
        if any(d < 1 for d in shape):
            raise ShapeError(name or kind, "all output dims >= 1", shape)
        for inp in inputs:
            if inp.id >= len(self.nodes) or self.nodes[inp.id] is not inp:
                raise FishNetError(f"input {inp!r} does not belong to this graph")
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in inputs)
        node = OpNode(
            id=len(self.nodes), kind=kind, inputs=tuple(inputs), attrs=attrs,
            name=self._qualify(name or kind), shape=tuple(shape), tags=dict(self._tags),
            requires_grad=requires_grad,
        )
        self.nodes.append(node)
        self._names[node.name] = node
        return node

    def node(self, name):
        return self._names[name]

    def consumers(self):
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i.id].append(n)
        return out

    def parameters(self):
        return [n for n in self.nodes if n.kind == "parameter"]

    def inputs(self):
        return [n for n in self.nodes if n.kind == "input"]

    # -- leaves -------------------------------------------------------------------

    def input(self, name, shape, dtype=None, requires_grad=False):
        node = self._add("input", (), {"dtype": np.dtype(dtype or self.dtype)}, name,
                         tuple(shape), requires_grad=requires_grad)
        return node

    def parameter(self, name, value):
        value = np.array(value, dtype=self.dtype)
        node = self._add("parameter", (), {}, name, value.shape, requires_grad=True)
        node.output = Tensor(value, requires_grad=True)
        return node

    # -- ops ----------------------------------------------------------------------

    def conv2d(self, x, w, stride=1, padding=0, dilation=1, groups=1, name="conv"):
        if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
            raise AttributeValidationError(
                f"{name}: invalid stride={stride} padding={padding} "
                f"dilation={dilation} groups={groups}")
        _need(len(x.shape) == 4, name, "NCHW input", x.shape)
        _need(len(w.shape) == 4, name, "weight [Cout, Cin/groups, kh, kw]", w.shape)
        n, c, h, wd = x.shape
        cout, cg, kh, kw = w.shape
        if c % groups or cout % groups:
            raise AttributeValidationError(
                f"{name}: groups={groups} must divide Cin={c} and Cout={cout}")
        _need(cg == c // groups, name, f"weight Cin/groups={c // groups}", cg)
        ho = F.conv_out_size(h, kh, stride, padding, dilation)
        wo = F.conv_out_size(wd, kw, stride, padding, dilation)
        attrs = dict(stride=stride, padding=padding, dilation=dilation, groups=groups,
                     kernel=(kh, kw))
        return self._add("conv2d", (x, w), attrs, name, (n, cout, ho, wo))

    def _pool_shape(self, x, kernel, stride, padding, name):
        _need(len(x.shape) == 4, name, "NCHW input", x.shape)
        n, c, h, w = x.shape
        if min(h, w) + 2 * padding < kernel:
            raise ShapeError(name, f"spatial dims >= kernel {kernel}", (h, w))
        return (n, c, F.conv_out_size(h, kernel, stride, padding, 1),
                F.conv_out_size(w, kernel, stride, padding, 1))

    def maxpool(self, x, kernel=2, stride=2, padding=0, name="maxpool"):
        if kernel not in (2, 3) or stride != 2:
            raise AttributeValidationError(f"{name}: kernel must be 2 or 3 and stride 2")
        if not 0 <= padding < kernel:
            raise AttributeValidationError(f"{name}: padding must be in [0, kernel)")
        shape = self._pool_shape(x, kernel, stride, padding, name)
        return self._add("maxpool", (x,), dict(kernel=kernel, stride=stride, padding=padding),
                         name, shape)

    def avgpool(self, x, kernel=2, stride=2, name="avgpool"):
        if kernel not in (2, 3) or stride != 2:
            raise AttributeValidationError(f"{name}: kernel must be 2 or 3 and stride 2")
        shape = self._pool_shape(x, kernel, stride, 0, name)
        return self._add("avgpool", (x,), dict(kernel=kernel, stride=stride), name, shape)

    def upsample_nearest(self, x, factor=2, name="upsample"):
        _need(len(x.shape) == 4, name, "NCHW input", x.shape)
        n, c, h, w = x.shape
        return self._add("upsample_nearest", (x,), dict(factor=factor), name,
                         (n, c, h * factor, w * factor))

    def concat(self, xs, axis=1, name="concat"):
        xs = list(xs)
        if not xs:
            raise ShapeError(name, "at least one input", 0)
        ref = xs[0].shape
        for x in xs[1:]:
            _need(len(x.shape) == len(ref), name, f"rank {len(ref)}", x.shape)
            other = [d for i, d in enumerate(x.shape) if i != axis]
            want = [d for i, d in enumerate(ref) if i != axis]
            _need(other == want, name, f"non-channel dims {tuple(want)}", tuple(other))
        shape = list(ref)
        shape[axis] = sum(x.shape[axis] for x in xs)
        return self._add("concat", xs, dict(axis=axis), name, tuple(shape))

    def channel_reduce(self, x, k, name="channel_reduce"):
        if k < 1:
            raise AttributeValidationError(f"{name}: k must be >= 1, got {k}")
        n, c, h, w = x.shape
        _need(c % k == 0, name, f"channels divisible by k={k}", c)
        return self._add("channel_reduce", (x,), dict(k=k), name, (n, c // k, h, w))

    def add(self, a, b, skip=None, name="add"):
        """Elementwise sum. ``skip`` marks which input (0 or 1) is the identity path."""
        _need(a.shape == b.shape, name, a.shape, b.shape)
        return self._add("add", (a, b), dict(skip=skip), name, a.shape)

    def mul(self, a, b, name="mul"):
        _need(len(a.shape) == len(b.shape), name, f"rank {len(a.shape)}", b.shape)
        for da, db in zip(a.shape, b.shape):
            _need(db in (1, da), name, f"broadcastable to {a.shape}", b.shape)
        return self._add("mul", (a, b), {}, name, a.shape)

    def relu(self, x, name="relu"):
        return self._add("relu", (x,), {}, name, x.shape)

    def sigmoid(self, x, name="sigmoid"):
        return self._add("sigmoid", (x,), {}, name, x.shape)

    def batchnorm(self, x, gamma, beta, name="bn"):
        c = x.shape[1]
        _need(gamma.shape == (c,) and beta.shape == (c,), name, f"affine of shape ({c},)",
              (gamma.shape, beta.shape))
        node = self._add("batchnorm", (x, gamma, beta), {}, name, x.shape)
        node.state["running_mean"] = np.zeros(c, dtype=self.dtype)
        node.state["running_var"] = np.ones(c, dtype=self.dtype)
        return node

    def linear(self, x, w, name="linear"):
        _need(len(x.shape) == 2, name, "(N, in) input", x.shape)
        _need(len(w.shape) == 2 and w.shape[1] == x.shape[1], name,
              f"weight (out, {x.shape[1]})", w.shape)
        return self._add("linear", (x, w), {}, name, (x.shape[0], w.shape[0]))

    def global_avg_pool(self, x, name="gap"):
        n, c = x.shape[:2]
        return self._add("global_avg_pool", (x,), {}, name, (n, c, 1, 1))

    def flatten(self, x, name="flatten"):
        return self._add("flatten", (x,), {}, name, (x.shape[0], int(np.prod(x.shape[1:]))))

    def sum(self, x, name="sum"):
        return self._add("sum", (x,), {}, name, ())

    def softmax_xent(self, logits, labels, name="xent"):
        _need(len(logits.shape) == 2, name, "(N, classes) logits", logits.shape)
        _need(labels.shape == (logits.shape[0],), name, f"labels ({logits.shape[0]},)",
              labels.shape)
        return self._add("softmax_xent", (logits, labels), {}, name, ())

    # -- evaluation ---------------------------------------------------------------

    def forward(self, feeds, training=True, upto=None):
        """Evaluate every node (or nodes up to ``upto``) given input values.

        ``feeds`` maps input nodes or their names to arrays. The batch dimension
        may differ from the one used at construction.
        """
        by_id = {}
        for key, val in feeds.items():
            node = self._names[key] if isinstance(key, str) else key
            by_id[node.id] = val
        last = len(self.nodes) if upto is None else upto.id + 1
        for node in self.nodes[:last]:
            if node.kind == "parameter":
                continue
            if node.kind == "input":
                if node.id not in by_id:
                    raise FishNetError(f"missing feed for input {node.name!r}")
                val = np.asarray(by_id[node.id], dtype=node.attrs["dtype"])
                _need(val.shape[1:] == node.shape[1:], node.name, node.shape, val.shape,
                      "fed value")
                node.output = Tensor(val, requires_grad=node.requires_grad)
                continue
            args = [i.output.values for i in node.inputs]
            out, node._cache = _FORWARD[node.kind](node, args, training)
            node.output = Tensor(out, requires_grad=node.requires_grad)
        return self.nodes[last - 1].value

    def backward(self, loss=None, seed=None, restrict=None):
        """Reverse-mode sweep from ``loss``.

        Gradients reaching a node from several consumers are summed. ``seed``
        overrides the starting gradient (default 1 for a scalar). With
        ``restrict`` (a set of node ids) gradient is only propagated into
        inputs that belong to the set.
        """
        loss = loss or self.loss
        if loss is None:
            raise FishNetError("no loss node given")
        if seed is None:
            if loss.output.values.size != 1:
                raise FishNetError(f"backward from non-scalar node {loss.name!r} needs a seed")
            seed = np.ones_like(loss.output.values)
        for node in self.nodes:
            if node.output is not None:
                node.output.grad = None
        grads = {loss.id: np.asarray(seed, dtype=loss.output.values.dtype)}
        for node in reversed(self.nodes[:loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.requires_grad:
                node.output.grad = g
            if not node.inputs:
                continue
            in_grads = _BACKWARD[node.kind](node, g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if restrict is not None and inp.id not in restrict:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi

    # -- state --------------------------------------------------------------------

    def state_dict(self):
        """Named parameter arrays plus batch-norm running buffers."""
        out = {}
        for node in self.nodes:
            if node.kind == "parameter":
                out[node.name] = node.output.values
            elif node.kind == "batchnorm":
                out[node.name + ".running_mean"] = node.state["running_mean"]
                out[node.name + ".running_var"] = node.state["running_var"]
        return out

    def load_state_dict(self, tensors, strict=True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            if missing or extra:
                raise FishNetError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in tensors.items():
            if name not in own:
                continue
            if own[name].shape != tuple(arr.shape):
                raise ShapeError(name, own[name].shape, tuple(arr.shape), "loaded tensor")
            own[name][...] = arr


# -- op dispatch -------------------------------------------------------------------


def _fw_conv(node, args, training):
    a = node.attrs
    return F.conv2d_forward(args[0], args[1], a["stride"], a["padding"], a["dilation"],
                            a["groups"])


def _fw_bn(node, args, training):
    return F.batchnorm_forward(args[0], args[1], args[2], node.state["running_mean"],
                               node.state["running_var"], training=training)


_FORWARD = {
    "conv2d": _fw_conv,
    "maxpool": lambda n, a, t: F.maxpool_forward(a[0], n.attrs["kernel"], n.attrs["stride"],
                                                 n.attrs["padding"]),
    "avgpool": lambda n, a, t: F.avgpool_forward(a[0], n.attrs["kernel"], n.attrs["stride"]),
    "upsample_nearest": lambda n, a, t: F.upsample_nearest_forward(a[0], n.attrs["factor"]),
    "concat": lambda n, a, t: F.concat_forward(a, n.attrs["axis"]),
    "channel_reduce": lambda n, a, t: F.channel_reduce_forward(a[0], n.attrs["k"]),
    "add": lambda n, a, t: F.add_forward(a[0], a[1]),
    "mul": lambda n, a, t: F.mul_forward(a[0], a[1]),
    "relu": lambda n, a, t: F.relu_forward(a[0]),
    "sigmoid": lambda n, a, t: F.sigmoid_forward(a[0]),
    "batchnorm": _fw_bn,
    "linear": lambda n, a, t: F.linear_forward(a[0], a[1]),
    "global_avg_pool": lambda n, a, t: F.global_avg_pool_forward(a[0]),
    "flatten": lambda n, a, t: F.flatten_forward(a[0]),
    "sum": lambda n, a, t: F.sum_forward(a[0]),
    "softmax_xent": lambda n, a, t: F.softmax_xent_forward(a[0], a[1]),
}

_BACKWARD = {
    "conv2d": lambda n, g: F.conv2d_backward(g, n._cache),
    "maxpool": lambda n, g: F.maxpool_backward(g, n._cache),
    "avgpool": lambda n, g: F.avgpool_backward(g, n._cache),
    "upsample_nearest": lambda n, g: F.upsample_nearest_backward(g, n._cache),
    "concat": lambda n, g: F.concat_backward(g, n._cache),
    "channel_reduce": lambda n, g: F.channel_reduce_backward(g, n._cache),
    "add": lambda n, g: F.add_backward(g, n._cache),
    "mul": lambda n, g: F.mul_backward(g, n._cache),
    "relu": lambda n, g: F.relu_backward(g, n._cache),
    "sigmoid": lambda n, g: F.sigmoid_backward(g, n._cache),
    "batchnorm": lambda n, g: F.batchnorm_backward(g, n._cache),
    "linear": lambda n, g: F.linear_backward(g, n._cache),
    "global_avg_pool": lambda n, g: F.global_avg_pool_backward(g, n._cache),
    "flatten": lambda n, g: F.flatten_backward(g, n._cache),
    "sum": lambda n, g: F.sum_backward(g, n._cache),
    "softmax_xent": lambda n, g: F.softmax_xent_backward(g, n._cache),
}
