"""Static gradient-flow analysis: which nodes receive the loss gradient through
gradient-transparent operations only, and which convolutions isolate them.

Edge labels:

* transparent: identity skip of a residual add, plain add, concat, max/avg
  pooling, global average pooling, nearest up-sampling, channel reduction,
  flatten and sum; also every edge into the task head (nodes tagged
  ``part="classifier"``), which is treated as part of the loss;
* opaque: convolution, linear, batch norm, relu, sigmoid, mul, softmax
  cross-entropy, and the branch input of a residual add.

An isolated convolution is a conv that is the only obstacle between the loss
and some feature: with every other conv unit (the conv plus the BN/ReLU nodes
chained exclusively to it) relabelled transparent, removing this one conv unit
makes a non-input feature unreachable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .builder import restore
from .errors import AnalysisError

TRANSPARENT_KINDS = frozenset({
    "concat", "maxpool", "avgpool", "global_avg_pool", "upsample_nearest",
    "channel_reduce", "flatten", "sum",
})
_LEAVES = ("input", "parameter")


@dataclass(frozen=True)
class EdgeLabel:
    transparent: bool
    reason: str


@dataclass
class BPReport:
    loss: int
    verdicts: dict
    witnesses: dict
    iconvs: list
    labels: dict = field(repr=False, default_factory=dict)
    _graph: object = field(repr=False, default=None)

    def is_direct(self, node):
        return self.verdicts.get(_id(node)) == "direct"

    def verdict(self, node):
        return self.verdicts.get(_id(node))

    def witness(self, node):
        """Nodes on the transparent path, loss first. None for blocked nodes."""
        ids = self.witnesses.get(_id(node))
        if ids is None:
            return None
        return [self._graph.nodes[i] for i in ids]

    def blocked(self):
        return [i for i, v in self.verdicts.items() if v == "blocked"]

    def iconv_nodes(self):
        return [self._graph.nodes[i] for i in self.iconvs]


def _id(node):
    return node if isinstance(node, int) else node.id


def classify_edges(graph):
    """Label every edge ``(consumer_id, input_index)``; deterministic."""
    labels = {}
    for node in graph.nodes:
        for idx, _ in enumerate(node.inputs):
            labels[(node.id, idx)] = _label(node, idx)
    return labels


def _label(node, idx):
    if node.tags.get("part") == "classifier":
        return EdgeLabel(True, "task head")
    if node.kind in TRANSPARENT_KINDS:
        return EdgeLabel(True, node.kind)
    if node.kind == "add":
        skip = node.attrs.get("skip")
        if skip is None:
            return EdgeLabel(True, "add")
        if idx == skip:
            return EdgeLabel(True, "identity skip")
        return EdgeLabel(False, "residual branch")
    if node.kind == "conv2d":
        return EdgeLabel(False, "convolution")
    return EdgeLabel(False, node.kind)


def _reach(graph, root, transparent):
    """BFS from ``root`` against edge direction over edges in ``transparent``.

    Returns ``{node_id: (consumer_id, input_index)}`` parent pointers; the root
    maps to None.
    """
    parent = {root: None}
    queue = deque([root])
    nodes = graph.nodes
    while queue:
        cur = queue.popleft()
        for idx, inp in enumerate(nodes[cur].inputs):
            if inp.id in parent or (cur, idx) not in transparent:
                continue
            parent[inp.id] = (cur, idx)
            queue.append(inp.id)
    return parent


def _ancestors(graph, root):
    seen = {root}
    stack = [root]
    while stack:
        for inp in graph.nodes[stack.pop()].inputs:
            if inp.id not in seen:
                seen.add(inp.id)
                stack.append(inp.id)
    return seen


def conv_unit(graph, conv, consumers=None):
    """The conv plus BN/ReLU nodes chained exclusively to it on either side."""
    consumers = consumers or graph.consumers()
    unit = [conv]
    up = conv.inputs[0]
    while up.kind in ("batchnorm", "relu") and len(consumers[up.id]) == 1:
        unit.append(up)
        up = up.inputs[0]
    down = conv
    while len(consumers[down.id]) == 1 and consumers[down.id][0].kind in ("batchnorm", "relu"):
        down = consumers[down.id][0]
        unit.append(down)
    return unit


def _unit_edges(unit):
    # data edge (index 0) of each node in the unit
    return {(n.id, 0) for n in unit}


def analyze(graph, loss=None):
    """Classify every ancestor of ``loss`` as direct or blocked and list I-convs."""
    loss = loss or graph.loss
    if loss is None or loss.shape != ():
        raise AnalysisError(f"loss must be a scalar node, got {loss!r}")
    labels = classify_edges(graph)
    transparent = {e for e, lab in labels.items() if lab.transparent}
    parent = _reach(graph, loss.id, transparent)
    ancestors = _ancestors(graph, loss.id)

    verdicts, witnesses = {}, {}
    for nid in sorted(ancestors):
        if nid in parent:
            verdicts[nid] = "direct"
            path = [nid]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]][0])
            witnesses[nid] = path[::-1]
        else:
            verdicts[nid] = "blocked"

    consumers = graph.consumers()
    convs = [n for n in graph.nodes if n.kind == "conv2d" and n.id in ancestors
             and n.tags.get("part") != "classifier"]
    units = {c.id: conv_unit(graph, c, consumers) for c in convs}
    all_flipped = set(transparent)
    for unit in units.values():
        all_flipped |= _unit_edges(unit)
    full = set(_reach(graph, loss.id, all_flipped))
    iconvs = []
    for c in convs:
        without = set(transparent)
        for other, unit in units.items():
            if other != c.id:
                without |= _unit_edges(unit)
        lost = full - set(_reach(graph, loss.id, without))
        inside = {n.id for n in units[c.id]}
        if any(graph.nodes[i].kind not in _LEAVES and i not in inside for i in lost):
            iconvs.append(c.id)
    return BPReport(loss.id, verdicts, witnesses, iconvs, labels, graph)


# -- numerical witness check ------------------------------------------------------


def _route(consumer, idx, g, graph):
    """Adjoint of one transparent edge, written independently of the engine."""
    kind = consumer.kind
    src = consumer.inputs[idx]
    x = src.output.values
    if kind == "add":
        return g
    if kind == "concat":
        lo = sum(consumer.inputs[j].output.values.shape[1] for j in range(idx))
        return g[:, lo:lo + x.shape[1]]
    if kind == "sum":
        return np.full(x.shape, g)
    if kind == "flatten":
        return g.reshape(x.shape)
    if kind == "global_avg_pool":
        return np.broadcast_to(g, x.shape) / (x.shape[2] * x.shape[3])
    if kind == "channel_reduce":
        k = consumer.attrs["k"]
        out = np.empty(x.shape)
        for c in range(x.shape[1]):
            out[:, c] = g[:, c // k]
        return out
    if kind == "upsample_nearest":
        f = consumer.attrs["factor"]
        out = np.zeros(x.shape)
        for di in range(f):
            for dj in range(f):
                out += g[:, :, di::f, dj::f]
        return out
    if kind in ("maxpool", "avgpool"):
        k, s = consumer.attrs["kernel"], consumer.attrs["stride"]
        p = consumer.attrs.get("padding", 0)
        n, c, h, w = x.shape
        fill = -np.inf if kind == "maxpool" else 0.0
        xp = np.full((n, c, h + 2 * p, w + 2 * p), fill)
        xp[:, :, p:p + h, p:p + w] = x
        out = np.zeros_like(xp)
        for i in range(g.shape[2]):
            for j in range(g.shape[3]):
                win = xp[:, :, i * s:i * s + k, j * s:j * s + k].reshape(n, c, -1)
                if kind == "avgpool":
                    out[:, :, i * s:i * s + k, j * s:j * s + k] += g[:, :, i, j][..., None, None] / (k * k)
                    continue
                first = win.argmax(axis=2)
                for a in range(n):
                    for b in range(c):
                        r, q = divmod(int(first[a, b]), k)
                        out[a, b, i * s + r, j * s + q] += g[a, b, i, j]
        return out[:, :, p:p + h, p:p + w]
    raise AnalysisError(f"edge into {consumer.kind} node {consumer.name!r} is not gradient-transparent")


def _random_feeds(graph, rng):
    feeds = {}
    for node in graph.inputs():
        if np.issubdtype(node.attrs["dtype"], np.integer):
            feeds[node] = np.zeros(node.shape, dtype=node.attrs["dtype"])
        else:
            feeds[node] = rng.standard_normal(node.shape)
    return feeds


def verify_direct_bp_numerical(graph, node, loss=None, feeds=None, report=None, seed=0,
                               tol=1e-12):
    """Check the witness path of ``node`` numerically.

    Residual-branch weights of every block whose add lies on the path are
    zeroed, the engine's gradient at the path head is pushed back through the
    path (plus those blocks' branches) only, and the result at ``node`` is
    compared with the same gradient routed through independently written
    pooling/up-sampling/concat/reduction adjoints. Returns True/False, or None
    when the node has no witness (blocked).
    """
    loss = loss or graph.loss
    report = report or analyze(graph, loss)
    path = report.witness(node)
    if path is None:
        return None
    start = 0
    while start < len(path) - 1 and path[start].tags.get("part") == "classifier":
        start += 1
    sub = path[start:]
    on_path = {n.id for n in sub}
    blocks = [b for b in graph.blocks if b.add.id in on_path]
    saved = {}
    for b in blocks:
        for name in b.branch_weights:
            p = graph.node(name)
            saved[name] = p.output.values.copy()
            p.output.values[...] = 0
    try:
        if feeds is None:
            feeds = _random_feeds(graph, np.random.default_rng(seed))
        graph.forward(feeds, training=True, upto=loss)
        graph.backward(loss)
        head = sub[0]
        g_head = np.array(head.output.grad, dtype=np.float64)
        closure = set(on_path)
        for b in blocks:
            closure |= b.branch_nodes
        graph.backward(head, seed=head.output.grad.copy(), restrict=closure)
        target = sub[-1]
        engine = np.asarray(target.output.grad, dtype=np.float64)
        expected = g_head
        for cur, nxt in zip(sub[:-1], sub[1:]):
            idx = next(i for i, inp in enumerate(cur.inputs)
                       if inp.id == nxt.id and (cur.id, i) in report.labels
                       and report.labels[(cur.id, i)].transparent)
            expected = _route(cur, idx, expected, graph)
        scale = max(1.0, float(np.abs(expected).max()))
        return bool(engine.shape == expected.shape
                    and np.abs(engine - expected).max() <= tol * scale)
    finally:
        restore(graph, saved)
