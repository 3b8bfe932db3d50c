"""Assemble FishNet (and the two control networks) as computational graphs.

Stage ``s`` always has spatial size ``input / 2**(s + 1)``. The tail walks
stages 0..S-1, the body walks back from S-1 to 0 through UR-blocks, and the
head walks 0..S-1 again through DR-blocks. Every residual-style unit is
registered on ``graph.blocks`` so tests and the analyzer can find its branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FishNetConfig
from .errors import BuildError, ConfigError
from .tensor import Block, Graph, OpNode


@dataclass
class StageFeatures:
    tail: list = field(default_factory=list)
    body: list = field(default_factory=list)
    head: list = field(default_factory=list)

    def items(self):
        for part in ("tail", "body", "head"):
            for s, node in enumerate(getattr(self, part)):
                yield f"{part}[{s}]", node


@dataclass
class Network:
    config: FishNetConfig
    graph: Graph
    image: OpNode
    labels: OpNode
    stem: OpNode
    task_feature: OpNode
    logits: OpNode
    loss: OpNode
    features: StageFeatures

    def forward(self, x, y=None, training=True):
        """Run the graph; returns the mean loss (or None when ``y`` is None)."""
        if y is None:
            y = np.zeros(len(x), dtype=np.int64)
            self.graph.forward({self.image: x, self.labels: y}, training=training,
                               upto=self.logits)
            return None
        return float(self.graph.forward({self.image: x, self.labels: y}, training=training))

    def backward(self):
        self.graph.backward(self.loss)

    def parameters(self):
        return {n.name: n.output.values for n in self.graph.parameters()}

    def gradients(self):
        return {n.name: n.output.grad for n in self.graph.parameters()
                if n.output.grad is not None}


class _Builder:
    def __init__(self, cfg, batch, dtype, seed):
        self.cfg = cfg
        self.g = Graph(dtype=dtype)
        self.rng = np.random.default_rng(seed)
        self.batch = batch

    # -- primitives ---------------------------------------------------------------

    def weight(self, name, cout, cin, kh, kw, std=None):
        if std is None:
            std = np.sqrt(2.0 / (cin * kh * kw))
        return self.g.parameter(name, self.rng.normal(0.0, std, (cout, cin, kh, kw)))

    def conv(self, x, cout, kernel, stride=1, padding=0, dilation=1, groups=1, name="conv",
             std=None):
        cin = x.shape[1]
        w = self.weight(name + ".w", cout, cin // groups, kernel, kernel, std)
        return self.g.conv2d(x, w, stride=stride, padding=padding, dilation=dilation,
                             groups=groups, name=name)

    def bn(self, x, name="bn"):
        c = x.shape[1]
        gamma = self.g.parameter(name + ".gamma", np.ones(c))
        beta = self.g.parameter(name + ".beta", np.zeros(c))
        return self.g.batchnorm(x, gamma, beta, name=name)

    def bn_relu(self, x, name):
        return self.g.relu(self.bn(x, name=name), name=name + "_relu")

    def bottleneck_branch(self, x, out_ch, stride=1, dilation=1, groups=1):
        """BN-ReLU-conv1x1 -> BN-ReLU-conv3x3 -> BN-ReLU-conv1x1, width out/4."""
        width = out_ch // 4
        if width < 1:
            raise BuildError(f"bottleneck output {out_ch} too narrow")
        if width % groups:
            raise BuildError(f"bottleneck width {width} not divisible by groups={groups}")
        h = self.conv(self.bn_relu(x, "bn1"), width, 1, name="conv1")
        h = self.conv(self.bn_relu(h, "bn2"), width, 3, stride=stride, padding=dilation,
                      dilation=dilation, groups=groups, name="conv2")
        return self.conv(self.bn_relu(h, "bn3"), out_ch, 1, name="conv3")

    def _branch(self, x, out_ch, stride, dilation, groups):
        start = len(self.g.nodes)
        with self.g.scope("branch", role="branch"):
            out = self.bottleneck_branch(x, out_ch, stride, dilation, groups)
        nodes = self.g.nodes[start:]
        weights = [n.name for n in nodes if n.kind == "parameter" and n.name.endswith(".w")]
        return out, {n.id for n in nodes}, weights

    def residual_block(self, x, out_ch, stride=1, dilation=1, groups=1, part="tail",
                       name="block"):
        cin = x.shape[1]
        project = cin != out_ch or stride > 1
        if project and part not in ("tail", "stem"):
            raise BuildError(
                f"{part} block {name!r} would need a projection conv ({cin}->{out_ch}, "
                f"stride {stride}); only tail blocks may project")
        with self.g.scope(name, part=part):
            branch, ids, weights = self._branch(x, out_ch, stride, dilation, groups)
            skip = x
            if project:
                with self.g.scope(role="projection"):
                    skip = self.conv(x, out_ch, 1, stride=stride, name="proj")
            out = self.g.add(skip, branch, skip=0, name="add")
        self.g.blocks.append(Block(out.name.rsplit(".", 1)[0], "residual", out, ids, weights))
        return out

    def transfer(self, x, stage, name="transfer"):
        groups = self.cfg.groups_for(x.shape[1] // 4, stage) if self.cfg.group_width else 1
        return self.residual_block(x, x.shape[1], groups=groups, part="transfer", name=name)

    # -- FishNet pieces -------------------------------------------------------------

    def stem(self, image):
        c0 = self.cfg.channels[0]
        with self.g.scope("stem", part="stem", role="stem"):
            if self.cfg.stem == "conv7x7_s2":
                return self.conv(image, c0, 7, stride=2, padding=3, name="conv7x7")
            x = self.residual_block(image, c0, stride=2, part="stem", name="res0")
            return self.residual_block(x, c0, part="stem", name="res1")

    def downsample(self, x, out_ch, stage):
        kind = self.cfg.downsample
        with self.g.scope(f"down{stage}", role="downsample"):
            if kind == "max2":
                return self.g.maxpool(x, 2, 2)
            if kind == "max3":
                return self.g.maxpool(x, 3, 2, padding=1)
            if kind == "avg2":
                return self.g.avgpool(x, 2, 2)
            return self.conv(x, out_ch, 3, stride=2, padding=1, name="conv_s2")

    def bridge(self, x):
        """SE-style bridge: x * gate(gap(x)) + F(x)."""
        c = x.shape[1]
        hidden = max(1, c // self.cfg.se_ratio)
        with self.g.scope("bridge", part="bridge"):
            pooled = self.g.global_avg_pool(x, name="pool")
            start = len(self.g.nodes)
            with self.g.scope("gate", role="gate"):
                h = self.g.relu(self.conv(pooled, hidden, 1, name="squeeze"))
                gate = self.g.sigmoid(self.conv(h, c, 1, name="excite"))
            gate_w = [n.name for n in self.g.nodes[start:] if n.kind == "parameter"]
            gated = self.g.mul(x, gate, name="scale")
            branch, ids, weights = self._branch(x, c, 1, 1, self._groups(c, self.cfg.num_stages - 1))
            out = self.g.add(gated, branch, skip=0, name="add")
        self.g.blocks.append(Block("bridge", "bridge", out, ids, weights, gate_w))
        return out

    def _groups(self, channels, stage):
        return self.cfg.groups_for(channels // 4, stage)

    def ur_block(self, body, tail, stage):
        cfg = self.cfg
        k = cfg.reduction_k[stage]
        with self.g.scope(f"body.s{stage}", part="body"):
            t = self.transfer(tail, stage)
            cat = self.g.concat([body, t], name="concat")
            if cat.shape[1] % k:
                raise ConfigError(
                    f"UR-block input channels {cat.shape[1]} not divisible by k={k}", stage)
            out_ch = cat.shape[1] // k
            with self.g.scope("refine0"):
                reduced = self.g.channel_reduce(cat, k, name="reduce")
                m, ids, weights = self._branch(cat, out_ch, 1, cfg.body_dilation,
                                               self._groups(out_ch, stage))
                x = self.g.add(reduced, m, skip=0, name="add")
            self.g.blocks.append(Block(f"body.s{stage}.refine0", "ur", x, ids, weights))
            for i in range(1, cfg.body_blocks[stage]):
                x = self.residual_block(x, out_ch, dilation=cfg.body_dilation,
                                        groups=self._groups(out_ch, stage), part="body",
                                        name=f"refine{i}")
            return self.g.upsample_nearest(x, 2, name="up")

    def dr_block(self, head, body, stage):
        with self.g.scope(f"head.s{stage}", part="head"):
            t = self.transfer(body, stage)
            x = self.g.concat([head, t], name="concat")
            c = x.shape[1]
            for i in range(self.cfg.head_blocks[stage]):
                x = self.residual_block(x, c, groups=self._groups(c, stage), part="head",
                                        name=f"refine{i}")
            if stage == self.cfg.num_stages - 1:
                return x
            return self.downsample(x, c, stage + 1)

    def classifier(self, x, labels):
        with self.g.scope("classifier", part="classifier"):
            h = self.bn_relu(x, "bn")
            h = self.conv(h, self.cfg.num_classes, 1, name="conv", std=0.01)
            logits = self.g.flatten(self.g.global_avg_pool(h, name="gap"), name="logits")
            loss = self.g.softmax_xent(logits, labels, name="loss")
        return logits, loss

    def inputs(self):
        c, h, w = self.cfg.input_shape
        image = self.g.input("image", (self.batch, c, h, w))
        labels = self.g.input("labels", (self.batch,), dtype=np.int64)
        return image, labels

    def tail(self, x):
        cfg = self.cfg
        feats = []
        for s in range(cfg.num_stages):
            out_ch = cfg.channels[s]
            with self.g.scope(f"tail.s{s}", part="tail"):
                if s > 0:
                    x = self.downsample(x, out_ch, s)
                for b in range(cfg.tail_blocks[s]):
                    x = self.residual_block(x, out_ch, groups=self._groups(out_ch, s),
                                            part="tail", name=f"block{b}")
            feats.append(x)
        return feats

    def finish(self, image, labels, stem, task, features):
        logits, loss = self.classifier(task, labels)
        self.g.loss = loss
        return Network(self.cfg, self.g, image, labels, stem, task, logits, loss, features)


def build_fishnet(cfg, batch=2, dtype=np.float64, seed=0):
    """Build the graph for ``cfg`` (dispatching on ``cfg.arch``)."""
    cfg.validate()
    if cfg.arch == "resnet_control":
        return build_resnet_control(cfg, batch, dtype, seed)
    if cfg.arch == "plain_cnn":
        return build_plain_cnn(cfg, batch, dtype, seed)
    b = _Builder(cfg, batch, dtype, seed)
    S = cfg.num_stages
    image, labels = b.inputs()
    stem = b.stem(image)
    tail = b.tail(stem)

    body: list = [None] * S
    body[S - 1] = b.bridge(tail[S - 1])
    x = body[S - 1]
    for s in range(S - 1, 0, -1):
        x = b.ur_block(x, tail[s], s)
        body[s - 1] = x
    if cfg.body_blocks[0]:
        with b.g.scope("body.s0", part="body"):
            for i in range(cfg.body_blocks[0]):
                x = b.residual_block(x, x.shape[1], dilation=cfg.body_dilation,
                                     groups=b._groups(x.shape[1], 0), part="body",
                                     name=f"refine{i}")
        body[0] = x

    with b.g.scope("head.s0", part="head"):
        h = b.transfer(tail[0], 0, name="entry")
    head = [h]
    for s in range(S):
        h = b.dr_block(h, body[s], s)
        if s < S - 1:
            head.append(h)
    return b.finish(image, labels, stem, h, StageFeatures(tail, body, head))


def build_resnet_control(cfg, batch=2, dtype=np.float64, seed=0):
    """Pre-activation ResNet whose stage transitions use a strided 1x1 skip conv."""
    b = _Builder(cfg, batch, dtype, seed)
    image, labels = b.inputs()
    x = stem = b.stem(image)
    feats = []
    for s in range(cfg.num_stages):
        with b.g.scope(f"tail.s{s}", part="tail"):
            for i in range(cfg.tail_blocks[s]):
                stride = 2 if s > 0 and i == 0 else 1
                x = b.residual_block(x, cfg.channels[s], stride=stride, part="tail",
                                     name=f"block{i}")
        feats.append(x)
    return b.finish(image, labels, stem, x, StageFeatures(tail=feats))


def build_plain_cnn(cfg, batch=2, dtype=np.float64, seed=0):
    """Skip-free stack of BN-ReLU-conv3x3 layers with 2x2 max-pool between stages."""
    b = _Builder(cfg, batch, dtype, seed)
    image, labels = b.inputs()
    x = stem = b.stem(image)
    feats = []
    for s in range(cfg.num_stages):
        with b.g.scope(f"tail.s{s}", part="tail"):
            if s > 0:
                x = b.g.maxpool(x, 2, 2, name="down")
            for i in range(cfg.tail_blocks[s]):
                with b.g.scope(f"layer{i}"):
                    x = b.conv(b.bn_relu(x, "bn"), cfg.channels[s], 3, padding=1, name="conv")
        feats.append(x)
    return b.finish(image, labels, stem, x, StageFeatures(tail=feats))


def zero_residual_branches(graph, include_gates=True):
    """Zero every residual-branch conv weight (and optionally SE gate weights) in place.

    Returns the previous values so they can be restored.
    """
    saved = {}
    for block in graph.blocks:
        names = list(block.branch_weights)
        if include_gates:
            names += block.gate_weights
        for name in names:
            node = graph.node(name)
            saved[name] = node.output.values.copy()
            node.output.values[...] = 0
    return saved


def restore(graph, saved):
    for name, val in saved.items():
        graph.node(name).output.values[...] = val
