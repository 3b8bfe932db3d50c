"""Parameter and FLOP counting.

FLOP convention: a multiply-add counts as 2. Convolutions cost
``2 * kh * kw * (Cin / groups) * Cout * H' * W'`` and linear layers
``2 * in * out`` per sample; batch norm, activations, pooling, resampling and
concatenation count as 0.
"""

from __future__ import annotations

from collections import OrderedDict

from . import functional as F


def count_params(graph):
    return sum(int(n.output.values.size) for n in graph.parameters())


def params_by_part(graph):
    """Parameter totals grouped by the ``part`` tag (stem, tail, body, ...)."""
    out = OrderedDict()
    for n in graph.parameters():
        part = n.tags.get("part", "other")
        out[part] = out.get(part, 0) + int(n.output.values.size)
    return out


def infer_shapes(graph, input_shape=None):
    """Per-sample shapes (batch dim = 1) for every node, optionally re-deriving
    them for a different (C, H, W) image input."""
    shapes = {}
    for n in graph.nodes:
        k = n.kind
        ins = [shapes[i.id] for i in n.inputs]
        if k == "input":
            if input_shape is not None and len(n.shape) == 4:
                shapes[n.id] = (1, *input_shape)
            else:
                shapes[n.id] = (1, *n.shape[1:])
        elif k == "parameter":
            shapes[n.id] = n.shape
        elif k == "conv2d":
            a = n.attrs
            _, _, h, w = ins[0]
            kh, kw = a["kernel"]
            shapes[n.id] = (1, ins[1][0],
                            F.conv_out_size(h, kh, a["stride"], a["padding"], a["dilation"]),
                            F.conv_out_size(w, kw, a["stride"], a["padding"], a["dilation"]))
        elif k in ("maxpool", "avgpool"):
            a = n.attrs
            _, c, h, w = ins[0]
            p = a.get("padding", 0)
            shapes[n.id] = (1, c, F.conv_out_size(h, a["kernel"], a["stride"], p, 1),
                            F.conv_out_size(w, a["kernel"], a["stride"], p, 1))
        elif k == "upsample_nearest":
            f = n.attrs["factor"]
            _, c, h, w = ins[0]
            shapes[n.id] = (1, c, h * f, w * f)
        elif k == "concat":
            ax = n.attrs["axis"]
            s = list(ins[0])
            s[ax] = sum(i[ax] for i in ins)
            shapes[n.id] = tuple(s)
        elif k == "channel_reduce":
            _, c, h, w = ins[0]
            shapes[n.id] = (1, c // n.attrs["k"], h, w)
        elif k == "global_avg_pool":
            shapes[n.id] = (1, ins[0][1], 1, 1)
        elif k == "flatten":
            size = 1
            for d in ins[0][1:]:
                size *= d
            shapes[n.id] = (1, size)
        elif k == "linear":
            shapes[n.id] = (1, ins[1][0])
        elif k in ("sum", "softmax_xent"):
            shapes[n.id] = ()
        else:
            shapes[n.id] = ins[0]
    return shapes


def node_flops(node, shapes):
    if node.kind == "conv2d":
        _, cout, ho, wo = shapes[node.id]
        kh, kw = node.attrs["kernel"]
        cin = shapes[node.inputs[0].id][1]
        return 2 * kh * kw * (cin // node.attrs["groups"]) * cout * ho * wo
    if node.kind == "linear":
        out_f, in_f = node.inputs[1].shape
        return 2 * in_f * out_f
    return 0


def count_flops(graph, input_shape=None):
    """Per-sample FLOPs of one forward pass; ``input_shape`` is (C, H, W)."""
    shapes = infer_shapes(graph, input_shape)
    return sum(node_flops(n, shapes) for n in graph.nodes)


# -- closed-form ledger --------------------------------------------------------------
#
# Computed from the config alone, without building a graph; the graph walk in
# count_params must agree with it exactly.


def _bottleneck(cin, cout, groups=1):
    w = cout // 4
    return cin * w + 9 * w * w // groups + w * cout + 2 * (cin + 2 * w)


def _residual(cin, cout, groups=1):
    proj = cin * cout if cin != cout else 0
    return _bottleneck(cin, cout, groups) + proj


def param_ledger(cfg):
    """Per-part parameter counts for ``cfg`` plus a ``total`` entry."""
    cfg.validate()
    ch = cfg.channels
    S = cfg.num_stages
    g = cfg.groups_for
    led = OrderedDict()

    if cfg.stem == "conv7x7_s2":
        led["stem"] = cfg.input_shape[0] * 49 * ch[0]
    else:
        c_in = cfg.input_shape[0]
        led["stem"] = _residual(c_in, ch[0]) + _bottleneck(ch[0], ch[0])

    if cfg.arch == "plain_cnn":
        total, prev = 0, ch[0]
        for s in range(S):
            for _ in range(cfg.tail_blocks[s]):
                total += 2 * prev + 9 * prev * ch[s]
                prev = ch[s]
        led["tail"] = total
        led["classifier"] = 2 * ch[-1] + ch[-1] * cfg.num_classes
        led["total"] = sum(led.values())
        return led

    if cfg.arch == "resnet_control":
        total, prev = 0, ch[0]
        for s in range(S):
            for i in range(cfg.tail_blocks[s]):
                strided = s > 0 and i == 0
                total += _bottleneck(prev, ch[s])
                if prev != ch[s] or strided:
                    total += prev * ch[s]
                prev = ch[s]
        led["tail"] = total
        led["classifier"] = 2 * ch[-1] + ch[-1] * cfg.num_classes
        led["total"] = sum(led.values())
        return led

    conv_down = cfg.downsample == "conv"
    tail, prev = 0, ch[0]
    for s in range(S):
        if s > 0 and conv_down:
            tail += 9 * prev * ch[s]
            prev = ch[s]
        for _ in range(cfg.tail_blocks[s]):
            tail += _residual(prev, ch[s], g(ch[s] // 4, s))
            prev = ch[s]
    led["tail"] = tail

    c = ch[-1]
    hidden = max(1, c // cfg.se_ratio)
    led["bridge"] = 2 * c * hidden + _bottleneck(c, c, g(c // 4, S - 1))

    transfer = _residual(ch[0], ch[0], g(ch[0] // 4, 0))
    body_ch = [0] * S
    body_ch[-1] = c
    body = 0
    for s in range(S - 1, 0, -1):
        transfer += _residual(ch[s], ch[s], g(ch[s] // 4, s))
        cat = body_ch[s] + ch[s]
        out = cat // cfg.reduction_k[s]
        body += _bottleneck(cat, out, g(out // 4, s))
        body += (cfg.body_blocks[s] - 1) * _bottleneck(out, out, g(out // 4, s))
        body_ch[s - 1] = out
    body += cfg.body_blocks[0] * _bottleneck(body_ch[0], body_ch[0], g(body_ch[0] // 4, 0))
    led["body"] = body

    head, width = 0, ch[0]
    for s in range(S):
        transfer += _residual(body_ch[s], body_ch[s], g(body_ch[s] // 4, s))
        width += body_ch[s]
        head += cfg.head_blocks[s] * _bottleneck(width, width, g(width // 4, s))
        if conv_down and s < S - 1:
            head += 9 * width * width
    led["transfer"] = transfer
    led["head"] = head
    led["classifier"] = 2 * width + width * cfg.num_classes
    led["total"] = sum(led.values())
    return led
