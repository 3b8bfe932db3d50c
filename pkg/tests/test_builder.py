import numpy as np
import pytest

from fishnet.builder import _Builder, build_fishnet, restore, zero_residual_branches
from fishnet.config import load_config
from fishnet.errors import BuildError, ConfigError
from oracles import (maxpool2_oracle, reduce_oracle, selection_weight, upsample_oracle,
                     zero_residual_fishnet)

TINY = load_config("fishnet-tiny")


def builder(cfg=TINY):
    return _Builder(cfg, batch=2, dtype=np.float64, seed=0)


def feed(b, *nodes, seed=0):
    rng = np.random.default_rng(seed)
    vals = {n: rng.standard_normal(n.shape) for n in nodes}
    b.g.forward(vals)
    return vals


def test_tiny_forward_gives_logits():
    net = build_fishnet(TINY)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    net.forward(x)
    assert net.logits.value.shape == (2, 10)
    loss = net.forward(x, np.array([1, 2]))
    assert np.isfinite(loss)


def test_resolution_ladder_and_channels():
    for cfg in (TINY, load_config("fishnet-small")):
        net = build_fishnet(cfg)
        f = net.features
        body_ch = cfg.body_channels()
        head_ch, final = cfg.head_channels()
        for s in range(cfg.num_stages):
            res = cfg.stage_resolution(s)
            assert f.tail[s].shape[2:] == f.body[s].shape[2:] == f.head[s].shape[2:] == res
            assert f.tail[s].shape[1] == cfg.channels[s]
            assert f.body[s].shape[1] == body_ch[s]
            assert f.head[s].shape[1] == head_ch[s]
        assert net.task_feature.shape[1] == final


def test_residual_block_zero_branch_is_identity():
    b = builder()
    x = b.g.input("x", (2, 64, 6, 6))
    y = b.residual_block(x, 64, part="body")
    zero_residual_branches(b.g)
    vals = feed(b, x)
    assert y.value.tobytes() == vals[x].tobytes()


def test_residual_block_param_count():
    b = builder()
    x = b.g.input("x", (1, 64, 56, 56))
    b.residual_block(x, 64, part="body")
    params = b.g.parameters()
    conv = sum(p.value.size for p in params if p.name.endswith(".w"))
    bn = sum(p.value.size for p in params if not p.name.endswith(".w"))
    assert conv == 64 * 16 + 9 * 16 * 16 + 16 * 64 == 4352
    assert bn == 2 * (64 + 16 + 16) == 192


def test_projection_only_in_tail():
    b = builder()
    x = b.g.input("x", (2, 16, 8, 8))
    with pytest.raises(BuildError, match="projection"):
        b.residual_block(x, 32, part="head")
    with pytest.raises(BuildError):
        b.residual_block(x, 16, stride=2, part="body")
    y = b.residual_block(x, 32, part="tail")
    assert any(n.name.endswith("proj") for n in b.g.nodes) and y.shape == (2, 32, 8, 8)


def test_transfer_zero_is_identity_and_preserves_shape():
    b = builder()
    x = b.g.input("x", (2, 32, 8, 8))
    t = b.transfer(x, 1)
    zero_residual_branches(b.g)
    vals = feed(b, x)
    assert t.shape == x.shape and t.value.tobytes() == vals[x].tobytes()


def test_ur_block_zero_refinement_and_channel_arithmetic():
    b = builder()
    body = b.g.input("body", (1, 256, 14, 14))
    tail = b.g.input("tail", (1, 256, 14, 14))
    out = b.ur_block(body, tail, 1)
    assert out.shape == (1, 256, 28, 28)
    zero_residual_branches(b.g)
    vals = feed(b, body, tail)
    cat = np.concatenate([vals[body], vals[tail]], axis=1)
    np.testing.assert_array_equal(out.value, upsample_oracle(reduce_oracle(cat, 2)))


def test_ur_block_indivisible_reports_stage():
    b = builder(TINY.replace(reduction_k=(1, 3, 2)))
    body = b.g.input("body", (1, 8, 4, 4))
    tail = b.g.input("tail", (1, 8, 4, 4))
    with pytest.raises(ConfigError) as err:
        b.ur_block(body, tail, 1)
    assert err.value.stage == 1


def test_dr_block_zero_refinement_and_channels():
    b = builder()
    head = b.g.input("head", (1, 256, 28, 28))
    body = b.g.input("body", (1, 128, 28, 28))
    out = b.dr_block(head, body, 0)
    assert out.shape == (1, 384, 14, 14)
    zero_residual_branches(b.g)
    vals = feed(b, head, body)
    cat = np.concatenate([vals[head], vals[body]], axis=1)
    np.testing.assert_array_equal(out.value, maxpool2_oracle(cat))


@pytest.mark.parametrize("excite,expected", [(1000.0, "x"), (-1000.0, "zero")])
def test_bridge_gate_extremes(excite, expected):
    b = builder()
    x = b.g.input("x", (2, 64, 7, 7))
    out = b.bridge(x)
    assert out.shape == x.shape
    zero_residual_branches(b.g, include_gates=False)
    for p in b.g.parameters():
        if "squeeze" in p.name:
            p.value[...] = 1.0
        elif "excite" in p.name:
            p.value[...] = excite
    xv = np.abs(np.random.default_rng(0).standard_normal(x.shape)) + 0.1
    with np.errstate(over="ignore"):
        b.g.forward({x: xv})
    want = xv if expected == "x" else np.zeros_like(xv)
    np.testing.assert_array_equal(out.value, want)


def test_two_residual_block_stem_replaces_strided_conv():
    net = build_fishnet(TINY.replace(stem="two_residual_blocks"))
    stem_convs = [n for n in net.graph.nodes if n.kind == "conv2d" and n.tags.get("part") == "stem"]
    assert all(n.attrs["kernel"] != (7, 7) for n in stem_convs)
    assert net.stem.kind == "add" and net.stem.shape[2:] == (16, 16)


def test_head_outside_branches_is_concat_add_pool_only():
    net = build_fishnet(TINY)
    branch = set().union(*(blk.branch_nodes for blk in net.graph.blocks))
    kinds = {n.kind for n in net.graph.nodes
             if n.tags.get("part") == "head" and n.id not in branch and n.kind != "parameter"}
    assert kinds == {"concat", "add", "maxpool"}


def test_every_stage_reaches_the_task_feature():
    net = build_fishnet(load_config("fishnet-small"))
    seen, stack = set(), [net.task_feature]
    while stack:
        n = stack.pop()
        if n.id not in seen:
            seen.add(n.id)
            stack.extend(n.inputs)
    for label, node in net.features.items():
        assert node.id in seen, label


def test_grouped_blocks_double_group_width_per_stage():
    cfg = TINY.replace(group_width=2)
    net = build_fishnet(cfg)
    checked = 0
    for n in net.graph.nodes:
        if n.kind == "conv2d" and n.name.endswith("conv2") and n.tags.get("part") == "tail":
            stage = int(n.name.split(".")[1][1:])
            assert n.attrs["groups"] == n.shape[1] // (2 << stage)
            checked += 1
    assert checked == cfg.num_stages


def test_zero_residual_oracle_detects_nonzero_branch():
    net = build_fishnet(TINY, batch=2)
    g = net.graph
    zero_residual_branches(g)
    for p in g.parameters():
        if p.name.endswith("proj.w"):
            p.value[...] = selection_weight(*p.shape[:2])
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    net.forward(x)
    assert np.array_equal(net.task_feature.value, zero_residual_fishnet(TINY, net.stem.value))
    names = [f"head.s1.refine0.branch.conv{i}.w" for i in (1, 2, 3)]
    saved = {name: g.node(name).value.copy() for name in names}
    for name in names:
        g.node(name).value[...] = 0.01
    net.forward(x)
    assert not np.array_equal(net.task_feature.value, zero_residual_fishnet(TINY, net.stem.value))
    restore(g, saved)
    assert not any(g.node(name).value.any() for name in names)


def test_build_is_deterministic_and_float32():
    a = build_fishnet(TINY, seed=3, dtype=np.float32)
    b = build_fishnet(TINY, seed=3, dtype=np.float32)
    for pa, pb in zip(a.graph.parameters(), b.graph.parameters()):
        assert pa.value.dtype == np.float32
        assert pa.value.tobytes() == pb.value.tobytes()


def test_control_networks_build():
    ctrl = build_fishnet(load_config("resnet-control"))
    plain = build_fishnet(load_config("plain-cnn"))
    assert ctrl.logits.shape == plain.logits.shape == (2, 10)
    assert not any(n.kind == "add" for n in plain.graph.nodes)
