import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishnet import tensor
from fishnet.analyzer import analyze, classify_edges, conv_unit, verify_direct_bp_numerical
from fishnet.builder import build_fishnet, zero_residual_branches
from fishnet.config import load_config
from fishnet.dot import to_dot
from fishnet.errors import AnalysisError
from fishnet.tensor import Graph
from test_acceptance import MICRO

MICRO_A = MICRO["micro-a"][0]


def conv_bn_relu(g, x, cout, k=3, name="c"):
    w = g.parameter(name + ".w", np.random.default_rng(len(g.nodes)).standard_normal(
        (cout, x.shape[1], k, k)) * 0.1)
    c = x.shape[1]
    h = g.relu(g.batchnorm(x, g.parameter(name + ".g", np.ones(c)),
                           g.parameter(name + ".b", np.zeros(c))))
    return g.conv2d(h, w, padding=k // 2, name=name)


def preact_stage(transition=False):
    g = Graph()
    x = g.input("x", (2, 3, 8, 8))
    h = conv_bn_relu(g, x, 4, name="stem")
    for i in range(2):
        branch = conv_bn_relu(g, h, 4, name=f"block{i}")
        h = g.add(h, branch, skip=0)
    if transition:
        proj = conv_bn_relu(g, h, 8, k=1, name="transition")
        h = g.add(proj, conv_bn_relu(g, h, 8, name="wide"), skip=0)
    g.loss = g.sum(g.maxpool(h))
    return g


def test_edge_label_examples():
    g = Graph()
    a = g.input("a", (1, 2, 4, 4))
    b = g.input("b", (1, 2, 4, 4))
    res = g.add(a, b, skip=1)
    plain = g.add(a, b)
    cat = g.concat([res, plain])
    pool = g.maxpool(cat)
    act = g.relu(pool)
    labels = classify_edges(g)
    assert not labels[(res.id, 0)].transparent and labels[(res.id, 1)].transparent
    assert labels[(plain.id, 0)].transparent and labels[(plain.id, 1)].transparent
    assert all(labels[(cat.id, i)].transparent for i in (0, 1))
    assert labels[(pool.id, 0)].transparent
    assert not labels[(act.id, 0)].transparent
    assert labels == classify_edges(g)


def test_conv_chain_blocks_its_input():
    g = Graph()
    x = g.input("x", (1, 2, 4, 4))
    y = g.conv2d(x, g.parameter("w", np.ones((2, 2, 1, 1))))
    g.loss = g.sum(y)
    rep = analyze(g)
    assert rep.is_direct(y) and rep.verdict(x) == "blocked"
    assert rep.witness(x) is None and x.id in rep.blocked()


def test_non_scalar_loss_is_rejected():
    g = Graph()
    x = g.input("x", (1, 2, 4, 4))
    with pytest.raises(AnalysisError):
        analyze(g, g.relu(x))
    with pytest.raises(AnalysisError):
        analyze(g)


def test_preactivation_stage_has_no_isolated_conv():
    g = preact_stage()
    rep = analyze(g)
    assert rep.iconvs == []
    # everything between the stem conv and the loss is direct
    stem = g.node("stem")
    assert rep.is_direct(stem)


def test_transition_conv_is_isolated():
    g = preact_stage(transition=True)
    rep = analyze(g)
    assert [n.name for n in rep.iconv_nodes()] == ["transition"]
    assert not rep.is_direct(g.node("stem"))


def test_conv_unit_collects_exclusive_bn_relu():
    g = preact_stage()
    unit = conv_unit(g, g.node("block0"))
    assert [n.kind for n in unit] == ["conv2d", "relu", "batchnorm"]


def _fixed_point_direct(g, loss):
    # independent oracle: grow the direct set until nothing changes
    def passes(node, idx):
        if node.tags.get("part") == "classifier":
            return True
        if node.kind == "add":
            return node.attrs.get("skip") in (None, idx)
        return node.kind in {"concat", "maxpool", "avgpool", "global_avg_pool",
                             "upsample_nearest", "channel_reduce", "flatten", "sum"}

    direct = {loss.id}
    changed = True
    while changed:
        changed = False
        for node in g.nodes:
            if node.id not in direct:
                continue
            for idx, inp in enumerate(node.inputs):
                if inp.id not in direct and passes(node, idx):
                    direct.add(inp.id)
                    changed = True
    return direct


@pytest.mark.parametrize("cfg", [MICRO_A, load_config("fishnet-tiny"),
                                 load_config("resnet-control"),
                                 load_config("fishnet-tiny").replace(downsample="conv")],
                         ids=["micro-a", "tiny", "control", "conv-down"])
def test_verdicts_agree_with_fixed_point_oracle(cfg):
    net = build_fishnet(cfg)
    rep = analyze(net.graph)
    direct = {i for i, v in rep.verdicts.items() if v == "direct"}
    assert direct == _fixed_point_direct(net.graph, net.loss)


def test_analysis_is_pure_and_deterministic():
    net = build_fishnet(MICRO_A)
    before = {p.name: p.value.copy() for p in net.graph.parameters()}
    a, b = analyze(net.graph), analyze(net.graph)
    assert a.verdicts == b.verdicts and a.witnesses == b.witnesses and a.iconvs == b.iconvs
    for p in net.graph.parameters():
        assert p.value.tobytes() == before[p.name].tobytes()


OPS = st.sampled_from(["relu", "conv", "merge", "res", "plain"])


def _chain(ops):
    g = Graph()
    x = g.input("x", (1, 2, 4, 4))
    nodes = [x]
    h = x
    for i, op in enumerate(ops):
        if op == "relu":
            h = g.relu(h)
        elif op == "conv":
            h = g.conv2d(h, g.parameter(f"w{i}", np.ones((2, 2, 3, 3))), padding=1)
        elif op == "merge":
            h = g.channel_reduce(g.concat([h, g.sigmoid(h)]), 2)
        elif op == "res":
            h = g.add(h, g.relu(h), skip=0)
        else:
            h = g.add(h, nodes[i // 2])
        nodes.append(h)
    return g, nodes


@settings(max_examples=40, deadline=None)
@given(st.lists(OPS, min_size=1, max_size=8), st.data())
def test_plain_add_never_removes_direct_paths(ops, data):
    g, nodes = _chain(ops)
    g.loss = g.sum(nodes[-1])
    before = analyze(g)
    u = data.draw(st.sampled_from(nodes))
    g.loss = g.sum(g.add(nodes[-1], u))
    after = analyze(g)
    for nid, v in before.verdicts.items():
        if v == "direct" and nid != before.loss:
            assert after.verdicts[nid] == "direct"


def test_witness_edges_are_transparent_and_verify():
    net = build_fishnet(MICRO_A)
    rep = analyze(net.graph)
    for label, node in net.features.items():
        path = rep.witness(node)
        assert path[0].id == net.loss.id and path[-1].id == node.id
        for cur, nxt in zip(path, path[1:]):
            assert any(rep.labels[(cur.id, i)].transparent
                       for i, inp in enumerate(cur.inputs) if inp.id == nxt.id)
        assert verify_direct_bp_numerical(net.graph, node, report=rep) is True, label


def test_verify_restores_weights_and_skips_blocked():
    net = build_fishnet(load_config("resnet-control"))
    rep = analyze(net.graph)
    before = {p.name: p.value.copy() for p in net.graph.parameters()}
    blocked = net.graph.nodes[rep.blocked()[-1]]
    assert verify_direct_bp_numerical(net.graph, blocked, report=rep) is None
    assert verify_direct_bp_numerical(net.graph, net.features.tail[2], report=rep) is True
    for p in net.graph.parameters():
        assert p.value.tobytes() == before[p.name].tobytes()


def test_verify_catches_a_wrong_adjoint(monkeypatch):
    net = build_fishnet(MICRO_A)
    rep = analyze(net.graph)
    target = net.features.tail[1]
    assert "upsample_nearest" in [n.kind for n in rep.witness(target)]
    good = tensor._BACKWARD["upsample_nearest"]
    monkeypatch.setitem(tensor._BACKWARD, "upsample_nearest",
                        lambda node, g: [1.01 * gi for gi in good(node, g)])
    assert verify_direct_bp_numerical(net.graph, target, report=rep) is False


def test_residual_stage_with_zero_branch_matches_identity():
    g = preact_stage()
    zero_residual_branches(g)
    stem = g.node("stem")
    rep = analyze(g)
    assert rep.is_direct(stem)


def test_dot_export_marks_isolated_convs():
    g = preact_stage(transition=True)
    rep = analyze(g)
    text = to_dot(g, rep)
    assert text.startswith("digraph") and text.rstrip().endswith("}")
    assert "#e74c3c" in text and "dashed" in text
    assert text.count("#e74c3c") == 1
    assert "parameter" not in text
    assert "parameter" in to_dot(g, include_params=True)
