"""Graphviz DOT export of a graph, optionally annotated with an analyzer report."""

from __future__ import annotations


def _quote(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _shape_text(shape):
    return "x".join(str(d) for d in shape[1:]) if len(shape) > 1 else str(tuple(shape))


def to_dot(graph, report=None, include_params=False, name="fishnet"):
    """Node label is ``kind`` plus output shape; I-convs are filled red and
    opaque edges are dashed when ``report`` is given."""
    iconvs = set(report.iconvs) if report else set()
    lines = [f"digraph {_quote(name)} {{", "  rankdir=TB;",
             '  node [shape=box, fontsize=9, style=filled, fillcolor=white];']
    keep = {n.id for n in graph.nodes if include_params or n.kind != "parameter"}
    for n in graph.nodes:
        if n.id not in keep:
            continue
        label = f"{n.kind}\\n{_shape_text(n.shape)}"
        attrs = [f"label={_quote(label)}", f"tooltip={_quote(n.name)}"]
        if n.id in iconvs:
            attrs.append('fillcolor="#e74c3c"')
        elif report is not None and report.verdict(n) == "direct":
            attrs.append('fillcolor="#d5f5e3"')
        lines.append(f"  n{n.id} [{', '.join(attrs)}];")
    for n in graph.nodes:
        if n.id not in keep:
            continue
        for idx, inp in enumerate(n.inputs):
            if inp.id not in keep:
                continue
            style = ""
            if report is not None and not report.labels[(n.id, idx)].transparent:
                style = " [style=dashed]"
            lines.append(f"  n{inp.id} -> n{n.id}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
