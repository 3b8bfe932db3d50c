"""Command-line entry point: ``fishnet <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from . import accounting
from .analyzer import analyze, verify_direct_bp_numerical
from .builder import build_fishnet
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import generate_synthetic, parse_gen_spec, read_dataset, write_dataset
from .dot import to_dot
from .errors import ConfigError, FishNetError, TrainingDivergedError
from .report import plot_params, plot_training
from .train import METRICS_HEADER, TrainRecipe, evaluate, evaluate_checkpoint, train


def _table(rows, header, fmt):
    """Render rows as aligned text or as TSV (header line first)."""
    if fmt == "tsv":
        return "\n".join("\t".join(str(c) for c in r) for r in [header, *rows])
    cols = list(zip(header, *rows)) if rows else [(h,) for h in header]
    widths = [max(len(str(c)) for c in col) for col in cols]
    out = []
    for r in [header, *rows]:
        out.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(out)


def _shape(s):
    return "x".join(str(d) for d in s)


def _parse_chw(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}")
    return dims


# -- commands -----------------------------------------------------------------------


def cmd_build(args, out):
    cfg = load_config(args.config)
    net = build_fishnet(cfg, batch=1)
    shapes = accounting.infer_shapes(net.graph)
    rows = []
    for n in net.graph.nodes:
        if n.kind in ("parameter", "input"):
            continue
        params = sum(int(i.output.values.size) for i in n.inputs if i.kind == "parameter")
        rows.append((n.id, n.name, n.kind, _shape(n.shape[1:]) or "scalar",
                     params, accounting.node_flops(n, shapes)))
    print(_table(rows, ("id", "name", "kind", "shape", "params", "flops"), args.format), file=out)
    if args.format == "text":
        print(f"\n{cfg.name}: {len(net.graph.nodes)} nodes, "
              f"{accounting.count_params(net.graph)} parameters", file=out)
    return 0


def cmd_params(args, out):
    cfg = load_config(args.config)
    ledger = accounting.param_ledger(cfg)
    counted = accounting.count_params(build_fishnet(cfg, batch=1).graph)
    if counted != ledger["total"]:
        print(f"error: graph count {counted} != ledger {ledger['total']}", file=sys.stderr)
        return 1
    rows = [(k, v) for k, v in ledger.items()]
    print(_table(rows, ("part", "params"), args.format), file=out)
    if args.plot:
        plot_params(ledger, args.plot, title=cfg.name)
    return 0


def cmd_flops(args, out):
    cfg = load_config(args.config)
    if args.input is not None:
        cfg = cfg.replace(input_shape=args.input)
    net = build_fishnet(cfg, batch=1)
    shapes = accounting.infer_shapes(net.graph)
    parts = {}
    for n in net.graph.nodes:
        f = accounting.node_flops(n, shapes)
        if f:
            key = n.tags.get("part", "other")
            parts[key] = parts.get(key, 0) + f
    rows = [*parts.items(), ("total", sum(parts.values()))]
    print(_table(rows, ("part", "flops"), args.format), file=out)
    return 0


def _targets(net, names):
    if not names:
        return list(net.features.items())
    by_label = dict(net.features.items())
    out = []
    for name in names:
        node = by_label.get(name) or net.graph.node(name)
        out.append((name, node))
    return out


def cmd_bpcheck(args, out):
    cfg = load_config(args.config)
    net = build_fishnet(cfg, batch=2)
    report = analyze(net.graph)
    rows, ok = [], True
    for label, node in _targets(net, args.must):
        verdict = report.verdict(node)
        witness = report.witnesses.get(node.id)
        row = [node.id, label, node.name, verdict, len(witness) if witness else "-"]
        if args.verify:
            res = verify_direct_bp_numerical(net.graph, node, report=report)
            row.append({None: "n/a", True: "pass", False: "FAIL"}[res])
            ok &= res is not False
        ok &= verdict == "direct"
        rows.append(row)
    header = ["id", "feature", "node", "verdict", "witness_len"]
    if args.verify:
        header.append("numeric")
    print(_table(rows, header, args.format), file=out)
    iconvs = report.iconv_nodes()
    if args.format == "tsv":
        for n in iconvs:
            print(f"iconv\t{n.id}\t{n.name}", file=out)
    else:
        print(f"\nI-convs ({len(iconvs)}):", file=out)
        for n in iconvs:
            print(f"  {n.id}  {n.name}  conv2d {_shape(n.shape[1:])}", file=out)
    if args.dot:
        Path(args.dot).write_text(to_dot(net.graph, report, name=cfg.name))
    return 0 if ok else 1


def cmd_gen(args, out):
    try:
        spec = parse_gen_spec(args.spec)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    ds = generate_synthetic(**spec)
    write_dataset(args.output, ds)
    print(f"wrote {args.output}: {len(ds)} samples, shape {_shape(ds.shape)}, "
          f"{ds.num_classes} classes, {ds.nbytes()} bytes", file=out)
    return 0


def cmd_train(args, out):
    cfg = load_config(args.config)
    ds = read_dataset(args.data)
    recipe = TrainRecipe(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                         lr_step=args.lr_step, lr_factor=args.lr_factor,
                         momentum=args.momentum, weight_decay=args.weight_decay,
                         flip=args.flip, crop_pad=args.crop_pad, seed=args.seed,
                         warmup_epochs=args.warmup_epochs, clip_norm=args.clip_norm)
    try:
        recipe.validate()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    lines = [METRICS_HEADER]
    print(METRICS_HEADER, file=out)

    def log(line):
        lines.append(line)
        print(line, file=out, flush=True)

    result = train(cfg, ds, recipe, log=log)
    save_checkpoint(args.output, result.checkpoint(with_momentum=not args.no_momentum))
    if args.holdout:
        acc, loss = evaluate(result.network, read_dataset(args.holdout), result.mean, result.std)
        print(f"# holdout\tloss={loss:.6f}\tacc={acc:.6f}", file=out)
    if args.report:
        rep = Path(args.report)
        rep.mkdir(parents=True, exist_ok=True)
        (rep / "metrics.tsv").write_text("\n".join(lines) + "\n")
        plot_training(result.metrics, rep / "curves.png", title=cfg.name)
    return 0


def cmd_eval(args, out):
    ckpt = load_checkpoint(args.checkpoint)
    acc, loss = evaluate_checkpoint(ckpt, read_dataset(args.data), batch_size=args.batch_size)
    print(_table([(f"{acc:.6f}", f"{loss:.6f}")], ("acc", "loss"), args.format), file=out)
    return 0


def cmd_export_dot(args, out):
    cfg = load_config(args.config)
    net = build_fishnet(cfg, batch=1)
    report = analyze(net.graph) if args.annotate else None
    Path(args.output).write_text(to_dot(net.graph, report, include_params=args.params,
                                        name=cfg.name))
    print(f"wrote {args.output} ({len(net.graph.nodes)} nodes)", file=out)
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "tsv"), default="text")

    p = argparse.ArgumentParser(prog="fishnet", description="FishNet micro-framework tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build", parents=[common], help="validate a config and print its layers")
    s.add_argument("config")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("params", parents=[common], help="parameter ledger per part")
    s.add_argument("config")
    s.add_argument("--plot", help="write a bar chart PNG")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("flops", parents=[common], help="forward FLOPs per sample")
    s.add_argument("config")
    s.add_argument("--input", type=_parse_chw, help="override input as CxHxW")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("bpcheck", parents=[common], help="direct-gradient analysis")
    s.add_argument("config")
    s.add_argument("--dot", help="write an annotated DOT graph")
    s.add_argument("--verify", action="store_true", help="also run the numerical witness check")
    s.add_argument("--must", action="append", default=[],
                   help="feature label (e.g. 'tail[0]') or node name that must be direct; "
                        "default: every stage feature")
    s.set_defaults(func=cmd_bpcheck)

    s = sub.add_parser("gen", parents=[common], help="write a synthetic dataset file")
    s.add_argument("spec", help="e.g. classes=10,per_class=100,shape=3x32x32,seed=0,split=0")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    s.add_argument("config")
    s.add_argument("data")
    s.add_argument("-o", "--output", required=True)
    d = TrainRecipe()
    s.add_argument("--lr", type=float, default=d.lr)
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--lr-step", type=int, default=d.lr_step)
    s.add_argument("--lr-factor", type=float, default=d.lr_factor)
    s.add_argument("--momentum", type=float, default=d.momentum)
    s.add_argument("--weight-decay", type=float, default=d.weight_decay)
    s.add_argument("--flip", action="store_true")
    s.add_argument("--crop-pad", type=int, default=d.crop_pad)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
    s.add_argument("--clip-norm", type=float, default=d.clip_norm)
    s.add_argument("--no-momentum", action="store_true", help="omit momentum buffers")
    s.add_argument("--holdout", help="dataset file evaluated after training")
    s.add_argument("--report", help="directory for metrics.tsv and curves.png")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--batch-size", type=int, default=100)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-dot", parents=[common], help="write the graph as DOT")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--params", action="store_true", help="include parameter nodes")
    s.add_argument("--annotate", action="store_true", help="mark I-convs and opaque edges")
    s.set_defaults(func=cmd_export_dot)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except (FishNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
