"""``sgpr`` command line: graph building, pair mining, training, evaluation and reports.

Each subcommand prints one ``key=value`` summary line on success. Options
may also come from a YAML mapping given with ``--config`` (keys are the
long option names with dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import zlib
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .dataset import EVAL, TRAIN, KittiLayout, PairSet, generate_pairs, read_pairs, write_labels, write_pairs, \
    write_point_cloud
from .errors import DatasetError, SGPRError
from .evaluation import GraphStore, emit_report, evaluate, occlude_cloud, pr_svg, read_pr_csv, rotate_cloud, \
    similarity_matrix, write_similarity_csv, f1_max
from .graph import ClassMap, graph_from_cloud, write_graph
from .model import ModelConfig
from .training import Checkpoint, TrainConfig, fold_split, format_log_line, train

logger = logging.getLogger("sgpr")

EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(s) for s in text]
    return [s.strip() for s in text.split(",") if s.strip()]


def _int_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in _csv_list(str(text)))


def _rotate(text: str):
    if str(text).lower() == "random":
        return "random"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--rotate takes degrees or 'random', got {text!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_dataset(p, required=True):
    p.add_argument("--dataset", required=required, help="KITTI-style dataset root")
    p.add_argument("--sequences", type=_csv_list, help="comma-separated sequence ids (default: all)")


def _add_pairs(p):
    p.add_argument("--pos-thresh", type=float, default=3.0)
    p.add_argument("--neg-thresh", type=float, default=20.0)
    p.add_argument("--neg-ratio", type=float, default=1.0)
    p.add_argument("--min-time-gap", type=float, default=30.0)


def _add_model(p):
    p.add_argument("--capacity", type=int, default=100)
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--spatial-widths", type=_int_tuple, default=(32, 64))
    p.add_argument("--semantic-widths", type=_int_tuple, default=(32, 64))
    p.add_argument("--ntn-slices", type=int, default=16)
    p.add_argument("--fc-widths", type=_int_tuple, default=(8,))
    p.add_argument("--coord-scale", type=float, default=ModelConfig.coord_scale)
    p.add_argument("--embed-scale", type=float, default=ModelConfig.embed_scale)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="sgpr", description="Semantic graph place recognition toolkit")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-graphs", help="cluster labeled scans into semantic graph files")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--class-map", help="YAML class map (default: SemanticKITTI 12-class merge)")
    p.add_argument("--capacity", type=int, default=100)

    p = sub.add_parser("make-pairs", help="mine labeled scan pairs from poses")
    _add_common(p)
    _add_dataset(p)
    _add_pairs(p)
    p.add_argument("--mode", choices=(TRAIN, EVAL), default=TRAIN)

    p = sub.add_parser("train", help="train the similarity network")
    _add_common(p)
    _add_dataset(p)
    _add_pairs(p)
    _add_model(p)
    p.add_argument("--graphs", required=True, help="graph directory from build-graphs")
    p.add_argument("--fold", help="held-out test sequence, excluded from training")
    p.add_argument("--val-fold", help="sequence used for early stopping, excluded from training")
    p.add_argument("--pairs", help="training pairs CSV (default: mine from poses)")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-augment-yaw", dest="augment_yaw", action="store_false")
    p.add_argument("--augment-occlusion", type=float, dest="augment_occlusion_deg")
    p.add_argument("--val-max-pairs", type=int, default=TrainConfig.val_max_pairs)
    p.add_argument("--checkpoint-interval", type=int, default=1)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="score held-out pairs and write a PR report")
    _add_common(p)
    _add_dataset(p)
    _add_pairs(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--fold", help="sequence to evaluate (default: all selected sequences)")
    p.add_argument("--pairs", help="evaluation pairs CSV (default: mine in eval mode)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--last", action="store_true", help="use final instead of best-validation parameters")

    p = sub.add_parser("transform", help="occlude or rotate raw scans into a new dataset tree")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--occlude", type=float, metavar="DEG", help="remove a random azimuth sector of this width")
    p.add_argument("--rotate", type=_rotate, metavar="DEG|random", help="yaw rotation in degrees, or random")

    p = sub.add_parser("plot", help="render pr.csv of a report directory as SVG")
    _add_common(p)
    p.add_argument("--report", required=True, help="directory holding pr.csv")

    p = sub.add_parser("similarity", help="score one query scan against a whole sequence")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--query", type=int, required=True, help="query frame")
    p.add_argument("--batch-size", type=int, default=128)

    p = sub.add_parser("demo-synth", help="write a synthetic labeled dataset in the KITTI layout")
    _add_common(p)
    p.add_argument("--places", type=_int_tuple, default=synth.SynthConfig.places)
    p.add_argument("--revisits", type=int, default=synth.SynthConfig.revisits)
    return root


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in doc.items():
        dest = str(key).replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown option {key!r} in config file {path}")
        action = known[dest]
        if action.type is not None and value is not None and not isinstance(value, bool):
            value = action.type(value if isinstance(value, (list, tuple)) else str(value))
        defaults[dest] = value
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _layout(args) -> KittiLayout:
    layout = KittiLayout(args.dataset)
    if not layout.root.is_dir():
        raise UsageError(f"dataset root does not exist: {layout.root}")
    return layout


def _sequences(layout: KittiLayout, args) -> list[str]:
    available = layout.sequences()
    chosen = args.sequences or available
    missing = [s for s in chosen if s not in available]
    if missing:
        raise UsageError(f"sequences {missing} not found under {layout.root / 'sequences'}")
    return chosen


def _scan_rng(seed: int, seq: str, frame: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(seq.encode()), frame])


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_graphs(args) -> str:
    layout = _layout(args)
    seqs = _sequences(layout, args)
    cmap = ClassMap.from_file(args.class_map) if args.class_map else ClassMap.semantic_kitti()
    out = Path(args.out)
    rows = []
    for seq in seqs:
        # fail before any work if labels are absent
        label_dir = layout.sequence_dir(seq) / "labels"
        if not label_dir.is_dir():
            raise DatasetError(f"missing labels directory {label_dir}; semantic labels are required to build graphs")
    for seq in seqs:
        (out / seq).mkdir(parents=True, exist_ok=True)
        for frame in layout.frames(seq):
            g = graph_from_cloud(layout.load(seq, frame), cmap, args.capacity, seq, frame)
            write_graph(g, out / seq / f"{frame:06d}.json")
            rows.append((seq, frame, len(g), "empty" if not len(g) else ""))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "frame", "node_count", "warning"])
        w.writerows(rows)
    empty = sum(1 for r in rows if r[3])
    if empty:
        logger.warning("%d scans produced empty graphs", empty)
    return f"build-graphs graphs={len(rows)} sequences={len(seqs)} empty={empty} out={out}"


def _mine(layout, seqs, args, mode, seed) -> PairSet:
    scans = [s for seq in seqs for s in layout.scans(seq)]
    return generate_pairs(scans, args.pos_thresh, args.neg_thresh, args.min_time_gap, args.neg_ratio, seed, mode)


def cmd_make_pairs(args) -> str:
    layout = _layout(args)
    seqs = _sequences(layout, args)
    pairs = _mine(layout, seqs, args, args.mode, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pairs.csv"
    write_pairs(path, pairs)
    pos = int(pairs.labels.sum()) if len(pairs) else 0
    warn = f" warning={pairs.warning!r}" if pairs.warning else ""
    return f"make-pairs pairs={len(pairs)} positives={pos} negatives={len(pairs) - pos} out={path}{warn}"


def _load_pairs(path, layout, seqs) -> PairSet:
    scans = [s for seq in seqs for s in layout.scans(seq)]
    return read_pairs(path, scans)


def cmd_train(args) -> str:
    layout = _layout(args)
    seqs = _sequences(layout, args)
    train_seqs = list(seqs)
    if args.fold:
        train_seqs, _ = fold_split(train_seqs, args.fold)
    if args.val_fold:
        train_seqs, _ = fold_split(train_seqs, args.val_fold)
    if not train_seqs:
        raise UsageError("no training sequences left after removing --fold and --val-fold")
    graphs = GraphStore(root=args.graphs)
    if args.pairs:
        pairs = _load_pairs(args.pairs, layout, train_seqs)
    else:
        pairs = _mine(layout, train_seqs, args, TRAIN, args.seed)
    val = _mine(layout, [args.val_fold], args, EVAL, args.seed + 1) if args.val_fold else None
    mcfg = ModelConfig(capacity=args.capacity, knn_k=args.knn_k, spatial_widths=tuple(args.spatial_widths),
                       semantic_widths=tuple(args.semantic_widths), ntn_slices=args.ntn_slices,
                       fc_widths=tuple(args.fc_widths), seed=args.seed, coord_scale=args.coord_scale,
                       embed_scale=args.embed_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.sgpr"
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       fold=args.fold, augment_yaw=args.augment_yaw,
                       augment_occlusion_deg=args.augment_occlusion_deg, checkpoint_path=str(ckpt_path),
                       checkpoint_interval=args.checkpoint_interval, val_max_pairs=args.val_max_pairs)
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_path = out / "train_log.csv"
    lines = ["epoch,mean_loss,val_f1max"]
    if resume is not None:
        lines += [format_log_line(*h) for h in resume.history]

    def on_epoch(epoch, loss, val_f1):
        lines.append(format_log_line(epoch, loss, val_f1))
        log_path.write_text("\n".join(lines) + "\n")
        if args.verbose:
            print(lines[-1], file=sys.stderr)

    ckpt = train(pairs, graphs, tcfg, mcfg, val, resume, on_epoch)
    log_path.write_text("\n".join(lines) + "\n")
    ckpt.save(ckpt_path)
    final = ckpt.history[-1][1] if ckpt.history else float("nan")
    best = "nan" if ckpt.best_val_f1 is None else repr(ckpt.best_val_f1)
    return (f"train epochs={ckpt.epoch} pairs={len(pairs)} final_loss={final!r} best_val_f1max={best} "
            f"checkpoint={ckpt_path}")


def cmd_eval(args) -> str:
    layout = _layout(args)
    seqs = [args.fold] if args.fold else _sequences(layout, args)
    if args.fold and args.fold not in layout.sequences():
        raise UsageError(f"fold {args.fold!r} not found under {layout.root / 'sequences'}")
    ckpt = Checkpoint.load(args.checkpoint)
    params = ckpt.model_params(best=not args.last)
    graphs = GraphStore(root=args.graphs)
    if args.pairs:
        pairs = _load_pairs(args.pairs, layout, seqs)
    else:
        pairs = _mine(layout, seqs, args, EVAL, args.seed)
    echo = {"sequences": seqs, "checkpoint": str(args.checkpoint), "params": "last" if args.last else "best",
            "graphs": str(args.graphs), "neg_ratio": args.neg_ratio}
    report = evaluate(params, ckpt.model_config, pairs, graphs, args.batch_size, echo)
    paths = emit_report(report, args.out)
    return (f"eval f1_max={report.f1_max!r} positives={report.positives} negatives={report.negatives} "
            f"report={paths['summary']}")


def cmd_transform(args) -> str:
    layout = _layout(args)
    seqs = _sequences(layout, args)
    if args.occlude is None and args.rotate is None:
        raise UsageError("transform needs --occlude and/or --rotate")
    if args.occlude is not None and not 0 <= args.occlude < 360:
        raise UsageError("--occlude must lie in [0, 360)")
    target = KittiLayout(args.out)
    if target.root.resolve() == layout.root.resolve():
        raise UsageError("--out must differ from --dataset; inputs are never modified")
    (target.root / "poses").mkdir(parents=True, exist_ok=True)
    n = kept = total = 0
    for seq in seqs:
        has_labels = (layout.sequence_dir(seq) / "labels").is_dir()
        for sub in ("velodyne", "labels") if has_labels else ("velodyne",):
            (target.sequence_dir(seq) / sub).mkdir(parents=True, exist_ok=True)
        for frame in layout.frames(seq):
            cloud = layout.load(seq, frame, with_labels=has_labels)
            rng = _scan_rng(args.seed, seq, frame)
            # draws happen in a fixed order whatever the options, so seeds stay comparable
            start, yaw = float(rng.uniform(0, 360)), float(rng.uniform(0, 2 * np.pi))
            if args.rotate is not None:
                cloud = rotate_cloud(cloud, yaw if args.rotate == "random" else np.radians(args.rotate))
            total += len(cloud)
            if args.occlude:
                cloud = occlude_cloud(cloud, start, args.occlude)
            kept += len(cloud)
            write_point_cloud(target.velodyne(seq, frame), cloud)
            if has_labels:
                write_labels(target.label(seq, frame), cloud.raw_labels)
            n += 1
        target.poses(seq).write_bytes(layout.poses(seq).read_bytes())
        target.times(seq).write_bytes(layout.times(seq).read_bytes())
    frac = kept / total if total else 1.0
    return f"transform scans={n} occlude={args.occlude} rotate={args.rotate} kept_fraction={frac!r} out={target.root}"


def cmd_plot(args) -> str:
    pr = read_pr_csv(Path(args.report) / "pr.csv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f1 = f1_max(pr)
    path = out / "pr.svg"
    path.write_text(pr_svg(pr, f"PR curve (F1 max {f1:.3f})"))
    return f"plot points={len(pr)} f1_max={f1!r} out={path}"


def cmd_similarity(args) -> str:
    layout = _layout(args)
    if args.sequence not in layout.sequences():
        raise UsageError(f"sequence {args.sequence!r} not found")
    ckpt = Checkpoint.load(args.checkpoint)
    frames = layout.frames(args.sequence)
    rows = similarity_matrix(ckpt.model_params(), ckpt.model_config, (args.sequence, args.query), frames,
                             GraphStore(root=args.graphs), args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"similarity_{args.sequence}_{args.query:06d}.csv"
    write_similarity_csv(path, rows)
    return f"similarity rows={len(rows)} query={args.sequence}/{args.query} out={path}"


def cmd_demo_synth(args) -> str:
    cfg = synth.SynthConfig(places=tuple(args.places), revisits=args.revisits, seed=args.seed)
    seqs = synth.generate(cfg)
    synth.write_kitti(seqs, args.out)
    scans = sum(len(s.scans) for s in seqs.values())
    return f"demo-synth sequences={len(seqs)} scans={scans} out={args.out}"


COMMANDS = {
    "build-graphs": cmd_build_graphs,
    "make-pairs": cmd_make_pairs,
    "train": cmd_train,
    "eval": cmd_eval,
    "transform": cmd_transform,
    "plot": cmd_plot,
    "similarity": cmd_similarity,
    "demo-synth": cmd_demo_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"sgpr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sgpr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SGPRError, OSError, ValueError) as exc:
        print(f"sgpr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
