"""Command-line front end: ``stgcn <subcommand> [flags]``.

Every run logs its resolved configuration as one JSON line on stderr.
Exit status is 0 only when the requested artifact was fully written;
1 signals a data, format or configuration failure and 2 a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    ManifestEntry,
    assemble_clip,
    compute_template,
    load_clip_frames,
    load_manifest,
    load_split,
    load_template,
    normalize_coordinates,
    quality_filter,
    save_template,
    split_dataset,
    write_dataset,
)
from .errors import ConfigurationError, StgcnError
from .graph import Strategy, build_openpose18_graph, label_map, normalize_partitions, partitioned_adjacency
from .net import DESK_CHANNELS, FULL_CHANNELS, load_checkpoint, save_checkpoint
from .train import TrainConfig, predict, prepare_model, synthetic_dataset, train

log = logging.getLogger("stgcn")

STRATEGY_NAMES = [s.value for s in Strategy]
ARCHITECTURES = {"desk": DESK_CHANNELS, "full": FULL_CHANNELS}


def _thread_count() -> int:
    raw = os.environ.get("STGCN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"STGCN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"STGCN_THREADS must be at least 1, got {n}")
    return n


def _echo_config(command: str, args: argparse.Namespace, **extra) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    resolved.update(extra)
    log.info(json.dumps({"command": command, "config": resolved}, sort_keys=True, default=str))


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


# -- preprocess ----------------------------------------------------------------

def _discover_clips(input_dir: Path):
    """``(class_names, [(clip_id, label, path)])`` from ``input_dir/<class>/<clip>``.

    A clip is a per-clip JSON file or a directory of per-frame JSON files.
    """
    if not input_dir.is_dir():
        raise ConfigurationError(f"--input-dir {input_dir} is not a readable directory")
    classes = sorted(p.name for p in input_dir.iterdir() if p.is_dir())
    found = []
    for label, name in enumerate(classes):
        for item in sorted((input_dir / name).iterdir()):
            if item.is_dir() or item.suffix == ".json":
                stem = item.name if item.is_dir() else item.stem
                found.append((f"{name}_{stem}", label, item))
    if not found:
        raise ConfigurationError(f"no clips under {input_dir} (expected <class>/<clip>.json or <class>/<clip>/)")
    found.sort(key=lambda c: c[0])
    ids = [c[0] for c in found]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("clip ids collide; rename clips so <class>_<clip> is unique")
    return classes, found


def cmd_preprocess(args) -> int:
    threads = _thread_count()
    _echo_config("preprocess", args, threads=threads)
    classes, found = _discover_clips(Path(args.input_dir))

    def process(item):
        clip_id, label, path = item
        clip = assemble_clip(load_clip_frames(path), clip_id, label, args.max_persons, args.frames)
        verdict = quality_filter(clip, args.min_recognition, args.max_persons)
        if verdict.accepted:
            clip = normalize_coordinates(clip, args.width, args.height)
        return clip, verdict

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(process, found))  # map keeps the sorted clip order

    accepted, rejected = [], {}
    for clip, verdict in results:
        if verdict.accepted:
            accepted.append(clip)
        else:
            rejected[verdict.reason] = rejected.get(verdict.reason, 0) + 1
    report = {"accepted": len(accepted), "rejected": dict(sorted(rejected.items()))}
    if not accepted:
        _emit(report)
        log.error("no clip passed the quality gate")
        return 1

    manifest = DatasetManifest(
        tuple(ManifestEntry(c.id, "", c.label) for c in accepted), tuple(classes))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = split_dataset(manifest, seed=args.seed)
    out = Path(args.out_dir)
    write_dataset(out, manifest, accepted)
    by_id = {c.id: c for c in accepted}
    try:
        template = compute_template([by_id[e.id] for e in manifest.split_entries("train")])
        save_template(template, out / "template.json")
        report["template"] = "template.json"
    except ConfigurationError as exc:
        log.warning("template not written: %s", exc)
        report["template"] = None
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return 0


# -- inspect-graph -------------------------------------------------------------

def cmd_inspect_graph(args) -> int:
    _echo_config("inspect-graph", args)
    strategy = Strategy.parse(args.strategy)
    template = None
    if strategy.needs_template:
        if args.template_file is None:
            raise ConfigurationError(f"strategy {strategy.value!r} needs --template-file")
        template = load_template(args.template_file)
    g = build_openpose18_graph()
    mapping = label_map(strategy, g, template)
    pa = partitioned_adjacency(g, mapping)
    normalized = normalize_partitions(pa, args.alpha)
    _emit({
        "strategy": strategy.value,
        "K": mapping.kernel_size,
        "label_map": mapping.as_json(),
        "partitions": pa.matrices.tolist(),
        "normalized": normalized.matrices.tolist(),
        "alpha": args.alpha,
    })
    return 0


# -- train / eval --------------------------------------------------------------

def _read_manifest(path):
    manifest = load_manifest(path)
    if not manifest.split_entries("train"):
        raise ConfigurationError(f"{path}: manifest has no train split")
    return manifest


def cmd_train(args) -> int:
    _echo_config("train", args)
    manifest = _read_manifest(args.manifest)
    cfg = TrainConfig(
        epochs=args.epochs, base_lr=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size, seed=args.seed, strategy=args.strategy,
        mask=args.m_mask, eval_every=args.eval_every, precision=args.precision,
    )
    clips = {c.id: c for c in load_split(manifest)}
    train_clips = [clips[e.id] for e in manifest.split_entries("train")]
    model = prepare_model(cfg, train_clips, len(manifest.class_names),
                          channels=ARCHITECTURES[args.arch], normalize_inputs=args.input_norm)
    model, history = train(cfg, manifest, model, clips)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.stgm")
    history.write_csv(out / "history.csv")
    _emit({"checkpoint": str(out / "model.stgm"), "history": str(out / "history.csv"),
           "epochs": cfg.epochs, "final_val_top1": history.final_val_top1})
    return 0


def cmd_eval(args) -> int:
    _echo_config("eval", args)
    manifest = load_manifest(args.manifest)
    model = load_checkpoint(args.checkpoint)
    if model.config.num_classes != len(manifest.class_names):
        raise ConfigurationError(
            f"checkpoint has {model.config.num_classes} classes, manifest has {len(manifest.class_names)}")
    clips = load_split(manifest, None if args.split == "all" else args.split)
    if not clips:
        raise ConfigurationError(f"split {args.split!r} is empty")
    preds, ties = predict(model, clips)
    labels = np.array([c.label for c in clips])
    _emit({"split": args.split, "n": len(clips), "top1": float(np.mean(preds == labels)), "ties": ties})
    return 0


# -- gen-synth -------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    _echo_config("gen-synth", args)
    manifest, clips = synthetic_dataset(args.classes, args.per_class, T=args.frames,
                                        noise_sigma=args.sigma, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = split_dataset(manifest, seed=args.seed)
    written = write_dataset(args.out_dir, manifest, clips)
    _emit({"manifest": str(Path(args.out_dir) / "manifest.json"), "entries": len(written.entries),
           "train": len(written.split_entries("train")), "val": len(written.split_entries("val"))})
    return 0


# -- parser ----------------------------------------------------------------------

def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgcn", allow_abbrev=False,
                                     description="Skeleton action recognition with partitioned graph convolutions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "OpenPose JSON clips to STGT tensors and a manifest")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-recognition", type=float, default=0.5)
    p.add_argument("--max-persons", type=_positive_int, default=2)
    p.add_argument("--frames", type=_positive_int, default=300)
    p.add_argument("--width", type=float, default=340.0)
    p.add_argument("--height", type=float, default=256.0)
    p.add_argument("--seed", type=int, default=0, help="seed of the 3:1 train/val split")

    p = add("inspect-graph", cmd_inspect_graph, "print label maps and partition matrices as JSON")
    p.add_argument("--strategy", required=True, choices=STRATEGY_NAMES)
    p.add_argument("--template-file")
    p.add_argument("--alpha", type=float, default=0.001)

    p = add("train", cmd_train, "train a model and write checkpoint and history")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", default="spatial", choices=STRATEGY_NAMES)
    p.add_argument("--m-mask", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.0001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for model.stgm and history.csv")
    p.add_argument("--eval-every", type=_positive_int, default=5)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="desk")
    p.add_argument("--precision", choices=["float64", "float32"], default="float64")
    p.add_argument("--input-norm", type=_on_off, default=True, metavar="{on,off}")

    p = add("eval", cmd_eval, "top-1 accuracy of a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "all"])

    p = add("gen-synth", cmd_gen_synth, "write a synthetic labelled dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=_positive_int, default=32)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=_positive_int, default=300)
    p.add_argument("--out-dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("stgcn")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    root.propagate = False
    logging.getLogger("stgcn.train").setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (StgcnError, OSError) as exc:
        log.error("%s", exc)
        return 1
    finally:
        root.removeHandler(handler)
        root.propagate = True


if __name__ == "__main__":
    sys.exit(main())
