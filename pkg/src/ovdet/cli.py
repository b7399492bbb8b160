"""Command-line entry point: generate, tile, train, eval, infer, gradcheck, benchmark."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence


from . import __version__
from .checkpoint import write_manifest
from .data import (GenerationError, IngestionError, SceneSpec, TileSpec, AnnotationRecord, generate_scenes,
                   load_annotations, load_image, save_dataset, tile_image)
from .metrics import ProtocolError
from .text import ClassVocabulary, load_vocabulary, normalize_name
from .train import (ConfigError, DetectionDataset, RunConfig, TrainingDiverged, VocabularyError, detect,
                    evaluate_model, load_model, read_config_file, save_model, to_pixel_detections, train,
                    write_loss_curve)

log = logging.getLogger("ovdet")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _split_list(text: Optional[str]) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _pair(text: str, cast=float):
    a, b = text.split(",")
    return cast(a), cast(b)


def _dataset_dir(path: Path, partition: str) -> Path:
    return path if (path / "annotations.json").exists() else path / partition


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    out = Path(args.out)
    novel = [n for group in args.novel for n in _split_list(group)]
    spec = SceneSpec(canvas=args.canvas, shapes=tuple(_split_list(args.shapes)),
                     colors=tuple(_split_list(args.colors)), novel=tuple(novel),
                     objects=_pair(args.objects, int), size=(_pair(args.size)[0] / args.canvas,
                                                             _pair(args.size)[1] / args.canvas),
                     clutter=args.clutter, seed=args.seed)
    vocab = spec.vocabulary()
    out.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = {"status": "incomplete", "command": "generate", "version": __version__,
                                   "seed": args.seed, "scenes": args.scenes, "eval_scenes": args.eval_scenes,
                                   "canvas": args.canvas, "classes": ";".join(vocab.names),
                                   "novel": ";".join(vocab.names_with_role("novel"))}
    write_manifest(out / "manifest.txt", manifest)
    for partition, count in (("train", args.scenes), ("eval", args.eval_scenes)):
        images, records = generate_scenes(spec, count, partition)
        save_dataset(out / partition, images, records, vocab)
        manifest[f"checksum.{partition}"] = _tree_digest(out / partition)
    manifest["status"] = "complete"
    write_manifest(out / "manifest.txt", manifest)
    print(f"wrote {args.scenes} train and {args.eval_scenes} eval scenes to {out}")
    return 0


# ---------------------------------------------------------------- tile

def cmd_tile(args) -> int:
    src, out = Path(args.data), Path(args.out)
    loaded = load_annotations(src / "annotations.json",
                              src / "novel.txt" if (src / "novel.txt").exists() else None)
    spec = TileSpec(args.tile, args.stride or args.tile, args.min_fraction)
    images, records = [], []
    for rec in loaded.records:
        image = load_image(src / "images" / rec.file_name)
        for tile in tile_image(image, rec.objects, spec):
            image_id = len(records)
            stem = Path(rec.file_name).stem
            records.append(AnnotationRecord(image_id, f"{stem}_{tile.offset[0]}_{tile.offset[1]}.png",
                                            tile.image.shape[1], tile.image.shape[0], list(tile.objects)))
            images.append(tile.image)
    save_dataset(out, images, records, loaded.vocabulary)
    print(f"wrote {len(records)} tiles to {out}")
    return 0


# ---------------------------------------------------------------- train

def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then flags given on the command line."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = cfg.merged(read_config_file(args.config))
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    return cfg.merged(overrides)


def _manifest_entries(cfg: RunConfig, status: str, **extra) -> Dict[str, object]:
    entries: Dict[str, object] = {"status": status, "command": "train", "version": __version__,
                                  "seed": cfg.seed, "config_hash": cfg.config_hash()}
    for key, value in cfg.computational().items():
        entries[f"config.{key}"] = value
    entries.update(extra)
    return entries


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.data or not cfg.out:
        raise ConfigError("train needs --data and --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", _manifest_entries(cfg, "incomplete"))
    dataset = DetectionDataset.from_dir(_dataset_dir(Path(cfg.data), "train"))
    try:
        result = train(cfg, dataset)
    except TrainingDiverged as exc:
        write_manifest(out / "manifest.txt", _manifest_entries(cfg, "failed", error=str(exc), failed_step=exc.step))
        raise
    write_loss_curve(out / "loss_curve.csv", result.curve)
    save_model(out / "checkpoint.bin", result.model, cfg, dataset.vocab, len(result.curve))
    final = result.curve[-1] if result.curve else {}
    write_manifest(out / "manifest.txt", _manifest_entries(
        cfg, "complete", steps_completed=len(result.curve), parameters=result.model.num_parameters(),
        final_loss=repr(float(final.get("total", float("nan")))), loss_curve="loss_curve.csv",
        checkpoint="checkpoint.bin", report="none"))
    print(f"trained {len(result.curve)} steps; checkpoint at {out / 'checkpoint.bin'}")
    return 0


# ---------------------------------------------------------------- eval / infer

def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    dataset = DetectionDataset.from_dir(_dataset_dir(Path(args.data), "eval"))
    vocab = load_vocabulary(args.vocab) if args.vocab else None
    report = evaluate_model(model, dataset, args.protocol, args.score_floor, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "summary.json").write_text(report.to_json())
    (out / "per_class.csv").write_text(report.to_csv())
    for split, metrics in report.summary.items():
        print(f"{split}: " + " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def cmd_infer(args) -> int:
    model, meta = load_model(args.checkpoint)
    if args.classes:
        names = [normalize_name(n) for n in _split_list(args.classes)]
    elif args.vocab:
        names = list(load_vocabulary(args.vocab).names)
    else:
        names = list(meta["vocabulary"])
    try:
        image = load_image(args.image)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {args.image}: {exc}") from exc
    [(dset, canvas)] = detect(model, [image], names)
    dets = to_pixel_detections(dset, canvas, 0, args.score_floor)
    dets.sort(key=lambda d: -d.score)
    for d in dets:
        print(f"{d.class_name}\t{d.score:.6f}\t" + " ".join(f"{v:.2f}" for v in d.box))
    if not dets:
        print(f"no detections above {args.score_floor}")
    return 0


# ---------------------------------------------------------------- gradcheck / benchmark

def cmd_gradcheck(args) -> int:
    from .gradcheck import TOL, main_report
    results, seconds = main_report(args.seeds)
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.case] = max(worst.get(r.case, 0.0), r.error)
    for case, err in worst.items():
        print(f"{'ok  ' if err < TOL else 'FAIL'} {case:<18} max rel err {err:.2e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results)} instances, {failed} failed, {seconds:.1f}s")
    return 1 if failed else 0


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkPreset, run_benchmark
    preset = BenchmarkPreset(seeds=tuple(range(args.seeds)))
    if args.steps is not None:
        preset = replace(preset, steps=args.steps)
    outcome = run_benchmark(preset, log_fn=print)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "benchmark.json").write_text(json.dumps(outcome.to_dict(), indent=1, sort_keys=True) + "\n")
    for line in outcome.verdict_lines():
        print(line)
    return 0 if outcome.passed else 1


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (overridden by flags)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name.startswith("enable_"):
            short = f.name[len("enable_"):].replace("_", "-")
            p.add_argument(f"--enable-{short}", dest=f.name, action="store_const", const=True, default=None)
            p.add_argument(f"--disable-{short}", dest=f.name, action="store_const", const=False)
        elif f.name == "deterministic":
            p.add_argument(flag, dest=f.name, action="store_const", const=True, default=None,
                           help="serial execution for bit-exact reruns")
        else:
            typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            p.add_argument(flag, dest=f.name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovdet", description="Open-vocabulary detector toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic color-shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--eval-scenes", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--novel", action="append", default=[], help="novel class name(s), comma separated")
    g.add_argument("--canvas", type=int, default=256)
    g.add_argument("--colors", default="red,green,blue")
    g.add_argument("--shapes", default="circle,square,triangle,cross,ring")
    g.add_argument("--objects", default="5,25", help="min,max objects per scene")
    g.add_argument("--size", default="4,24", help="min,max object size in pixels")
    g.add_argument("--clutter", type=float, default=0.5)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("tile", help="cut a dataset into fixed-size tiles")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tile", type=int, default=800)
    t.add_argument("--stride", type=int, default=None)
    t.add_argument("--min-fraction", type=float, default=0.4)
    t.set_defaults(func=cmd_tile)

    tr = sub.add_parser("train", help="train a detector")
    _add_run_flags(tr)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--protocol", choices=("zsd", "gzsd", "closed"), default="gzsd")
    e.add_argument("--score-floor", type=float, default=0.0)
    e.add_argument("--vocab", help="vocabulary file (one name per line, optional '\\tnovel')")
    e.add_argument("--deterministic", action="store_true", help="accepted for symmetry; eval is always serial")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect objects in one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--classes", help="comma-separated class names")
    i.add_argument("--vocab", help="vocabulary file")
    i.add_argument("--score-floor", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=3, help="instances per case")
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("benchmark", help="ablation benchmark on synthetic scenes")
    b.add_argument("--out", required=True)
    b.add_argument("--steps", type=int, default=None)
    b.add_argument("--seeds", type=int, default=3)
    b.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate" and args.eval_scenes is None:
        args.eval_scenes = max(1, args.scenes // 10) if args.scenes else 0
    try:
        return args.func(args)
    except (ConfigError, VocabularyError, ProtocolError, IngestionError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
