"""Batch command-line interface: synth, preprocess, train, eval, predict.

Every file-producing run writes a ``manifest.json`` into its output
directory before any other output, with the fully resolved configuration
and a status that moves from ``running`` to ``ok`` or ``failed``. Exit
codes: 0 success, 1 validation/config, 2 IO/format, 3 numeric divergence.

The ``OSVIT_THREADS`` environment variable caps BLAS worker threads; it is
ignored under ``--deterministic``, which pins them to one for bitwise
reproducible training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .dataset import (
    Sample,
    Sequence,
    SurvivalClass,
    build_samples,
    filter_cohort,
    split_by_subject,
    synth_generate,
    write_split_manifest,
)
from .errors import ConfigError, DivergenceError, FormatError
from .evaluation import confusion, metrics, render_report, report_as_dict
from .model import (
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import PreprocessConfig, preprocess_volume
from .training import TrainConfig, predict, train
from .volume_io import (
    read_metadata_csv,
    read_nifti_subset,
    read_rvol,
    write_metadata_csv,
    write_rvol,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    IO/format problems, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """Single provenance record per run, written before any other output."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed,
                 inputs: list, outputs: list):
        self.path = out_dir / "manifest.json"
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "prng": "pcg64",
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "started": _now(),
            "finished": None,
            "status": "running",
            "error": None,
            "versions": {"osvit": __version__, "rvol_format": 1, "osvt_format": 1},
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")

    def finish_ok(self, extra: dict | None = None):
        if extra:
            self.doc.update(extra)
        self.doc["status"] = "ok"
        self.doc["finished"] = _now()
        self._write()

    def finish_failed(self, error: str, extra: dict | None = None):
        if extra:
            self.doc.update(extra)
        self.doc["status"] = "failed"
        self.doc["error"] = error
        self.doc["finished"] = _now()
        self._write()


def _thread_policy(deterministic: bool):
    """Returns a threadpoolctl limiter to keep alive, or None."""
    if deterministic:
        return threadpool_limits(limits=1)
    env = os.environ.get("OSVIT_THREADS")
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"OSVIT_THREADS must be an integer, got {env!r}") from None
        if workers < 1:
            raise ConfigError(f"OSVIT_THREADS must be >= 1, got {workers}")
        return threadpool_limits(limits=workers)
    return None


def _parse_target(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"--target must look like 50x64x64, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--target must be three integers, got {text!r}") from None


def _load_volume_file(path: Path):
    if path.suffix == ".nii":
        return read_nifti_subset(path)
    return read_rvol(path)


def _load_sample_volumes(data_dir: Path, records):
    lookup = {}
    for record in records:
        for seq in Sequence:
            path = data_dir / f"{record.subject_id}_{seq.value}.rvol"
            if path.exists():
                lookup[(record.subject_id, seq)] = read_rvol(path)
    return lookup


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    records, volumes = synth_generate(args.subjects, args.seed)
    outputs = [out_dir / f"{sid}_{seq.value}.rvol" for (sid, seq) in volumes]
    outputs.append(out_dir / "metadata.csv")
    manifest = RunManifest(out_dir, "synth",
                           {"subjects": args.subjects, "generator": "ellipsoid-phantom"},
                           args.seed, inputs=[], outputs=outputs)
    try:
        for (sid, seq), volume in volumes.items():
            write_rvol(volume, out_dir / f"{sid}_{seq.value}.rvol")
        write_metadata_csv(records, out_dir / "metadata.csv")
    except Exception as exc:
        manifest.finish_failed(str(exc))
        raise
    manifest.finish_ok()
    print(f"wrote {len(volumes)} volumes and metadata.csv to {out_dir}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    target = _parse_target(args.target)
    cfg = PreprocessConfig(target_dims=target, spline_order=args.order)
    sources = sorted(p for p in in_dir.iterdir()
                     if p.suffix in (".rvol", ".nii")) if in_dir.is_dir() else []
    if not sources:
        raise ConfigError(f"no volumes found in {in_dir} (expected .rvol or .nii files)")
    outputs = [out_dir / (p.stem + ".rvol") for p in sources]
    manifest = RunManifest(out_dir, "preprocess",
                           {"target_dims": list(target), "spline_order": args.order},
                           None, inputs=sources, outputs=outputs)
    _thread_policy(deterministic=False)
    failures = []
    for src, dst in zip(sources, outputs):
        try:
            write_rvol(preprocess_volume(_load_volume_file(src), cfg), dst)
        except (FormatError, ConfigError, OSError) as exc:
            msg = str(exc) if str(src) in str(exc) else f"{src}: {exc}"
            failures.append({"file": str(src), "error": msg})
            print(f"error: {msg}", file=sys.stderr)
    if failures:
        manifest.finish_failed(f"{len(failures)} of {len(sources)} volumes failed",
                               extra={"file_errors": failures})
        return EXIT_IO
    manifest.finish_ok()
    print(f"preprocessed {len(sources)} volumes into {out_dir}")
    return EXIT_OK


def _build_cohort_samples(data_dir: Path, csv_path: Path, model_cfg: ModelConfig):
    records = filter_cohort(read_metadata_csv(csv_path))
    if len(records) < 2:
        raise ConfigError(f"cohort has {len(records)} labeled GTR subject(s); "
                          "need at least 2")
    lookup = _load_sample_volumes(data_dir, records)
    return build_samples(records, lookup, expected_dims=model_cfg.input_dims)


def _metrics_doc(params, model_cfg, split, batch_size):
    doc = {}
    for partition, samples in (("train", split.train), ("test", split.test)):
        true_codes = [int(s.label) for s in samples]
        pred_codes, _ = predict(params, model_cfg, samples, batch_size)
        cm = confusion(true_codes, pred_codes)
        doc[partition] = report_as_dict(metrics(cm, partition=partition), cm)
    return doc


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    model_cfg = ModelConfig()
    train_cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience,
        early_stop_min_delta=args.min_delta,
        val_fraction=args.val_fraction,
        seed=args.seed,
        deterministic_mode=args.deterministic,
    )
    outputs = [out_dir / name for name in
               ("split.txt", "trainlog.jsonl", "best.osvt", "last.osvt", "metrics.json")]
    manifest = RunManifest(
        out_dir, "train",
        {"model": {
            "input_dims": list(model_cfg.input_dims),
            "patch_dims": list(model_cfg.patch_dims),
            "embed_dim": model_cfg.embed_dim, "num_layers": model_cfg.num_layers,
            "num_heads": model_cfg.num_heads, "head_dim": model_cfg.head_dim,
            "mlp_dim": model_cfg.mlp_dim, "num_classes": model_cfg.num_classes,
            "age_scale_divisor": model_cfg.age_scale_divisor,
            "dropout": model_cfg.dropout, "final_norm": model_cfg.final_norm},
         "train": {"learning_rate": train_cfg.learning_rate,
                   "batch_size": train_cfg.batch_size,
                   "max_epochs": train_cfg.max_epochs,
                   "early_stop_patience": train_cfg.early_stop_patience,
                   "early_stop_min_delta": train_cfg.early_stop_min_delta,
                   "val_fraction": train_cfg.val_fraction,
                   "deterministic_mode": train_cfg.deterministic_mode,
                   "ignore_index": train_cfg.ignore_index},
         "train_fraction": args.train_fraction},
        args.seed, inputs=[args.data, args.csv], outputs=outputs)
    try:
        _thread_policy(train_cfg.deterministic_mode)
        samples = _build_cohort_samples(Path(args.data), Path(args.csv), model_cfg)
        split = split_by_subject(samples, train_fraction=args.train_fraction,
                                 seed=args.seed)
        write_split_manifest(split, out_dir / "split.txt")

        params = init_params(model_cfg, seed=args.seed)
        best, log = train(params, model_cfg, split, train_cfg)
        log.write_jsonl(out_dir / "trainlog.jsonl")
        save_checkpoint(best, model_cfg, out_dir / "best.osvt")
        save_checkpoint(params, model_cfg, out_dir / "last.osvt")

        if log.divergence_error is not None:
            manifest.finish_failed(f"training diverged: {log.divergence_error}",
                                   extra={"best_epoch": log.best_epoch})
            print(f"error: training diverged: {log.divergence_error}", file=sys.stderr)
            return EXIT_DIVERGENCE

        doc = _metrics_doc(best, model_cfg, split, train_cfg.batch_size)
        (out_dir / "metrics.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except Exception as exc:
        manifest.finish_failed(str(exc))
        raise
    manifest.finish_ok(extra={"best_epoch": log.best_epoch,
                              "early_stop_epoch": log.early_stop_epoch,
                              "epochs_run": len(log.epochs)})
    print(f"trained {len(log.epochs)} epochs; best epoch {log.best_epoch}; "
          f"train accuracy {doc['train']['accuracy']:.3f}, "
          f"test accuracy {doc['test']['accuracy']:.3f}")
    return EXIT_OK


def _read_split_file(path: Path) -> dict:
    partitions = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            sid, partition = line.split(",")
        except ValueError:
            raise FormatError(f"{path}: malformed split line {line_no}: {line!r}") from None
        if partition not in ("train", "test"):
            raise FormatError(f"{path}: unknown partition {partition!r}, line {line_no}")
        partitions[sid] = partition
    return partitions


def cmd_eval(args) -> int:
    if not args.all and args.split is None:
        raise ConfigError("provide --split FILE or --all to select samples")
    params, model_cfg = load_checkpoint(args.model)
    samples = _build_cohort_samples(Path(args.data), Path(args.csv), model_cfg)
    if args.all:
        selected, partition = samples, "all"
    else:
        partitions = _read_split_file(Path(args.split))
        selected = [s for s in samples if partitions.get(s.subject_id) == args.partition]
        partition = args.partition
        if not selected:
            raise ConfigError(f"no samples in partition {partition!r} of {args.split}")
    true_codes = [int(s.label) for s in selected]
    pred_codes, _ = predict(params, model_cfg, selected)
    cm = confusion(true_codes, pred_codes)
    report = metrics(cm, partition=partition)
    rendered = render_report(report, cm, format=args.format)
    if args.out:
        out_dir = Path(args.out)
        suffix = "json" if args.format == "json" else "txt"
        out_path = out_dir / f"report_{partition}.{suffix}"
        manifest = RunManifest(out_dir, "eval",
                               {"partition": partition, "format": args.format},
                               None, inputs=[args.model, args.data, args.csv],
                               outputs=[out_path])
        out_path.write_text(rendered + "\n", encoding="utf-8")
        manifest.finish_ok()
    print(rendered)
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.age <= 0:
        raise ConfigError(f"--age must be > 0, got {args.age}")
    params, model_cfg = load_checkpoint(args.model)
    volume = _load_volume_file(Path(args.volume))
    if volume.dims != tuple(model_cfg.input_dims):
        expected = "x".join(str(d) for d in model_cfg.input_dims)
        raise ConfigError(f"volume dims {volume.dims} do not match the model's "
                          f"expected {expected}; run the preprocess command first")
    sample = Sample("cli", Sequence.T1, volume, float(args.age), SurvivalClass.LONG)
    codes, probs = predict(params, model_cfg, [sample])
    code = int(codes[0])
    name = SurvivalClass(code).name.capitalize()
    prob_text = ", ".join(f"{p:.6f}" for p in probs[0])
    print(f"class={code} name={name} probs=[{prob_text}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osvit",
                     description="Volumetric transformer survival classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="downsample and quantize volumes")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--target", default="50x64x64")
    p.add_argument("--order", type=int, default=3, choices=(1, 3))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed cohort")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--csv", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort partition")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--csv", required=True, metavar="FILE")
    p.add_argument("--split", metavar="FILE")
    p.add_argument("--all", action="store_true")
    p.add_argument("--partition", choices=("train", "test"), default="test")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify a single preprocessed volume")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--volume", required=True, metavar="FILE")
    p.add_argument("--age", type=float, required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
