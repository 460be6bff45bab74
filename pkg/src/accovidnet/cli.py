"""Command-line entry point: ``accovidnet <subcommand> [flags]``.

Exit status is 0 on success, 1 on validation errors (bad flags, configs,
manifests, checkpoints) and 2 on runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import filelock

from . import __version__
from .config import RunConfig, load_config, save_config
from .data import (
    BatchStream,
    SplitConfig,
    derive_split,
    generate_synthetic,
    load_manifest,
    load_split,
    write_manifest,
)
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigurationError,
    ManifestError,
    StateError,
)
from .evaluation import ConfusionMatrix, compute_sensitivity, emit_report, evaluate, parse_report

logger = logging.getLogger("accovidnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".accovidnet.lock"
VALIDATION_ERRORS = (
    ConfigurationError,
    ArgumentError,
    ManifestError,
    CheckpointError,
    StateError,
    filelock.Timeout,
)


class UsageError(Exception):
    pass


class OutputExistsError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="accovidnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"accovidnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def out_flags(sp):
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")

    def data_flags(sp):
        sp.add_argument("--manifest", required=True, type=Path)
        sp.add_argument("--data-root", type=Path, default=None,
                        help="dataset root (default: $ACCOVIDNET_DATA_ROOT, else the manifest folder)")

    def train_flags(sp):
        sp.add_argument("--config", type=Path, default=None, help="YAML run config")
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--no-augment", action="store_true", default=None)
        sp.add_argument("--grad-clip", type=float, default=None)
        sp.add_argument("--prefetch", type=int, default=None)

    sp = sub.add_parser("synth", help="write a synthetic three-class dataset")
    sp.add_argument("--per-class", type=int, default=64)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    out_flags(sp)

    sp = sub.add_parser("split", help="derive one COVIDx configuration from another")
    data_flags(sp)
    sp.add_argument("--from", dest="from_version", required=True)
    sp.add_argument("--to", dest="to_version", required=True)
    sp.add_argument("--swap-normal-pneumonia", action="store_true")
    out_flags(sp)

    sp = sub.add_parser("train-encoder", help="stage 1: contrastive training of encoder + projection")
    data_flags(sp)
    train_flags(sp)
    sp.add_argument("--tau", type=float, default=None, help="contrastive temperature")
    sp.add_argument("--plain-shuffle", action="store_true", default=None,
                    help="plain shuffling instead of class-balanced batches")
    sp.add_argument("--warm-start", type=Path, default=None, help="checkpoint to copy encoder weights from")
    out_flags(sp)

    sp = sub.add_parser("train-classifier", help="stage 2: freeze the encoder and train the classifier")
    data_flags(sp)
    train_flags(sp)
    sp.add_argument("--encoder", required=True, type=Path, help="stage-1 checkpoint")
    out_flags(sp)

    sp = sub.add_parser("evaluate", help="confusion matrix and sensitivity on the test split")
    data_flags(sp)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument("--dataset-version", default="custom")
    sp.add_argument("--model-id", default=None)
    sp.add_argument("--report", type=Path, default=None, help="structured report path (default: OUT/report.json)")
    out_flags(sp)

    sp = sub.add_parser("report", help="render a report or confusion matrix file")
    sp.add_argument("--input", required=True, type=Path, help="report.json or confusion_matrix.json")
    sp.add_argument("--format", choices=("structured", "table"), default="table")
    out_flags(sp)
    return p


def _train_overrides(args, stage: int) -> dict:
    """Flags the user actually passed, as TrainConfig field overrides."""
    o = {}
    if args.lr is not None:
        o["learning_rate" if stage == 1 else "learning_rate_stage2"] = args.lr
    if args.batch is not None:
        o["batch_size"] = args.batch
    if args.epochs is not None:
        o["epochs_stage1" if stage == 1 else "epochs_stage2"] = args.epochs
    if args.seed is not None:
        o["seed"] = args.seed
    if args.grad_clip is not None:
        o["grad_clip_norm"] = args.grad_clip
    if args.prefetch is not None:
        o["prefetch"] = args.prefetch
    if stage == 1:
        if args.tau is not None:
            o["temperature"] = args.tau
        if args.plain_shuffle:
            o["balanced_sampling"] = False
        if args.warm_start is not None:
            o["warm_start_path"] = str(args.warm_start)
    return o


def resolve_run_config(args, base: RunConfig | None = None, stage: int = 1) -> RunConfig:
    """Explicit flags override the config file, which overrides ``base`` (built-in defaults)."""
    cfg = base or RunConfig()
    if getattr(args, "config", None) is not None:
        from_file = load_config(args.config)
        cfg = from_file if stage == 1 else replace(cfg, train=from_file.train, augment=from_file.augment)
    cfg = cfg.with_train(**_train_overrides(args, stage))
    if getattr(args, "no_augment", None):
        cfg = replace(cfg, augment=replace(cfg.augment, enabled=False))
    return cfg


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and not out.is_dir():
        raise OutputExistsError(f"--out {out} exists and is not a directory")
    if out.exists() and not overwrite:
        contents = [p for p in out.iterdir() if p.name != LOCK_NAME]
        if contents:
            raise OutputExistsError(f"--out {out} is not empty; pass --overwrite to reuse it")
    out.mkdir(parents=True, exist_ok=True)


def _repro(out: Path, command: str, argv: list[str], config: RunConfig | None = None, seed=None) -> None:
    stanza = {
        "command": command,
        "argv": argv,
        "code_version": __version__,
        "config_digest": config.digest() if config is not None else None,
        "seed": seed if seed is not None else (config.train.seed if config is not None else None),
    }
    (out / "reproducibility.json").write_text(json.dumps(stanza, indent=2, sort_keys=True) + "\n")


def _cmd_synth(args, argv):
    m = generate_synthetic(args.out, args.per_class, args.size, args.seed)
    logger.info("wrote %d images and %s", len(m), args.out / "manifest.csv")
    _repro(args.out, "synth", argv, seed=args.seed)


def _cmd_split(args, argv):
    base = load_manifest(args.manifest, root=args.data_root)
    src = SplitConfig.covidx(args.from_version, args.swap_normal_pneumonia)
    dst = SplitConfig.covidx(args.to_version, args.swap_normal_pneumonia)
    derived = derive_split(base, src, dst)
    write_manifest(derived, args.out / "manifest.csv")
    logger.info("%s -> %s: %s", src.name, dst.name, derived.summary())
    _repro(args.out, "split", argv)


def _cmd_train_encoder(args, argv):
    from .checkpoint import save_checkpoint
    from .training import JsonlLog, init_state, train_stage1

    cfg = resolve_run_config(args, stage=1)
    manifest = load_manifest(args.manifest, root=args.data_root)
    train = load_split(manifest, "train", cfg.image_size)
    stream = BatchStream(
        train, cfg.train.batch_size, cfg.train.seed,
        balanced=cfg.train.balanced_sampling, augment=cfg.augment,
        min_batch=2, prefetch=cfg.train.prefetch,
    )
    save_config(cfg, args.out / "config.yaml")
    _repro(args.out, "train-encoder", argv, cfg)
    state = init_state(cfg)
    train_stage1(state, stream, log=JsonlLog(args.out / "train_log.jsonl"))
    save_checkpoint(state, args.out / "encoder.ckpt")
    logger.info("stage 1 done: %d steps, final loss %.6g", len(state.history),
                state.history[-1]["loss"] if state.history else float("nan"))


def _cmd_train_classifier(args, argv):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .training import JsonlLog, freeze_encoder, train_stage2

    state = load_checkpoint(args.encoder)
    cfg = resolve_run_config(args, base=state.config, stage=2)
    state.config = cfg
    manifest = load_manifest(args.manifest, root=args.data_root)
    train = load_split(manifest, "train", cfg.image_size)
    stream = BatchStream(train, cfg.train.batch_size, cfg.train.seed, augment=cfg.augment,
                         prefetch=cfg.train.prefetch)
    save_config(cfg, args.out / "config.yaml")
    _repro(args.out, "train-classifier", argv, cfg)
    freeze_encoder(state)
    train_stage2(state, stream, log=JsonlLog(args.out / "train_log.jsonl"))
    save_checkpoint(state, args.out / "model.ckpt")
    logger.info("stage 2 done: final loss %.6g", state.history[-1]["loss"] if state.history else float("nan"))


def _cmd_evaluate(args, argv):
    from .checkpoint import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    if state.classifier is None:
        raise CheckpointError(f"{args.checkpoint} has no classifier; run train-classifier first")
    cfg = state.config
    manifest = load_manifest(args.manifest, root=args.data_root)
    data = load_split(manifest, args.split, cfg.image_size)
    stream = BatchStream(data, 64, shuffle=False, prefetch=cfg.train.prefetch)
    cm = evaluate(state.model(), stream.batches("eval", 0))
    model_id = args.model_id or f"{args.checkpoint.stem}-{cfg.digest()[:8]}"
    report = compute_sensitivity(cm, model_id=model_id, dataset_version=args.dataset_version)
    (args.out / "confusion_matrix.json").write_text(json.dumps(cm.to_dict(), indent=2) + "\n")
    (args.report or args.out / "report.json").write_text(emit_report(report, "structured"))
    _repro(args.out, "evaluate", argv, cfg)
    sys.stdout.write(emit_report(report, "table"))


def _cmd_report(args, argv):
    try:
        doc = json.loads(args.input.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArgumentError(f"cannot read {args.input}: {exc}") from exc
    if "counts" in doc:
        report = compute_sensitivity(ConfusionMatrix.from_dict(doc))
    else:
        report = parse_report(json.dumps(doc))
    text = emit_report(report, args.format)
    name = "report.json" if args.format == "structured" else "report.txt"
    (args.out / name).write_text(text)
    _repro(args.out, "report", argv)
    sys.stdout.write(text)


COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train-encoder": _cmd_train_encoder,
    "train-classifier": _cmd_train_classifier,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def _origin(exc: BaseException) -> str:
    """Package module where ``exc`` was raised, e.g. ``data.manifest``."""
    origin = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("accovidnet.") and name != "accovidnet.cli":
            origin = name.removeprefix("accovidnet.")
    return origin


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        _prepare_out(args.out, args.overwrite)
        lock = filelock.FileLock(str(args.out / LOCK_NAME), timeout=0)
        with lock:
            try:
                COMMANDS[args.command](args, argv)
            finally:
                with contextlib.suppress(OSError):
                    (args.out / LOCK_NAME).unlink()
    except OutputExistsError as exc:
        print(f"accovidnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except VALIDATION_ERRORS as exc:
        print(f"accovidnet {args.command}: {_origin(exc)} error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"accovidnet {args.command}: {_origin(exc)} error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
