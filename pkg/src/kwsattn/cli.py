"""Command-line entry point.

    kwsattn manifest --data-root DIR --out-dir OUT
    kwsattn train    --data-root DIR --task cmd12 --out-dir OUT [--seed N]
    kwsattn eval     --data-root DIR --task cmd12 --checkpoint CK --out-dir OUT [--split test]
    kwsattn infer    --checkpoint CK --wav FILE
    kwsattn attend   --checkpoint CK --wav FILE --out-dir OUT
    kwsattn params   --task cmd12

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from ._files import atomic_write
from .audio_io import TASKS, build_manifest, fit_length, get_task, read_wav
from .dsp import SpectrogramConfig, log_mel
from .errors import ConfigError, KwsError, NumericError
from .model import AttRnnConfig, count_params, forward
from .training import TrainConfig, history_csv, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - {"spectrogram", "model", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _configs(args):
    overrides = _load_config(getattr(args, "config", None))
    try:
        return _build_configs(args, overrides)
    except TypeError as exc:
        # dataclass constructors reject unknown keys with TypeError
        raise ConfigError(f"bad config override: {exc}") from exc


def _build_configs(args, overrides):
    spec_cfg = SpectrogramConfig(**overrides.get("spectrogram", {}))
    task = get_task(args.task)
    model_kw = {"n_classes": task.n_classes, "n_mels": spec_cfg.n_mels, **overrides.get("model", {})}
    model_cfg = AttRnnConfig(**model_kw)
    train_kw = dict(overrides.get("train", {}))
    if getattr(args, "seed", None) is not None:
        train_kw["seed"] = args.seed
    for flag in ("max_epochs", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[flag] = value
    return task, spec_cfg, model_cfg, TrainConfig(**train_kw)


def cmd_manifest(args) -> int:
    manifest = build_manifest(args.data_root, args.validation_list, args.test_list)
    out = Path(args.out_dir) / "manifest.csv"
    atomic_write(out, manifest.to_csv())
    counts = {s: sum(1 for e in manifest.entries if e[2] == s) for s in ("train", "validation", "test")}
    print(f"{len(manifest.entries)} entries ({counts}), {len(manifest.noise_files)} noise files -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import render_history_svg

    task, spec_cfg, model_cfg, train_cfg = _configs(args)
    manifest = build_manifest(args.data_root, args.validation_list, args.test_list)
    out_dir = Path(args.out_dir)
    result = train(manifest, task, model_cfg, train_cfg, spec_cfg, val_split=args.val_split,
                   abort_path=out_dir / "last_good.ckpt")
    save_checkpoint(out_dir / "model.ckpt", result.best)
    atomic_write(out_dir / "history.csv", history_csv(result.history))
    render_history_svg(result.history, out_dir / "history.svg")
    print(f"best epoch {result.best.epoch}: val accuracy {result.best.best_val_accuracy:.4f} "
          f"({result.steps} steps run) -> {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_split, top_confusions
    from .plotting import render_confusion_svg

    ck = load_checkpoint(args.checkpoint)
    task = get_task(args.task or ck.task)
    manifest = build_manifest(args.data_root, args.validation_list, args.test_list)
    report = evaluate_split(ck, manifest, args.split, task)
    out_dir = Path(args.out_dir)
    atomic_write(out_dir / "report.json", report.to_json())
    atomic_write(out_dir / "confusion.csv", report.confusion.to_csv())
    render_confusion_svg(report.confusion.counts, report.confusion.labels, out_dir / "confusion.svg",
                         title=f"{task.name} ({args.split})")
    print(f"accuracy {report.overall_accuracy:.4f} ({report.accuracy_fraction}) on {report.n_samples} clips")
    for true, pred, n in top_confusions(report, 5) if report.n_samples else []:
        print(f"  {true} -> {pred}: {n}")
    return EXIT_OK


def _clip(ck, wav):
    return fit_length(read_wav(wav), ck.spec_config.raw_len)


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    _, trace = forward(_clip(ck, args.wav), ck.params, "infer", ck.spec_config)
    labels = ck.labels or tuple(str(i) for i in range(ck.model_config.n_classes))
    print(labels[trace.predicted_class])
    for label, p in zip(labels, trace.probabilities):
        print(f"{label}\t{p:.6f}")
    return EXIT_OK


def cmd_attend(args) -> int:
    from .evaluation import export_attention
    from .plotting import render_attention_svg

    ck = load_checkpoint(args.checkpoint)
    clip = _clip(ck, args.wav)
    export = export_attention(ck, clip)
    stem = Path(args.wav).stem
    out_dir = Path(args.out_dir)
    atomic_write(out_dir / f"{stem}_attention.csv", export.to_csv())
    render_attention_svg(clip, log_mel(clip, ck.spec_config), export.trace,
                         out_dir / f"{stem}_attention.svg", title=f"predicted: {export.predicted_label}")
    print(f"{export.predicted_label} -> {out_dir / (stem + '_attention.svg')}")
    return EXIT_OK


def cmd_params(args) -> int:
    _, _, model_cfg, _ = _configs(args)
    total, layers = count_params(model_cfg)
    width = max(len(n) for n in layers)
    print(f"{'layer':<{width}}  {'params':>9}")
    for name, n in layers.items():
        print(f"{name:<{width}}  {n:>9,}")
    print(f"{'total':<{width}}  {total:>9,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kwsattn", description="Attention-RNN keyword spotting")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp):
        sp.add_argument("--data-root", required=True)
        sp.add_argument("--validation-list")
        sp.add_argument("--test-list")

    tasks = sorted(TASKS)

    sp = sub.add_parser("manifest", help="dump the split manifest as CSV")
    data_flags(sp)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_manifest)

    sp = sub.add_parser("train", help="train a model and save the best checkpoint")
    data_flags(sp)
    sp.add_argument("--task", required=True, choices=tasks)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--val-split", default="validation", choices=["validation", "train", "test"])
    sp.add_argument("--config", help="JSON overrides with spectrogram/model/train sections")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    data_flags(sp)
    sp.add_argument("--task", choices=tasks)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="classify one WAV file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--wav", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("attend", help="export the attention trace and figure for one WAV file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_attend)

    sp = sub.add_parser("params", help="print the per-layer parameter count")
    sp.add_argument("--task", required=True, choices=tasks)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KwsError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
