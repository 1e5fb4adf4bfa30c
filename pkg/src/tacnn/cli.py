"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage/configuration error,
3 data or format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, data, gconv, profiler
from .augment import BodyPartition, MixPolicy, apply_batch_mix, default_partition, scale_coordinates
from .errors import ConfigurationError, FormatError, InputError, NumericError, UsageError
from .model import ModelConfig, TaCNN, attention_csv, export_attention
from .train import TrainConfig, evaluate, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("tacnn")


def load_config(path):
    """Read ``{"model": ..., "train": ..., "mix": ..., "partition": {"lower": [...]}}``."""
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from None
    unknown = set(raw) - {"model", "train", "mix", "partition"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    try:
        model_cfg = ModelConfig(**raw.get("model", {}))
        train_raw = dict(raw.get("train", {}))
        train_raw["mix"] = MixPolicy(**raw.get("mix", {}))
        train_cfg = TrainConfig(**train_raw)
    except TypeError as e:
        raise ConfigurationError(str(e)) from None
    part = raw.get("partition")
    partition = (BodyPartition.from_lower(part["lower"], model_cfg.joints) if part
                 else default_partition(model_cfg.joints))
    return model_cfg, train_cfg, partition


def _threads():
    try:
        return max(1, int(os.environ.get("TACNN_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("TACNN_THREADS must be an integer") from None


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _load_model(path):
    if path is None or not Path(path).exists():
        raise FormatError(f"checkpoint not found: {path}")
    model, _ = checkpoint.load_checkpoint(path)
    return model


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def coord_scale_experiment(model, dataset, trials=18, seed=0):
    """Accuracy under random per-coordinate scaling; first row is the baseline.

    Returns rows ``(s_x, s_y, s_z, accuracy)``; factors are uniform in [0, 1].
    """
    rng = np.random.default_rng(seed)
    coords = model.config.coords
    rows = [tuple([1.0] * coords) + (evaluate(model, dataset).top1,)]
    for _ in range(trials):
        s = rng.uniform(0.0, 1.0, size=coords)
        scaled = [scale_coordinates(x, s) for x in dataset]
        rows.append(tuple(float(v) for v in s) + (evaluate(model, scaled).top1,))
    return rows


def _rows_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args):
    model_cfg, _, _ = load_config(args.config)
    report = profiler.profile(model_cfg, args.persons)
    _emit(profiler.render_report(report, args.format), args.out)
    return EXIT_OK


def cmd_equiv_check(args):
    ok = True
    lines = []
    for dtype in (np.float32, np.float64):
        rep = gconv.equiv_report(args.trials, dtype=dtype, seed=args.seed or 0)
        lines.append(rep.text())
        ok &= rep.ok
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args):
    _require(args, "data", "out")
    model_cfg, train_cfg, partition = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
        train_cfg.mix.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
        train_cfg.milestones = tuple(m for m in train_cfg.milestones if m < args.epochs)
    if args.mix is not None:
        train_cfg.mix.mode = args.mix
    dataset = data.load_dataset(args.data)
    if not dataset:
        raise InputError("training set is empty")
    val = data.load_dataset(args.val) if args.val else None
    model = TaCNN(model_cfg, seed=train_cfg.seed)
    log_path = args.log or f"{args.out}.metrics.jsonl"
    result = train_loop(model, dataset, train_cfg, val=val, log_path=log_path,
                        checkpoint_path=args.out, partition=partition)
    last = result.metrics[-1]
    print(f"trained {len(result.metrics)} epochs, loss {last['loss']:.4f}, train acc {last['train_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    _require(args, "data")
    model = _load_model(args.checkpoint)
    result = evaluate(model, data.load_dataset(args.data))
    print(f"top1 {result.top1:.6f}")
    if args.out:
        Path(args.out).write_text(result.per_class_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_augment(args):
    _require(args, "data", "out")
    _, train_cfg, partition = load_config(args.config)
    policy = MixPolicy(args.mix or "skeleton",
                       train_cfg.mix.lam if args.lam is None else args.lam,
                       train_cfg.mix.alpha if args.alpha is None else args.alpha,
                       args.seed if args.seed is not None else train_cfg.mix.seed)
    dataset = data.load_dataset(args.data)
    rng = np.random.default_rng(policy.seed)
    if policy.mode == "skeleton" and dataset and partition.joints != dataset[0].data.shape[-1]:
        partition = default_partition(dataset[0].data.shape[-1])
    out = []
    bs = train_cfg.batch_size
    for start in range(0, len(dataset), bs):
        batch = dataset[start:start + bs]
        out.extend(apply_batch_mix(batch, policy, partition, rng) if len(batch) >= 2 else batch)
    data.save_dataset(args.out, out)
    return EXIT_OK


def cmd_coord_scale(args):
    _require(args, "data")
    model = _load_model(args.checkpoint)
    rows = coord_scale_experiment(model, data.load_dataset(args.data), args.trials,
                                  args.seed if args.seed is not None else 0)
    coords = model.config.coords
    names = ["s_x", "s_y", "s_z"] if coords == 3 else [f"s_{i}" for i in range(coords)]
    _emit(_rows_csv(names + ["accuracy"], rows), args.out)
    return EXIT_OK


def cmd_export_attention(args):
    _require(args, "data")
    model = _load_model(args.checkpoint)
    _emit(attention_csv(export_attention(model, data.load_dataset(args.data))), args.out)
    return EXIT_OK


def _convert_skeleton(path, model_cfg):
    seq = data.read_ntu_skeleton(path)
    return data.preprocess(seq, model_cfg.frames, model_cfg.max_persons,
                           label=data.ntu_label_from_name(path), num_classes=model_cfg.classes,
                           sample_id=Path(path).stem)


def cmd_convert(args):
    _require(args, "data", "out")
    model_cfg, _, _ = load_config(args.config)
    src = Path(args.data)
    if src.is_dir() or src.suffix == ".skeleton":
        files = sorted(src.glob("*.skeleton")) if src.is_dir() else [src]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            samples = list(pool.map(lambda p: _convert_skeleton(p, model_cfg), files))
    else:
        samples = data.load_dataset(src)
    data.save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_synth(args):
    _require(args, "out")
    model_cfg, _, _ = load_config(args.config)
    samples = data.synth_dataset(model_cfg.classes, args.per_class, model_cfg.frames, model_cfg.joints,
                                 model_cfg.coords, seed=args.seed or 0)
    data.save_dataset(args.out, samples)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "augment": cmd_augment,
    "equiv-check": cmd_equiv_check,
    "coord-scale": cmd_coord_scale,
    "export-attention": cmd_export_attention,
    "convert": cmd_convert,
    "synth": cmd_synth,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tacnn", description="Skeleton action recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="PATH")
        for f in flags:
            f(p)
        return p

    data_flag = lambda p: p.add_argument("--data", metavar="PATH")  # noqa: E731
    ckpt_flag = lambda p: p.add_argument("--checkpoint", metavar="PATH")  # noqa: E731

    command("train", "train a model", data_flag,
            lambda p: p.add_argument("--val", metavar="PATH"),
            lambda p: p.add_argument("--log", metavar="PATH"),
            lambda p: p.add_argument("--epochs", type=int),
            lambda p: p.add_argument("--mix", choices=["skeleton", "mixup", "none"]))
    command("eval", "top-1 and per-class accuracy", data_flag, ckpt_flag)
    command("profile", "parameter and FLOPs table",
            lambda p: p.add_argument("--persons", type=int, default=1),
            lambda p: p.add_argument("--format", choices=["text", "csv"], default="text"))
    command("augment", "mix samples of a dataset", data_flag,
            lambda p: p.add_argument("--mix", choices=["skeleton", "mixup"]),
            lambda p: p.add_argument("--lambda", dest="lam", type=float),
            lambda p: p.add_argument("--alpha", type=float))
    command("equiv-check", "verify graph conv == 1x1 conv",
            lambda p: p.add_argument("--trials", type=int, default=1000))
    command("coord-scale", "random coordinate scaling experiment", data_flag, ckpt_flag,
            lambda p: p.add_argument("--trials", type=int, default=18))
    command("export-attention", "per-class mean SE gates as CSV", data_flag, ckpt_flag)
    command("convert", "convert .skeleton/SKB1/JSONL datasets", data_flag)
    command("synth", "write a synthetic dataset",
            lambda p: p.add_argument("--per-class", type=int, default=16))
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
