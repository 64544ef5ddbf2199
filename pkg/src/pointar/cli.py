"""Command-line entry point.

Subcommands: gen-data, pretrain, post-pretrain, finetune, eval, few-shot,
inspect, gradcheck. Settings resolve in order preset < config file <
explicit flag, and the effective configuration is echoed to
``<outdir>/config.resolved``. Exit codes: 0 success, 1 usage error,
2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from pointar import data as data_mod
from pointar import gradcheck as gradcheck_mod
from pointar import model as model_mod
from pointar import sequencer as seq_mod
from pointar import training
from pointar.exceptions import FormatError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


# Preset values shared by the training subcommands. The desk preset runs
# in minutes on a CPU; the paper preset mirrors the published recipe
# (ViT-S extractor, 300 epochs at batch 128).
PRESETS = {
    "desk": dict(
        channels=96, heads=4, extractor_depth=4, generator_depth=4,
        num_points=1024, num_patches=64, patch_points=32,
        epochs=60, batch_size=16, lr=1e-3, weight_decay=0.05,
        warmup_frac=0.05, mask_ratio=0.7, seed=0, dtype="float32",
        lam=3.0, log_every=1, checkpoint_every=0, augment=0,
    ),
    "paper": dict(
        channels=384, heads=6, extractor_depth=12, generator_depth=4,
        num_points=1024, num_patches=64, patch_points=32,
        epochs=300, batch_size=128, lr=1e-3, weight_decay=0.05,
        warmup_frac=0.05, mask_ratio=0.7, seed=0, dtype="float32",
        lam=3.0, log_every=1, checkpoint_every=0, augment=0,
    ),
}

_INT_KEYS = {
    "channels", "heads", "extractor_depth", "generator_depth", "num_points",
    "num_patches", "patch_points", "epochs", "batch_size", "seed",
    "log_every", "checkpoint_every", "augment",
}
_FLOAT_KEYS = {"lr", "weight_decay", "warmup_frac", "mask_ratio", "lam"}


def _parse_config_file(path: Path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    if not path.exists():
        raise FormatError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _coerce(key: str, value):
    if isinstance(value, str):
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    return value


def _resolve(args, keys) -> dict:
    """preset defaults, overlaid by config file, overlaid by explicit flags."""
    resolved = {k: PRESETS[args.preset][k] for k in keys}
    if args.config:
        file_values = _parse_config_file(Path(args.config))
        for key, value in file_values.items():
            if key not in resolved:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            resolved[key] = _coerce(key, value)
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _outdir(args) -> Path:
    out = args.out or os.environ.get("POINTAR_OUT") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(outdir: Path, resolved: dict) -> None:
    lines = [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    (outdir / "config.resolved").write_text("\n".join(lines) + "\n")


def _configs_from(resolved: dict, num_classes: int = 5, mode: str = "pretrain"):
    model_cfg = model_mod.ModelConfig(
        channels=resolved["channels"],
        heads=resolved["heads"],
        extractor_depth=resolved["extractor_depth"],
        generator_depth=resolved["generator_depth"],
        dual_mask_ratio=resolved["mask_ratio"],
        points_per_patch=resolved["patch_points"],
        num_classes=num_classes,
        mode=mode,
    )
    seq_cfg = seq_mod.SequencerConfig(
        num_points=resolved["num_points"],
        num_patches=resolved["num_patches"],
        points_per_patch=resolved["patch_points"],
        channels=resolved["channels"],
    )
    return model_cfg, seq_cfg


def _load_records(path: str, split: str | None = None):
    records = data_mod.load_dataset(path)
    if split is None:
        return records
    manifest_path = Path(str(path) + ".manifest")
    if not manifest_path.exists():
        return records
    manifest = data_mod.load_manifest(manifest_path)
    if len(manifest) != len(records):
        raise FormatError(f"{manifest_path}: manifest length does not match dataset")
    idx = manifest.indices(split)
    return [records[int(i)] for i in idx]


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out_path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    records = data_mod.generate_dataset(args.pool, args.count, args.seed, args.points)
    data_mod.save_dataset(out, records)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise UsageError("--fractions needs three comma-separated values")
    if args.count > 0:
        manifest = data_mod.make_splits([r.label for r in records], args.seed, fractions)
        data_mod.save_manifest(Path(str(out) + ".manifest"), manifest)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


_TRAIN_KEYS = [
    "channels", "heads", "extractor_depth", "generator_depth", "num_points",
    "num_patches", "patch_points", "epochs", "batch_size", "lr",
    "weight_decay", "warmup_frac", "mask_ratio", "seed", "dtype",
    "log_every", "checkpoint_every", "augment", "lam",
]


def cmd_pretrain(args) -> int:
    resolved = _resolve(args, _TRAIN_KEYS)
    outdir = _outdir(args)
    _echo_config(outdir, resolved)
    records = _load_records(args.data, split=None)
    model_cfg, seq_cfg = _configs_from(resolved)
    if args.resume:
        state = training.load_checkpoint(args.resume, expect_model=model_cfg, expect_seq=seq_cfg)
    else:
        state = training.new_state(
            model_cfg, seq_cfg, seed=resolved["seed"], dtype=resolved["dtype"],
            weight_decay=resolved["weight_decay"],
        )
    cfg = training.PretrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        base_lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        warmup_frac=resolved["warmup_frac"],
        dual_mask_ratio=resolved["mask_ratio"],
        seed=resolved["seed"],
        log_every=resolved["log_every"],
        checkpoint_every=resolved["checkpoint_every"],
        augment=bool(resolved["augment"]),
        dtype=resolved["dtype"],
    )
    state, log = training.pretrain(records, state, cfg, outdir=outdir)
    final = log.steps[-1].loss_total if log.steps else float("nan")
    print(f"final_loss={final:.6f}")
    return EXIT_OK


def cmd_post_pretrain(args) -> int:
    resolved = _resolve(args, _TRAIN_KEYS)
    outdir = _outdir(args)
    _echo_config(outdir, resolved)
    records = _load_records(args.data, split="train")
    state = training.load_checkpoint(args.checkpoint)
    cfg = training.PostPretrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        warmup_frac=resolved["warmup_frac"],
        seed=resolved["seed"],
        log_every=resolved["log_every"],
        augment=bool(resolved["augment"]),
    )
    state, log = training.post_pretrain(records, state, cfg, outdir=outdir)
    result = training.evaluate(records, state)
    final = log.steps[-1].loss_total if log.steps else float("nan")
    print(f"final_loss={final:.6f} accuracy={result.accuracy:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    resolved = _resolve(args, _TRAIN_KEYS)
    outdir = _outdir(args)
    _echo_config(outdir, resolved)
    train_records = _load_records(args.data, split="train")
    if args.checkpoint:
        state = training.load_checkpoint(args.checkpoint)
    else:
        model_cfg, seq_cfg = _configs_from(resolved)
        state = training.new_state(
            model_cfg, seq_cfg, seed=resolved["seed"], dtype=resolved["dtype"],
            weight_decay=resolved["weight_decay"],
        )
    cfg = training.FinetuneConfig(
        lam=resolved["lam"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        warmup_frac=resolved["warmup_frac"],
        seed=resolved["seed"],
        log_every=resolved["log_every"],
        augment=bool(resolved["augment"]),
        freeze=tuple(p for p in (args.freeze or "").split(",") if p),
    )
    state, log = training.finetune(train_records, state, cfg, outdir=outdir)
    eval_records = _load_records(args.data, split="val") or train_records
    result = training.evaluate(eval_records, state)
    final = log.steps[-1].loss_total if log.steps else float("nan")
    print(f"final_loss={final:.6f} accuracy={result.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = _load_records(args.data, split=args.split)
    state = training.load_checkpoint(args.checkpoint)
    result = training.evaluate(records, state)
    per_class = " ".join(f"{cls}:{acc:.3f}" for cls, acc in sorted(result.per_class.items()))
    print(f"accuracy={result.accuracy:.4f} count={result.count} per_class=[{per_class}]")
    return EXIT_OK


def cmd_few_shot(args) -> int:
    records = _load_records(args.data, split=None)
    state = training.load_checkpoint(args.checkpoint)
    result = training.few_shot_eval(
        records,
        state,
        ways=args.ways,
        shots=args.shots,
        trials=args.trials,
        queries_per_class=args.queries,
        seed=args.seed,
        freeze_extractor=not args.full_finetune,
    )
    print(f"{args.ways}-way {args.shots}-shot: {result}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.what == "mask":
        rng = np.random.default_rng(args.seed)
        mask = model_mod.build_dual_mask(args.n, args.ratio, rng)
        for row in mask.matrix.astype(int):
            print("".join(str(v) for v in row))
        return EXIT_OK

    records = _load_records(args.input, split=None)
    if not 0 <= args.record < len(records):
        raise UsageError(f"--record must be in [0, {len(records)})")
    cloud = records[args.record].points.astype(np.float64)
    cfg = seq_mod.SequencerConfig(
        num_points=cloud.shape[0],
        num_patches=min(args.num_patches, cloud.shape[0]),
        points_per_patch=min(32, cloud.shape[0]),
        channels=96,
    )
    _, centers, _ = seq_mod.sequence_geometry(cloud, cfg)
    if args.what == "morton":
        from pointar.geometry import morton_encode

        codes = morton_encode(centers, centers.min(axis=0), centers.max(axis=0))
        for i, (code, c) in enumerate(zip(codes, centers)):
            print(f"{i}\t{int(code)}\t{c[0]:+.6f} {c[1]:+.6f} {c[2]:+.6f}")
        return EXIT_OK
    if args.what == "rdp":
        offsets = np.diff(centers, axis=0)
        norms = np.linalg.norm(offsets, axis=1, keepdims=True)
        units = np.where(norms > 0, offsets / norms, 0.0)
        rdp = seq_mod.relative_direction_prompts(centers, cfg.channels)
        enc_norms = np.linalg.norm(rdp, axis=1)
        for i, (u, en) in enumerate(zip(units, enc_norms)):
            print(f"{i}\t{u[0]:+.6f} {u[1]:+.6f} {u[2]:+.6f}\t|pe|={en:.6f}")
        return EXIT_OK
    raise UsageError(f"unknown --what {args.what!r}")


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.standard_suite(corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}s}  max_rel_err={r.max_error:.3e}  {status}")
        if not r.passed:
            failed.append(r)
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"gradcheck FAILED: {names}")
        return EXIT_NUMERIC
    print("gradcheck passed: all primitives within tolerance")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="named configuration bundle")
    p.add_argument("--config", help="key = value file overriding the preset")
    p.add_argument("--out", help="output directory (default: $POINTAR_OUT or .)")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="clouds per step")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="AdamW weight decay")
    p.add_argument("--warmup-frac", dest="warmup_frac", type=float, help="warmup fraction of total steps")
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, help="dual-mask ratio in [0,1)")
    p.add_argument("--lambda", dest="lam", type=float, help="generation-loss weight in fine-tuning")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--dtype", choices=["float32", "float64"], help="training precision")
    p.add_argument("--channels", type=int, help="token width D")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--extractor-depth", dest="extractor_depth", type=int, help="extractor blocks")
    p.add_argument("--generator-depth", dest="generator_depth", type=int, help="generator blocks")
    p.add_argument("--num-points", dest="num_points", type=int, help="points per cloud M")
    p.add_argument("--num-patches", dest="num_patches", type=int, help="patches per cloud n")
    p.add_argument("--patch-points", dest="patch_points", type=int, help="points per patch k")
    p.add_argument("--log-every", dest="log_every", type=int, help="steps between metric rows")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   help="epochs between mid-run checkpoints (0 = final only)")
    p.add_argument("--augment", type=int, choices=[0, 1], help="1 enables train-time augmentation")


def build_parser() -> _Parser:
    parser = _Parser(prog="pointar", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--pool", choices=["A", "B"], required=True, help="shape parameter pool")
    p.add_argument("--count", type=int, required=True, help="number of records")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", dest="out_path", required=True, help="dataset file path")
    p.add_argument("--points", type=int, default=1024, help="points per cloud")
    p.add_argument("--fractions", default="1,0,0",
                   help="train,val,test split fractions for the manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset file (pool A)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("post-pretrain", help="supervised stage on the labeled pool",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="labeled dataset file (pool B)")
    p.add_argument("--checkpoint", required=True, help="pre-trained checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_post_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with auxiliary generation loss",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="labeled dataset file")
    p.add_argument("--checkpoint", help="starting checkpoint (omit for from-scratch)")
    p.add_argument("--freeze", help="comma-separated parameter prefixes to freeze")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="labeled dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--split", default="test", choices=["train", "val", "test"],
                   help="manifest split to use (falls back to all records)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("few-shot", help="w-way s-shot evaluation",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="labeled dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint providing the extractor")
    p.add_argument("--ways", type=int, default=5, help="classes per trial")
    p.add_argument("--shots", type=int, default=10, help="support records per class")
    p.add_argument("--trials", type=int, default=10, help="independent trials")
    p.add_argument("--queries", type=int, default=20, help="held-out queries per class")
    p.add_argument("--seed", type=int, default=0, help="protocol seed")
    p.add_argument("--full-finetune", action="store_true",
                   help="fine-tune the whole model instead of only the head")
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("inspect", help="dump internals: morton order, dual mask, prompts",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--what", required=True, choices=["morton", "mask", "rdp"],
                   help="which internal to dump")
    p.add_argument("--input", help="dataset file (morton/rdp)")
    p.add_argument("--record", type=int, default=0, help="record index (morton/rdp)")
    p.add_argument("--num-patches", dest="num_patches", type=int, default=64,
                   help="patches to build (morton/rdp)")
    p.add_argument("--n", type=int, default=8, help="mask size (mask)")
    p.add_argument("--ratio", type=float, default=0.7, help="dual-mask ratio (mask)")
    p.add_argument("--seed", type=int, default=0, help="mask seed (mask)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every primitive",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "inspect" and args.what in ("morton", "rdp") and not args.input:
            raise UsageError("--input is required for morton/rdp inspection")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
