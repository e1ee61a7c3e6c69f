"""Command-line interface: synth, preprocess, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage/validation error,
3 numerical divergence.

All randomness derives from one --seed; subsystem seeds use fixed offsets:
phantom i uses seed+i, the train/val split uses seed+1, parameter
initialization uses seed+2, epoch shuffling uses seed+3, gradient-check
coordinate sampling uses seed+4.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .errors import FudsaError, InvalidArgument, NumericalDivergence
from .losses import LossConfig, METRICS_CSV_HEADER, metrics_csv_row
from .network import FudsaNet, NetworkConfig, VariantFlags, VARIANTS
from .training import (AdamState, TrainConfig, evaluate, gradient_check,
                       load_checkpoint, save_checkpoint, train)

_BOOL_KEYS = ("spatial_only", "deep_supervision", "decoder_residuals",
              "channel_branch_includes_sl")
_INT_KEYS = ("levels", "base_channels", "input_channels", "reduction",
             "batch_size", "max_epochs", "patience", "seed", "size")
_FLOAT_KEYS = ("learning_rate", "min_delta", "alpha", "beta", "gamma", "smooth")
_STR_KEYS = ("upsample_mode", "dtype")
_LIST_KEYS = ("sdc_dilations", "side_weights")
_ALL_KEYS = _BOOL_KEYS + _INT_KEYS + _FLOAT_KEYS + _STR_KEYS + _LIST_KEYS


def parse_config_text(text):
    """Flat key=value lines, '#' comments; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _ALL_KEYS:
            raise InvalidArgument(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidArgument(f"config line {lineno}: duplicate key {key!r}")
        if key in _BOOL_KEYS:
            if raw not in ("true", "false"):
                raise InvalidArgument(f"config line {lineno}: {key} must be true/false")
            values[key] = raw == "true"
        elif key in _INT_KEYS:
            values[key] = int(raw)
        elif key in _FLOAT_KEYS:
            values[key] = float(raw)
        elif key in _LIST_KEYS:
            parts = [p for p in raw.split(",") if p]
            values[key] = (tuple(int(p) for p in parts) if key == "sdc_dilations"
                           else tuple(float(p) for p in parts))
        else:
            values[key] = raw
    return values


def render_config(net: NetworkConfig, tr: TrainConfig, extra=None):
    v = net.variant
    lines = [
        f"levels={net.levels}",
        f"base_channels={net.base_channels}",
        f"input_channels={net.input_channels}",
        f"reduction={net.reduction}",
        "sdc_dilations=" + ",".join(str(d) for d in net.sdc_dilations),
        f"upsample_mode={net.upsample_mode}",
        f"dtype={net.dtype}",
        f"spatial_only={str(v.spatial_only).lower()}",
        f"deep_supervision={str(v.deep_supervision).lower()}",
        f"decoder_residuals={str(v.decoder_residuals).lower()}",
        f"channel_branch_includes_sl={str(v.channel_branch_includes_sl).lower()}",
        f"learning_rate={tr.learning_rate}",
        f"batch_size={tr.batch_size}",
        f"max_epochs={tr.max_epochs}",
        f"patience={tr.patience}",
        f"min_delta={tr.min_delta}",
        f"seed={tr.seed}",
        f"alpha={tr.loss.alpha}",
        f"beta={tr.loss.beta}",
        f"gamma={tr.loss.gamma}",
        f"smooth={tr.loss.smooth}",
    ]
    if tr.loss.side_weights is not None:
        lines.append("side_weights=" + ",".join(str(w) for w in tr.loss.side_weights))
    for k, val in (extra or {}).items():
        lines.append(f"{k}={val}")
    return "\n".join(lines) + "\n"


def _build_configs(values):
    net = NetworkConfig(
        levels=values.get("levels", 4),
        base_channels=values.get("base_channels", 16),
        input_channels=values.get("input_channels", 1),
        reduction=values.get("reduction", 4),
        sdc_dilations=values.get("sdc_dilations", (1, 2, 4)),
        upsample_mode=values.get("upsample_mode", "bilinear"),
        dtype=values.get("dtype", "f32"),
        variant=VariantFlags(
            spatial_only=values.get("spatial_only", False),
            deep_supervision=values.get("deep_supervision", True),
            decoder_residuals=values.get("decoder_residuals", True),
            channel_branch_includes_sl=values.get("channel_branch_includes_sl", False),
        ))
    loss = LossConfig(
        alpha=values.get("alpha", 0.7),
        beta=values.get("beta", 0.3),
        gamma=values.get("gamma", 4.0 / 3.0),
        smooth=values.get("smooth", 1e-6),
        side_weights=values.get("side_weights"),
    )
    tr = TrainConfig(
        learning_rate=values.get("learning_rate", 1e-4),
        batch_size=values.get("batch_size", 4),
        max_epochs=values.get("max_epochs", 300),
        patience=values.get("patience", 10),
        min_delta=values.get("min_delta", 1e-5),
        seed=values.get("seed", 0),
        loss=loss,
    )
    return net, tr


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    if args.size % 16:
        raise InvalidArgument(f"--size {args.size} is not divisible by 16 (2^levels)")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(args.count):
        hu, mask, _ = D.synth_phantom_fields(args.seed + i, args.size)
        ident = f"phantom{args.seed + i:06d}"
        D.write_raw_slice(out / "images" / f"{ident}.pgm", D.RawSlice(hu, ident))
        D.write_mask(out / "masks" / f"{ident}.pgm", mask)
        ids.append(ident)
    D.write_manifest(out / "manifest.txt", ids)
    print(f"wrote {len(ids)} phantom pairs to {out}")
    return 0


def cmd_preprocess(args):
    if args.size % 16:
        raise InvalidArgument(f"--size {args.size} is not divisible by 16 (2^levels)")
    src, out = Path(args.indir), Path(args.out)
    ids, _ = D.read_manifest(src / "manifest.txt")
    pairs = []
    for ident in ids:
        raw = D.read_raw_slice(src / "images" / f"{ident}.pgm", ident)
        img = D.window_and_normalize(raw, args.lo_hu, args.hi_hu)
        mask = T.from_array(D.read_mask(src / "masks" / f"{ident}.pgm"))
        pairs.append(D.resize_pair(D.SamplePair(img, mask, ident), args.size))
    pairs = D.filter_lesion_slices(pairs)
    if len(pairs) < 2:
        raise InvalidArgument(f"only {len(pairs)} lesion slices; need at least 2 to split")
    split = D.split_dataset([p.identifier for p in pairs], args.seed + 1)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        D.write_image01(out / "images" / f"{p.identifier}.pgm", p.image)
        D.write_mask(out / "masks" / f"{p.identifier}.pgm", p.mask)
    D.write_manifest(out / "manifest.txt", [p.identifier for p in pairs], split)
    print(f"lo_hu={args.lo_hu} hi_hu={args.hi_hu} size={args.size}")
    print(f"kept {len(pairs)} of {len(ids)} slices; "
          f"split {len(split.train_ids)}/{len(split.val_ids)}")
    return 0


def _load_split(data_dir):
    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise InvalidArgument(f"missing manifest: {manifest}")
    ids, split = D.read_manifest(manifest)
    if split is None:
        raise InvalidArgument(f"{manifest} has no split sections; run preprocess first")
    return (D.load_pairs(root, split.train_ids), D.load_pairs(root, split.val_ids))


def cmd_train(args):
    values = {}
    if args.config:
        values = parse_config_text(Path(args.config).read_text())
    if args.seed is not None:
        values["seed"] = args.seed
    if args.learning_rate is not None:
        values["learning_rate"] = args.learning_rate
    if args.max_epochs is not None:
        values["max_epochs"] = args.max_epochs
    if args.batch_size is not None:
        values["batch_size"] = args.batch_size
    if args.patience is not None:
        values["patience"] = args.patience
    net_cfg, tr_cfg = _build_configs(values)
    if args.variant:
        net_cfg = net_cfg.with_variant(args.variant)

    train_set, val_set = _load_split(args.data)
    model = FudsaNet(net_cfg, seed=tr_cfg.seed + 2)
    tr_cfg = replace(tr_cfg, seed=tr_cfg.seed + 3)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(rec):
        print(f"epoch {rec.epoch}: train {rec.train_loss:.4f} "
              f"val {rec.val_loss:.4f} dsc {rec.val_dsc:.4f}")

    report = train(model, train_set, val_set, tr_cfg, log=log if args.verbose else None)
    save_checkpoint(model, AdamState(model.named_params()), out / "best.ckpt")
    save_checkpoint(model, None, out / "final.ckpt")
    (out / "report.csv").write_text(report.csv())
    (out / "config.txt").write_text(render_config(net_cfg, tr_cfg))
    print(f"best epoch {report.best_epoch}, best val loss {report.best_val_loss:.6f}")
    return 0


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    root = Path(args.data)
    _, split = D.read_manifest(root / "manifest.txt")
    if split is None:
        raise InvalidArgument("dataset has no split; run preprocess first")
    ids = split.train_ids if args.split == "train" else split.val_ids
    pairs = D.load_pairs(root, ids)
    size = pairs[0].image.shape[2]
    if size % (1 << model.config.levels):
        raise InvalidArgument(
            f"dataset extent {size} incompatible with a {model.config.levels}-level model")
    record, _ = evaluate(model, pairs)
    print(METRICS_CSV_HEADER)
    print(metrics_csv_row(args.split, len(pairs), record))
    return 0


def cmd_predict(args):
    model, _ = load_checkpoint(args.checkpoint)
    img = D.read_image01(args.image)
    div = 1 << model.config.levels
    if img.shape[0] % div or img.shape[1] % div:
        raise InvalidArgument(
            f"image extents {img.shape} must be divisible by 2^{model.config.levels}")
    x = T.Tensor(img[np.newaxis, np.newaxis].astype(model.config.np_dtype))
    out = model(x)
    mask = (out.final_map.data[0, 0] >= 0.5).astype(np.uint8)
    D.write_pgm(args.out, mask * 255, 255)
    if args.dump_attention:
        dump = Path(args.dump_attention)
        dump.mkdir(parents=True, exist_ok=True)
        for level, res in out.attn.items():
            T.write_ften(dump / f"att_l{level}_wcha.ften", res.channel_gate)
            T.write_ften(dump / f"att_l{level}_q.ften", res.spatial_gate)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    if args.size % (1 << args.levels):
        raise InvalidArgument(f"--size {args.size} not divisible by 2^{args.levels}")
    cfg = NetworkConfig(levels=args.levels, base_channels=args.channels,
                        dtype=args.precision)
    model = FudsaNet(cfg, seed=args.seed + 2)
    pair = D.synth_phantom(args.seed, args.size)
    x = T.Tensor(pair.image.data.astype(cfg.np_dtype))
    y = T.Tensor(pair.mask.data.astype(cfg.np_dtype))
    tol = 1e-5 if args.precision == "f64" else 1e-3
    results = gradient_check(model, x, y, n_samples=args.samples,
                             seed=args.seed + 4, corrupt=args.corrupt)
    failures = []
    for name, err in results:
        status = "ok" if err < tol else "FAIL"
        print(f"{status:4s} {err:.3e} {name}")
        if err >= tol:
            failures.append(name)
    worst = max(err for _, err in results)
    print(f"checked {len(results)} parameter tensors, max rel err {worst:.3e}, "
          f"tolerance {tol:g}")
    if failures:
        print("failing tensors: " + ", ".join(failures))
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="fudsa",
        description="Full-scale deeply supervised attention segmentation toolkit. "
                    "Subsystem seeds derive from --seed by fixed offsets "
                    "(+i phantom i, +1 split, +2 init, +3 shuffle, +4 gradcheck).")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="window, normalize, resize, filter and split")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lo-hu", type=float, default=D.DEFAULT_LO_HU)
    p.add_argument("--hi-hu", type=float, default=D.DEFAULT_HI_HU)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train on a preprocessed dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FudsaError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
