"""Adam training loop with early stopping, checkpointing and evaluation."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CorruptCheckpoint, InvalidArgument, InvalidState, NumericalDivergence
from .losses import LossConfig, MetricsRecord, confusion_counts, supervised_loss
from .network import FudsaNet, NetworkConfig, VariantFlags


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgument(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise InvalidArgument(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")


class AdamState:
    def __init__(self, named_params):
        named_params = list(named_params)
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0


def adam_step(named_params, state: AdamState, cfg: TrainConfig):
    """One Adam update over all parameters; missing grads count as zero."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        if name not in state.m or state.m[name].shape != p.data.shape:
            raise InvalidState(f"optimizer state does not match parameter {name!r}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dsc: float
    val_iou: float
    val_recall: float


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool

    def csv(self):
        lines = ["epoch,train_loss,val_loss,val_dsc,val_iou,val_recall"]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},"
                         f"{r.val_dsc:.4f},{r.val_iou:.4f},{r.val_recall:.4f}")
        lines.append(f"# best_epoch={self.best_epoch} "
                     f"best_val_loss={self.best_val_loss:.6f} "
                     f"stopped_early={self.stopped_early}")
        return "\n".join(lines) + "\n"


def _stack(pairs, dtype):
    x = np.concatenate([p.image.data for p in pairs]).astype(dtype)
    y = np.concatenate([p.mask.data for p in pairs]).astype(dtype)
    return T.Tensor(x), T.Tensor(y)


def _ftl_value(p, y, cfg: LossConfig):
    """Numpy focal Tversky for one image (forward value only)."""
    tp = float((p * y).sum())
    fn = float(y.sum()) - tp
    fp = float(p.sum()) - tp
    ti = (tp + cfg.smooth) / (tp + cfg.alpha * fn + cfg.beta * fp + cfg.smooth)
    return (1.0 - ti) ** (1.0 / cfg.gamma)


def evaluate(model: FudsaNet, dataset, threshold=0.5, loss_cfg: LossConfig | None = None,
             chunk=8):
    """Pooled confusion counts over the whole set; no parameter mutation.

    The reported loss is the mean over images of the per-image supervised
    focal Tversky loss (head weights per loss_cfg).
    """
    loss_cfg = loss_cfg or LossConfig()
    dtype = model.config.np_dtype
    tp = fp = fn = tn = 0
    losses = []
    for c0 in range(0, len(dataset), chunk):
        pairs = dataset[c0:c0 + chunk]
        x, y = _stack(pairs, dtype)
        out = model(x)
        heads = out.heads()
        weights = loss_cfg.side_weights or [1.0 / len(heads)] * len(heads)
        for i in range(len(pairs)):
            losses.append(sum(
                w * _ftl_value(h.data[i], y.data[i], loss_cfg)
                for w, h in zip(weights, heads)))
        pred = (out.final_map.data >= threshold).astype(dtype)
        c = confusion_counts(pred, y.data)
        tp, fp, fn, tn = tp + c[0], fp + c[1], fn + c[2], tn + c[3]
    return MetricsRecord.from_counts(tp, fp, fn, tn), float(np.mean(losses))


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_params()}


def _restore(model, snap):
    for name, p in model.named_params():
        p.data[...] = snap[name]


def train(model: FudsaNet, train_set, val_set, cfg: TrainConfig,
          log=None) -> TrainReport:
    if not train_set or not val_set:
        raise InvalidArgument("train and validation sets must be nonempty")
    params = list(model.named_params())
    state = AdamState(params)
    dtype = model.config.np_dtype
    records = []
    best_loss = np.inf
    best_epoch = 0
    best_snap = _snapshot(model)
    bad_epochs = 0
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.arange(len(train_set))
        np.random.default_rng(cfg.seed ^ epoch).shuffle(order)
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b0:b0 + cfg.batch_size]]
            x, y = _stack(batch, dtype)
            with T.Tape() as tape:
                out = model(x)
                loss = supervised_loss(out, y, cfg.loss)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalDivergence(
                        f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
                T.backward(loss, tape)
            adam_step(params, state, cfg)
            model.zero_grad()
            batch_losses.append(value)

        val_metrics, val_loss = evaluate(model, val_set, loss_cfg=cfg.loss)
        rec = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss,
                          val_metrics.dsc, val_metrics.iou, val_metrics.recall)
        records.append(rec)
        if log:
            log(rec)

        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            best_epoch = epoch
            best_snap = _snapshot(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break

    _restore(model, best_snap)
    return TrainReport(records, best_epoch, float(best_loss), stopped)


# ---------------------------------------------------------------------------
# checkpoints (FUD1 container of named FTEN entries)

_CKPT_MAGIC = b"FUD1"


def _config_entries(cfg: NetworkConfig):
    v = cfg.variant
    scalars = {
        "cfg/levels": cfg.levels,
        "cfg/base_channels": cfg.base_channels,
        "cfg/input_channels": cfg.input_channels,
        "cfg/reduction": cfg.reduction,
        "cfg/upsample_bilinear": 1.0 if cfg.upsample_mode == "bilinear" else 0.0,
        "cfg/f64": 1.0 if cfg.dtype == "f64" else 0.0,
        "cfg/spatial_only": float(v.spatial_only),
        "cfg/deep_supervision": float(v.deep_supervision),
        "cfg/decoder_residuals": float(v.decoder_residuals),
        "cfg/channel_branch_includes_sl": float(v.channel_branch_includes_sl),
    }
    entries = {k: np.full((1, 1, 1, 1), val, dtype=np.float64)
               for k, val in scalars.items()}
    entries["cfg/sdc_dilations"] = np.array(cfg.sdc_dilations, dtype=np.float64
                                            ).reshape(1, -1, 1, 1)
    return entries


def _config_from_entries(entries):
    def g(key):
        return float(entries[key].reshape(-1)[0])

    return NetworkConfig(
        levels=int(g("cfg/levels")),
        base_channels=int(g("cfg/base_channels")),
        input_channels=int(g("cfg/input_channels")),
        reduction=int(g("cfg/reduction")),
        sdc_dilations=tuple(int(d) for d in entries["cfg/sdc_dilations"].reshape(-1)),
        upsample_mode="bilinear" if g("cfg/upsample_bilinear") else "nearest",
        dtype="f64" if g("cfg/f64") else "f32",
        variant=VariantFlags(
            spatial_only=bool(g("cfg/spatial_only")),
            deep_supervision=bool(g("cfg/deep_supervision")),
            decoder_residuals=bool(g("cfg/decoder_residuals")),
            channel_branch_includes_sl=bool(g("cfg/channel_branch_includes_sl")),
        ))


def save_checkpoint(model: FudsaNet, state: AdamState | None, path):
    entries = dict(_config_entries(model.config))
    for name, p in model.named_params():
        entries[f"p/{name}"] = p.data
    if state is not None:
        entries["adam/t"] = np.full((1, 1, 1, 1), float(state.t), dtype=np.float64)
        for name in state.m:
            entries[f"m/{name}"] = state.m[name]
            entries[f"v/{name}"] = state.v[name]
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        T.write_ften(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, seed=0):
    """Rebuilds the model (and Adam state, if saved) from a FUD1 container."""
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {blob[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        pos = 8
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            arr, pos = T._parse_ften(blob, pos)
            entries[name] = arr
        if pos != len(blob):
            raise CorruptCheckpoint(f"{path}: trailing bytes")
        config = _config_from_entries(entries)
        model = FudsaNet(config, seed=seed)
        for name, p in model.named_params():
            key = f"p/{name}"
            if key not in entries:
                raise CorruptCheckpoint(f"{path}: missing parameter {name!r}")
            if tuple(entries[key].shape) != p.shape:
                raise CorruptCheckpoint(
                    f"{path}: parameter {name!r} has shape {entries[key].shape}, "
                    f"expected {p.shape}")
            p.data = entries[key].astype(config.np_dtype)
        state = None
        if "adam/t" in entries:
            state = AdamState(model.named_params())
            state.t = int(entries["adam/t"].reshape(-1)[0])
            for name, _ in model.named_params():
                state.m[name] = entries[f"m/{name}"].astype(config.np_dtype)
                state.v[name] = entries[f"v/{name}"].astype(config.np_dtype)
        return model, state
    except CorruptCheckpoint:
        raise
    except (struct.error, KeyError, UnicodeDecodeError, InvalidArgument) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# finite-difference gradient check

def gradient_check(model: FudsaNet, x: T.Tensor, y: T.Tensor,
                   loss_cfg: LossConfig | None = None, n_samples=20,
                   seed=0, corrupt=None):
    """Compare analytic parameter gradients against central differences.

    Returns a list of (name, max_relative_error) using the error measure
    |analytic - numeric| / max(1, |numeric|).  ``corrupt`` names a parameter
    whose analytic gradient is deliberately offset (harness sensitivity hook).

    Parameters are jittered in place to a generic point first.  Freshly
    built models have zero biases, and piecewise-constant inputs then leave
    many pre-activations exactly on the relu kink, where the two-sided
    difference quotient disagrees with any subgradient choice.
    """
    loss_cfg = loss_cfg or LossConfig()
    f64 = model.config.dtype == "f64"
    h = 1e-6 if f64 else 1e-3

    names = [name for name, _ in model.named_params()]
    if corrupt is not None and corrupt not in names:
        raise InvalidArgument(f"no parameter named {corrupt!r}")

    jitter = np.random.default_rng(seed + 1)
    for _, p in model.named_params():
        p.data += jitter.normal(0.0, 1e-2, p.data.shape).astype(p.data.dtype)

    def loss_value():
        return supervised_loss(model(x), y, loss_cfg).item()

    with T.Tape() as tape:
        loss = supervised_loss(model(x), y, loss_cfg)
        T.backward(loss, tape)

    rng = np.random.default_rng(seed)
    results = []
    for name, p in model.named_params():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name == corrupt:
            analytic = analytic + 1.0
        flat = p.data.reshape(-1)
        n = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            fp_ = loss_value()
            flat[c] = keep - h
            fm_ = loss_value()
            flat[c] = keep
            numeric = (fp_ - fm_) / (2 * h)
            err = abs(analytic.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        results.append((name, worst))
    model.zero_grad()
    return results
