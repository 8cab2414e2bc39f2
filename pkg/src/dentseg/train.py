"""Loss, optimizer, training loop and checkpointing."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .archive import WeightArchive, load_weight_archive, write_weight_archive
from .errors import ConfigMismatch, CorruptArchive, NonFiniteLoss, SchemaError, ShapeMismatch
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .models import ARCHITECTURES, ModelConfig, build_model
from .nn import ModelGraph

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "val_dice")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    loss: str = "bce"
    checkpoint_policy: str = "best_val_dice"
    keep_partial_batch: bool = True
    threshold: float = 0.5

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                out.append(f"{name} must be in [0, 1)")
        if not self.adam_eps > 0:
            out.append("adam_eps must be > 0")
        if self.loss != "bce":
            out.append("loss must be 'bce'")
        if self.checkpoint_policy != "best_val_dice":
            out.append("checkpoint_policy must be 'best_val_dice'")
        if not 0 < self.threshold < 1:
            out.append("threshold must be in (0, 1)")
        return out

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))


# --------------------------------------------------------------------- loss

def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].

    The gradient is that of the clamped expression, so it vanishes wherever
    the clamp is active.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {target.shape} differ")
    p = pred.astype(np.float64)
    y = target.astype(np.float64)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    inside = (p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP)
    grad = np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0) / p.size
    return float(loss), grad.astype(pred.dtype)


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update, applied in place to ``params`` and ``state``."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_eps
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return params, state


# --------------------------------------------------------------------- log

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_dice: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LOG_COLUMNS) + "\n")
        for r in self.records:
            buf.write(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_loss:.6f},{r.val_acc:.6f},{r.val_dice:.6f}\n")
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaError(f"cannot read log {path}: {exc}") from exc
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LOG_COLUMNS:
            raise SchemaError(f"{path}: header must be {','.join(LOG_COLUMNS)}")
        records = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(LOG_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields, got {len(row)}")
            try:
                records.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:])))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
        if not records:
            raise SchemaError(f"{path}: no epoch rows")
        return cls(records)


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """In-memory snapshot of the best model seen during training."""

    state: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    val_dice: float
    meta: dict


def _meta(model: ModelGraph, state: AdamState, extra: dict | None) -> dict:
    return {
        "architecture": model.architecture,
        "model_config": model.config,
        "adam_t": state.t,
        "rng_state": model.rng.bit_generator.state,
        **(extra or {}),
    }


def save_checkpoint(model: ModelGraph, state: AdamState, path, meta: dict | None = None) -> Path:
    """Model parameters, buffers, Adam moments and metadata in one weight archive."""
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return write_weight_archive(WeightArchive(tensors, _meta(model, state, meta)), path)


def load_checkpoint(path, architecture: str | None = None) -> tuple[ModelGraph, AdamState, dict]:
    archive = load_weight_archive(path)
    meta = archive.meta
    if meta is None or "architecture" not in meta:
        raise CorruptArchive(f"{path}: not a checkpoint (no meta entry)")
    arch = meta["architecture"]
    if arch not in ARCHITECTURES:
        raise ConfigMismatch(f"{path}: unknown architecture {arch!r}")
    if architecture is not None and architecture != arch:
        raise ConfigMismatch(f"{path}: checkpoint holds {arch!r}, expected {architecture!r}")
    model = build_model(arch, ModelConfig(**meta.get("model_config", {})))
    state = {k[len("model/"):]: v for k, v in archive.tensors.items() if k.startswith("model/")}
    if set(state) != set(model.state_dict()):
        raise ConfigMismatch(f"{path}: tensor names do not match a {arch!r} model")
    model.load_state_dict(state)
    if "rng_state" in meta:
        model.rng.bit_generator.state = meta["rng_state"]
    adam = AdamState(t=int(meta.get("adam_t", 0)))
    for k, v in archive.tensors.items():
        if k.startswith("adam_m/"):
            adam.m[k[len("adam_m/"):]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[len("adam_v/"):]] = v
    return model, adam, meta


def snapshot(model: ModelGraph, state: AdamState, epoch: int, val_dice: float, meta: dict) -> Checkpoint:
    return Checkpoint(
        state={k: v.copy() for k, v in model.state_dict().items()},
        adam=copy.deepcopy(state),
        epoch=epoch,
        val_dice=val_dice,
        meta=_meta(model, state, {**meta, "epoch": epoch, "val_dice": val_dice}),
    )


# --------------------------------------------------------------- training

def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def batches(ids: list[str], batch_size: int, keep_partial: bool = True) -> list[list[str]]:
    out = [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    if out and not keep_partial and len(out[-1]) < batch_size:
        out.pop()
    return out


def evaluate_loss(model: ModelGraph, samples, threshold: float = 0.5, batch_size: int = 4):
    """Infer-mode mean BCE, pixel accuracy and micro Dice over ``samples``."""
    total_loss, pixels = 0.0, 0
    counts = ConfusionCounts()
    for i in range(0, len(samples), batch_size):
        x, y = _stack(samples[i:i + batch_size])
        p = model.predict(x, batch_size)
        loss, _ = bce_loss(p, y)
        total_loss += loss * y.size
        pixels += y.size
        counts = counts + confusion_counts(p, y, threshold)
    report = metrics_from_counts(counts, threshold)
    return total_loss / pixels, report.accuracy, report.dice


def train(model: ModelGraph, splits, data, config: TrainConfig, checkpoint_path=None,
          meta: dict | None = None, log_path=None) -> tuple[TrainingLog, Checkpoint]:
    """Fit ``model`` on ``splits.train_ids`` and select the best epoch by validation Dice.

    ``data`` maps sample ids to :class:`~dentseg.data.PreprocessedSample`.
    When the validation split is empty the training split stands in for it.
    """
    train_ids = list(splits.train_ids)
    val_ids = list(splits.val_ids)
    if not train_ids:
        raise ValueError("training split is empty")
    if not val_ids:
        log.warning("validation split is empty; validating on the training split")
        val_ids = train_ids
    val_samples = [data[i] for i in val_ids]
    meta = dict(meta or {})

    params = model.parameters()
    state = AdamState()
    history = TrainingLog()
    best: Checkpoint | None = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_ids))
        epoch_ids = [train_ids[i] for i in order]
        model.train()
        loss_sum, seen = 0.0, 0
        counts = ConfusionCounts()
        for b, batch_ids in enumerate(batches(epoch_ids, config.batch_size, config.keep_partial_batch), start=1):
            x, y = _stack([data[i] for i in batch_ids])
            model.zero_grad()
            pred = model.forward(x)
            loss, grad = bce_loss(pred, y)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            model.backward(grad)
            adam_step(params, model.gradients(), state, config)
            step += 1
            loss_sum += loss * len(batch_ids)
            seen += len(batch_ids)
            counts = counts + confusion_counts(pred, y, config.threshold)
        model.eval()
        val_loss, val_acc, val_dice = evaluate_loss(model, val_samples, config.threshold, config.batch_size)
        record = EpochRecord(epoch, loss_sum / seen, metrics_from_counts(counts).accuracy, val_loss, val_acc, val_dice)
        history.records.append(record)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f val_dice %.4f",
                 epoch, config.epochs, record.train_loss, record.train_acc, val_loss, val_acc, val_dice)
        if best is None or val_dice > best.val_dice:
            best = snapshot(model, state, epoch, val_dice, {**meta, "steps": step})
            if checkpoint_path is not None:
                save_checkpoint(model, state, checkpoint_path, best.meta)
        if log_path is not None:
            history.write_csv(log_path)
    return history, best


def restore(model: ModelGraph, ckpt: Checkpoint) -> ModelGraph:
    model.load_state_dict(ckpt.state)
    return model


def train_config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})


def train_config_to_dict(c: TrainConfig) -> dict:
    return asdict(c)
