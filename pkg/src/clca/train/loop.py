"""Training and evaluation loops with metrics and gradient-trace logging."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import checkpoint as ckpt_io
from ..autodiff import NonFiniteError, Tape, backward, no_grad
from ..data import Dataset, batch_iter
from ..flops import model_cost
from ..model.config import ModelConfig
from ..model.vit import ClcaViT
from .optim import AdamWHyper, adamw_step, lr_at

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "split", "loss", "top1", "seconds", "macs")
GRADTRACE_FIELDS = ("step", "layer", "max_abs_grad")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    eval_batch_size: int = 64
    base_lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    label_smoothing: float = 0.0
    seed: int = 0  # parameter init
    shuffle_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    top1: float
    seconds: float
    macs: int

    def as_csv(self) -> dict:
        return {
            "epoch": self.epoch,
            "split": self.split,
            "loss": repr(float(self.loss)),
            "top1": repr(float(self.top1)),
            "seconds": f"{self.seconds:.3f}",
            "macs": self.macs,
        }


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_csv: Path
    gradtrace_csv: Path
    history: list[MetricsRow] = field(default_factory=list)

    def final(self, split: str = "val") -> MetricsRow:
        return [r for r in self.history if r.split == split][-1]


def layer_of(name: str) -> str:
    """Group label used in the gradient trace."""
    if name.startswith("blocks."):
        return ".".join(name.split(".")[:2])
    if name in ("cls_token", "clr_token", "pos_embed"):
        return "tokens"
    return name.split(".")[0]


def gradient_maxima(grads: dict[str, np.ndarray]) -> dict[str, float]:
    out: dict[str, float] = {}
    for name, g in grads.items():
        key = layer_of(name)
        out[key] = max(out.get(key, 0.0), float(np.abs(g).max()) if g.size else 0.0)
    out["all"] = max(out.values()) if out else 0.0
    return out


def evaluate_model(model: ClcaViT, ds: Dataset, batch_size: int) -> tuple[float, float]:
    """Eval-mode mean loss and top-1 accuracy over ``ds``."""
    total_loss = 0.0
    correct = 0
    with no_grad():
        for images, labels in batch_iter(ds, batch_size):
            logits, _ = model(images, training=False)
            loss = ad.cross_entropy(logits, labels)
            total_loss += float(loss.item()) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    n = len(ds)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return total_loss / n, correct / n


def _write_rows(path: Path, fields, rows, append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        if mode == "w":
            writer.writeheader()
        writer.writerows(rows)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: tuple[Dataset, Dataset],
    out_dir,
    resume: bool = False,
    until_epoch: int | None = None,
) -> TrainResult:
    """Train from scratch (or resume from ``out_dir/last.ckpt``).

    ``until_epoch`` stops early without changing the schedule, so a later
    ``resume=True`` call continues exactly where this one left off.

    Writes ``metrics.csv``, ``gradtrace.csv``, ``best.ckpt`` and ``last.ckpt``
    into ``out_dir``. Everything except the wall-clock column is a function
    of the config and seeds.
    """
    train_ds, val_ds = dataset
    if train_ds.image_side != model_config.image_size or val_ds.image_side != model_config.image_size:
        raise ValueError(
            f"dataset side {train_ds.image_side} does not match model image_size "
            f"{model_config.image_size}"
        )
    if train_ds.num_classes != model_config.num_classes:
        raise ValueError(
            f"dataset has {train_ds.num_classes} classes, model expects {model_config.num_classes}"
        )
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and val splits must both be non-empty")
    tc = train_config
    if model_config.clca and tc.batch_size < 2:
        raise ValueError("batch_size must be >= 2 when training the aggregation head (batch norm)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(
        out, out / "best.ckpt", out / "last.ckpt", out / "metrics.csv", out / "gradtrace.csv"
    )

    model = ClcaViT(model_config, seed=tc.seed, dtype=np.float32)
    opt_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    start_epoch, step, best_top1 = 0, 0, -1.0
    if resume and result.last_checkpoint.exists():
        last = ckpt_io.load(result.last_checkpoint)
        if last.config != model_config:
            raise ValueError("checkpoint config differs from the requested model config")
        model.load_state_arrays(last.arrays)
        opt_state = {
            k: (m.astype(np.float32), v.astype(np.float32))
            for k, (m, v) in last.optimizer_state().items()
        }
        start_epoch = int(last.meta["epoch"])
        step = int(last.meta["step"])
        best_top1 = float(last.meta.get("best_top1", -1.0))
        log.info("resuming after epoch %d (step %d)", start_epoch, step)
    else:
        for path in (result.metrics_csv, result.gradtrace_csv):
            path.unlink(missing_ok=True)

    steps_per_epoch = -(-len(train_ds) // tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    warmup = tc.warmup_epochs * steps_per_epoch
    macs = model_cost(model_config).total
    min_batch = 2 if model_config.clca else 1

    stop = tc.epochs if until_epoch is None else min(until_epoch, tc.epochs)
    for epoch in range(start_epoch, stop):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        trace_rows = []
        for images, labels in batch_iter(train_ds, tc.batch_size, tc.shuffle_seed, epoch):
            step += 1
            if len(labels) < min_batch:
                log.warning("step %d: batch of %d skipped (batch norm needs >= 2)", step, len(labels))
                continue
            try:
                with Tape() as tape:
                    logits, fwd = model(images, training=True)
                    loss = ad.cross_entropy(logits, labels, tc.label_smoothing)
            except NonFiniteError as exc:
                dump = out / "nonfinite_dump.json"
                dump.write_text(json.dumps({"epoch": epoch + 1, "step": step, "error": str(exc)}))
                raise TrainingError(f"non-finite values at step {step}; see {dump}") from exc
            backward(tape, loss)
            grads = {name: prm.grad for name, prm in model.params.items()}
            for layer, value in gradient_maxima(grads).items():
                trace_rows.append({"step": step, "layer": layer, "max_abs_grad": repr(value)})
            lr = lr_at(step - 1, total_steps, warmup, tc.base_lr, tc.min_lr)
            hyper = AdamWHyper(lr, tc.betas, tc.eps, tc.weight_decay)
            adamw_step(model.params, grads, opt_state, hyper, step)
            loss_sum += float(loss.item()) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        train_row = MetricsRow(
            epoch + 1, "train", loss_sum / max(seen, 1), correct / max(seen, 1),
            time.perf_counter() - t0, macs,
        )
        t1 = time.perf_counter()
        val_loss, val_top1 = evaluate_model(model, val_ds, tc.eval_batch_size)
        val_row = MetricsRow(epoch + 1, "val", val_loss, val_top1, time.perf_counter() - t1, macs)
        result.history += [train_row, val_row]
        _write_rows(result.metrics_csv, METRICS_FIELDS, [train_row.as_csv(), val_row.as_csv()], True)
        _write_rows(result.gradtrace_csv, GRADTRACE_FIELDS, trace_rows, True)

        meta = {
            "epoch": epoch + 1,
            "step": step,
            "train_config": tc.to_dict(),
            "eval_batch_size": tc.eval_batch_size,
            "val_loss": val_loss,
            "val_top1": val_top1,
        }
        if val_top1 > best_top1:
            best_top1 = val_top1
            ckpt_io.save(result.best_checkpoint, ckpt_io.from_model(model, meta))
        meta["best_top1"] = best_top1
        ckpt_io.save(result.last_checkpoint, ckpt_io.from_model(model, meta, opt_state))
        log.info(
            "epoch %d: train loss %.4f top1 %.3f | val loss %.4f top1 %.3f",
            epoch + 1, train_row.loss, train_row.top1, val_loss, val_top1,
        )
    return result


def evaluate(checkpoint_path, dataset: Dataset, batch_size: int | None = None) -> MetricsRow:
    ck = ckpt_io.load(checkpoint_path)
    if ck.config.image_size != dataset.image_side:
        raise ValueError(
            f"checkpoint expects {ck.config.image_size}px images, dataset has {dataset.image_side}px"
        )
    model = ck.model(np.float32)
    bs = batch_size or int(ck.meta.get("eval_batch_size", 64))
    t0 = time.perf_counter()
    loss, top1 = evaluate_model(model, dataset, bs)
    return MetricsRow(
        int(ck.meta.get("epoch", 0)), "val", loss, top1, time.perf_counter() - t0,
        model_cost(ck.config).total,
    )


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_gradtrace(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
