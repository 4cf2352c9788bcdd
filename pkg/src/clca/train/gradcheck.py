"""Central finite-difference verification of the model's backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, backward, default_dtype, no_grad
from ..model.config import ModelConfig
from ..model.vit import ClcaViT


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    size: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def format(self) -> str:
        lines = [f"{'parameter':<32} {'checked':>8} {'max rel err':>12}"]
        for e in self.entries:
            flag = "" if e.max_rel_error < self.tolerance else "  FAIL"
            lines.append(f"{e.name:<32} {e.checked:>4}/{e.size:<4} {e.max_rel_error:>12.3e}{flag}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    model_config: ModelConfig,
    tolerance: float = 1e-3,
    h: float = 1e-4,
    seed: int = 0,
    batch_size: int = 4,
    max_entries: int | None = 16,
    only: tuple[str, ...] | None = None,
    perturb: float = 0.1,
) -> GradCheckReport:
    """Compare tape gradients with central differences in float64.

    Parameters are jittered away from their initial values (zero-initialised
    heads would otherwise hide every upstream gradient). Top-k selections are
    recorded on the first forward and replayed for every perturbed forward.
    Up to ``max_entries`` coordinates per parameter are probed (``None``
    probes all); ``only`` restricts the check to names with these prefixes.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = ClcaViT(model_config, seed=seed, dtype=np.float64)
    for prm in model.params.values():
        prm.data = prm.data + perturb * rng.standard_normal(prm.shape)
    images = rng.standard_normal(
        (batch_size, model_config.in_chans, model_config.image_size, model_config.image_size)
    )
    labels = rng.integers(0, model_config.num_classes, size=batch_size)
    saved_buffers = {k: v.copy() for k, v in model.buffers.items()}
    selections: dict[int, np.ndarray] = {}

    def loss_value() -> float:
        with no_grad():
            logits, _ = model(images, training=True, selections=selections)
            value = ad.cross_entropy(logits, labels).item()
        for k, v in saved_buffers.items():
            model.buffers[k][...] = v
        return value

    with Tape() as tape:
        logits, _ = model(images, training=True, selections=selections)
        loss = ad.cross_entropy(logits, labels)
    backward(tape, loss)
    for k, v in saved_buffers.items():
        model.buffers[k][...] = v

    report = GradCheckReport(tolerance)
    for name, prm in model.params.items():
        if only is not None and not name.startswith(only):
            continue
        flat = prm.data.reshape(-1)
        size = flat.size
        if max_entries is None or size <= max_entries:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, max_entries, replace=False))
        analytic = prm.grad.reshape(-1)[coords]
        numeric = np.empty(len(coords))
        for j, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            numeric[j] = (up - down) / (2 * h)
        err = float(relative_error(analytic, numeric).max())
        report.entries.append(ParamCheck(name, err, len(coords), size))
    return report
