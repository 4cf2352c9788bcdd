"""Architecture hyperparameters."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

REDUCERS = ("evit", "static_topk", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """ViT backbone plus token-reduction and cross-layer settings.

    Block indices in ``reduction_layers`` / ``recovery_layers`` are 1-based.
    ``recovery_layers=None`` resolves to the reduction layers plus block
    ``depth - 1``, i.e. ``[4, 7, 10, 11]`` for the 12-block default.
    """

    image_size: int = 224
    patch_size: int = 16
    dim: int = 768
    depth: int = 12
    heads: int = 12
    ffn_ratio: int = 4
    num_classes: int = 1000
    in_chans: int = 3
    reduction_layers: tuple[int, ...] = (4, 7, 10)
    recovery_layers: tuple[int, ...] | None = None
    keep_rate: float = 1.0
    dwg: int = 2
    clca: bool = True
    reducer: str = "evit"
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "reduction_layers", tuple(int(i) for i in self.reduction_layers))
        if self.recovery_layers is None:
            rec = set(self.reduction_layers)
            if self.depth >= 2:
                rec.add(self.depth - 1)
            object.__setattr__(self, "recovery_layers", tuple(sorted(rec)))
        else:
            object.__setattr__(self, "recovery_layers", tuple(int(i) for i in self.recovery_layers))
        object.__setattr__(self, "keep_rate", float(self.keep_rate))
        self.validate()

    def validate(self) -> None:
        if min(self.image_size, self.patch_size, self.dim, self.depth, self.heads) < 1:
            raise ConfigError("image_size, patch_size, dim, depth and heads must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ConfigError(f"keep_rate must lie in (0, 1], got {self.keep_rate}")
        if self.reducer not in REDUCERS:
            raise ConfigError(f"unknown reducer {self.reducer!r}; choose from {REDUCERS}")
        red = self.reduction_layers
        if list(red) != sorted(set(red)):
            raise ConfigError(f"reduction_layers must be strictly ascending, got {red}")
        if red and (red[0] < 1 or red[-1] > self.depth - 1):
            raise ConfigError(f"reduction_layers must lie in [1, {self.depth - 1}], got {red}")
        rec = self.recovery_layers
        if list(rec) != sorted(set(rec)):
            raise ConfigError(f"recovery_layers must be strictly ascending, got {rec}")
        if rec and (rec[0] < 1 or rec[-1] > self.depth):
            raise ConfigError(f"recovery_layers must lie in [1, {self.depth}], got {rec}")
        if not set(red) <= set(rec):
            raise ConfigError("recovery_layers must include every reduction layer")
        if self.dwg < 1 or self.num_classes < 1 or self.ffn_ratio < 1:
            raise ConfigError("dwg, num_classes and ffn_ratio must be positive")

    # derived quantities -------------------------------------------------

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def groups(self) -> int:
        return len(self.reduction_layers) + 1

    @property
    def snapshot_layers(self) -> tuple[int, ...]:
        """Blocks whose CLS output feeds the aggregation head."""
        return tuple(self.reduction_layers) + (self.depth,)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1 + (1 if self.clca else 0)

    @property
    def reduces(self) -> bool:
        return self.reducer != "none" and self.keep_rate < 1.0

    def stores_after(self, block: int) -> bool:
        """Whether block ``block`` caches its GAP/CLR (only if a later recovery exists)."""
        return self.clca and any(r > block for r in self.recovery_layers)

    # serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reduction_layers"] = list(self.reduction_layers)
        d["recovery_layers"] = list(self.recovery_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        if "reduction_layers" in changes and "recovery_layers" not in changes:
            d["recovery_layers"] = None
        return ModelConfig.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def keep_count(n: int, keep_rate: float) -> int:
    """Number of reducible tokens kept: ``max(1, ceil(r * n))``.

    The product is rounded to 9 decimals first so that e.g. 0.7 * 10 keeps 7
    tokens rather than 8.
    """
    if n < 1:
        raise ValueError("keep_count needs at least one reducible token")
    return max(1, math.ceil(round(keep_rate * n, 9)))


def vit_b16(image_size: int = 448, **overrides) -> ModelConfig:
    base = dict(image_size=image_size, patch_size=16, dim=768, depth=12, heads=12, ffn_ratio=4)
    base.update(overrides)
    return ModelConfig(**base)


def tiny(**overrides) -> ModelConfig:
    """Desk-scale model: 6 blocks of width 64 on 64x64 inputs, 8x8 patches."""
    base = dict(
        image_size=64, patch_size=8, dim=64, depth=6, heads=4, ffn_ratio=4,
        num_classes=32, reduction_layers=(2, 4), keep_rate=0.25,
    )
    base.update(overrides)
    return ModelConfig(**base)


def gradcheck_config(**overrides) -> ModelConfig:
    base = dict(
        image_size=32, patch_size=8, dim=32, depth=4, heads=2, ffn_ratio=2,
        num_classes=5, reduction_layers=(2,), recovery_layers=(2, 3), keep_rate=0.5, dwg=2,
    )
    base.update(overrides)
    return ModelConfig(**base)
