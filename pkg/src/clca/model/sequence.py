"""Token sequences with per-token roles, and the cross-layer cache."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

log = logging.getLogger(__name__)


class Role(enum.IntEnum):
    CLS = 0
    LOCAL = 1
    FUSED = 2
    RECOVERED = 3
    CLR = 4


REDUCIBLE = (Role.LOCAL, Role.FUSED, Role.RECOVERED)


@dataclass
class TokenSequence:
    """A batch of token rows ``[B, T, D]``.

    ``roles`` and ``origin`` are ``[B, T]`` integer arrays: after a reduction
    the kept tokens differ per sample, so do their roles. The layout is the
    same for every sample: CLS first, CLR last when present.
    """

    data: Tensor
    roles: np.ndarray
    origin: np.ndarray
    has_clr: bool

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def reducible(self) -> slice:
        return slice(1, self.length - 1 if self.has_clr else self.length)

    @property
    def num_reducible(self) -> int:
        s = self.reducible
        return s.stop - s.start

    def with_data(self, data: Tensor) -> "TokenSequence":
        return TokenSequence(data, self.roles, self.origin, self.has_clr)

    def check(self) -> None:
        b, t = self.data.shape[:2]
        assert self.roles.shape == (b, t) and self.origin.shape == (b, t)
        assert (self.roles[:, 0] == Role.CLS).all()
        assert (self.roles[:, 1:] != Role.CLS).all()
        if self.has_clr:
            assert (self.roles[:, -1] == Role.CLR).all()
        assert (self.roles[:, self.reducible] != Role.CLR).all()


class CacheKind(enum.Enum):
    GAP = "gap"
    CLR_SNAPSHOT = "clr"


@dataclass
class CacheEntry:
    token: Tensor  # [B, D]
    kind: CacheKind
    source_block: int


@dataclass
class CrossLayerCache:
    """Pooled local features and register snapshots awaiting re-injection."""

    entries: list[CacheEntry] = field(default_factory=list)
    window_start: int = 1
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def store(self, seq: TokenSequence, block: int) -> "CrossLayerCache":
        """Append the GAP of all non-CLS/CLR tokens and the current CLR token."""
        if not seq.has_clr:
            raise ValueError("cache store needs a sequence carrying a CLR token")
        assert block >= self.window_start, "cached entry from outside the current group window"
        t = seq.length
        b, _, d = seq.data.shape
        gap = ad.mean(ad.slice_axis(seq.data, 1, 1, t - 1), axis=1)
        clr = ad.reshape(ad.slice_axis(seq.data, 1, t - 1, t), (b, d))
        self.entries.append(CacheEntry(gap, CacheKind.GAP, block))
        self.entries.append(CacheEntry(clr, CacheKind.CLR_SNAPSHOT, block))
        return self

    def recover(self, seq: TokenSequence, block: int) -> TokenSequence:
        """Insert every cached token just before the CLR, then empty the cache."""
        self.window_start = block
        if not self.entries:
            msg = f"block {block}: recovery from an empty cache"
            log.debug(msg)
            self.warnings.append(msg)
            return seq
        b, t, d = seq.data.shape
        cached = [ad.reshape(e.token, (b, 1, d)) for e in self.entries]
        data = ad.concat(
            [ad.slice_axis(seq.data, 1, 0, t - 1), *cached, ad.slice_axis(seq.data, 1, t - 1, t)],
            axis=1,
        )
        m = len(self.entries)
        new_roles = np.full((b, m), Role.RECOVERED, dtype=seq.roles.dtype)
        new_origin = np.tile(
            np.array([e.source_block for e in self.entries], dtype=seq.origin.dtype), (b, 1)
        )
        roles = np.concatenate([seq.roles[:, :-1], new_roles, seq.roles[:, -1:]], axis=1)
        origin = np.concatenate([seq.origin[:, :-1], new_origin, seq.origin[:, -1:]], axis=1)
        self.entries = []
        return TokenSequence(data, roles, origin, seq.has_clr)
