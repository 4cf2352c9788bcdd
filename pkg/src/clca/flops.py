"""Analytic multiply-accumulate counts.

Counts are MACs (one multiply plus one add = 1), which is the convention
behind the usual "FLOPs" figures quoted for ViTs. Normalisations, softmax and
activations are left out; they are well under 1% of the total.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .model.config import ModelConfig
from .model.schedule import token_schedule


@dataclass
class BlockCost:
    block: int
    t_attn: int
    t_ffn: int
    qkv: int
    attn_matmuls: int
    out_proj: int
    ffn: int

    @property
    def total(self) -> int:
        return self.qkv + self.attn_matmuls + self.out_proj + self.ffn


@dataclass
class FlopsReport:
    config_digest: str
    image_size: int
    keep_rate: float
    clca: bool
    patch_embed: int
    head: int
    blocks: list[BlockCost] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.patch_embed + self.head + sum(b.total for b in self.blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        for row, blk in zip(d["blocks"], self.blocks):
            row["total"] = blk.total
        d["total"] = self.total
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def csv_row(self) -> dict:
        return {
            "config": self.config_digest,
            "image_size": self.image_size,
            "keep_rate": self.keep_rate,
            "macs": self.total,
        }


CSV_FIELDS = ("config", "image_size", "keep_rate", "macs")


def block_cost(t_attn: int, t_ffn: int, dim: int, heads: int, ffn_ratio: int, block: int = 0) -> BlockCost:
    """MACs of one encoder block.

    qkv ``3 T D^2``, attention ``2 T^2 D`` (scores and weighted sum over all
    heads), output projection ``T D^2``, feed-forward ``2 r T_ffn D^2``.
    ``heads`` does not change the count; it is accepted for the record.
    """
    if min(dim, heads, ffn_ratio) < 1 or t_attn < 0 or t_ffn < 0:
        raise ValueError("block_cost needs positive dims and non-negative token counts")
    d2 = dim * dim
    return BlockCost(
        block=block,
        t_attn=t_attn,
        t_ffn=t_ffn,
        qkv=3 * t_attn * d2,
        attn_matmuls=2 * t_attn * t_attn * dim,
        out_proj=t_attn * d2,
        ffn=2 * ffn_ratio * t_ffn * d2,
    )


def head_cost(config: ModelConfig) -> int:
    d, c = config.dim, config.num_classes
    if config.clca:
        return d * config.groups * config.dwg + d * config.dwg * c
    return d * c


def cost_from_counts(config: ModelConfig, counts: list[tuple[int, int]]) -> FlopsReport:
    """Cost for explicit per-block ``(T_attn, T_ffn)`` pairs, e.g. from a forward trace."""
    if len(counts) != config.depth:
        raise ValueError(f"expected {config.depth} block counts, got {len(counts)}")
    p = config.patch_size
    report = FlopsReport(
        config_digest=config.digest(),
        image_size=config.image_size,
        keep_rate=config.keep_rate,
        clca=config.clca,
        patch_embed=config.num_patches * config.in_chans * p * p * config.dim,
        head=head_cost(config),
    )
    for i, (ta, tf) in enumerate(counts, start=1):
        report.blocks.append(block_cost(ta, tf, config.dim, config.heads, config.ffn_ratio, i))
    return report


def model_cost(config: ModelConfig) -> FlopsReport:
    return cost_from_counts(config, [(r.t_attn, r.t_ffn) for r in token_schedule(config)])


def cost_from_trace(config: ModelConfig, trace) -> FlopsReport:
    return cost_from_counts(config, [(b.t_attn, b.t_ffn) for b in trace.blocks])


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.csv_row())
    return buf.getvalue()
