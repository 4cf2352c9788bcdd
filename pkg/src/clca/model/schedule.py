"""Closed-form sequence-length trajectory for a config."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig, keep_count


@dataclass(frozen=True)
class BlockTokens:
    block: int
    t_attn: int  # tokens entering the attention sub-layer
    t_ffn: int  # tokens entering the feed-forward sub-layer (after any reduction)
    t_out: int  # tokens leaving the block (after any recovery)
    cache_after: int  # cache entries held once the block has finished


def token_schedule(config: ModelConfig) -> list[BlockTokens]:
    """Simulate the token count of every sub-layer without running the model.

    Follows the forward event order: attention, reduction (reduction layers
    only), feed-forward, recovery (recovery layers, clca only), cache store
    (clca only, when a later recovery can still consume the entries).
    """
    specials = 1 + (1 if config.clca else 0)
    reducible = config.num_patches
    cache = 0
    rows = []
    for block in range(1, config.depth + 1):
        t_attn = specials + reducible
        if config.reduces and block in config.reduction_layers:
            k = keep_count(reducible, config.keep_rate)
            fused = 1 if config.reducer == "evit" and k < reducible else 0
            reducible = k + fused
        t_ffn = specials + reducible
        if config.clca:
            if block in config.recovery_layers:
                reducible += cache
                cache = 0
            if config.stores_after(block):
                cache += 2
        rows.append(BlockTokens(block, t_attn, t_ffn, specials + reducible, cache))
    return rows


def format_schedule(rows: list[BlockTokens]) -> str:
    lines = [f"{'block':>5} {'T_attn':>7} {'T_ffn':>7} {'T_out':>7} {'cache':>5}"]
    for r in rows:
        lines.append(f"{r.block:>5} {r.t_attn:>7} {r.t_ffn:>7} {r.t_out:>7} {r.cache_after:>5}")
    return "\n".join(lines)
