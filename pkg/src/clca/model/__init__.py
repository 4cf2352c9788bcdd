"""The CLCA vision transformer: config, token schedule, reducers, cache and head."""

from .config import ConfigError, ModelConfig, canonical_json, gradcheck_config, keep_count, tiny, vit_b16
from .reduce import REDUCERS, Reduction, evit_reduce, select_tokens, static_topk_reduce
from .schedule import BlockTokens, format_schedule, token_schedule
from .sequence import CacheEntry, CacheKind, CrossLayerCache, Role, TokenSequence
from .vit import (
    BlockTrace,
    ClcaViT,
    ForwardTrace,
    assemble_sequence,
    cla_aggregate,
    cla_head_forward,
    encoder_block_forward,
    init_params,
    model_forward,
    patchify_embed,
)

__all__ = [
    "REDUCERS", "BlockTokens", "BlockTrace", "CacheEntry", "CacheKind", "ClcaViT", "ConfigError",
    "CrossLayerCache", "ForwardTrace", "ModelConfig", "Reduction", "Role", "TokenSequence",
    "assemble_sequence", "canonical_json", "cla_aggregate", "cla_head_forward", "encoder_block_forward",
    "evit_reduce", "format_schedule", "gradcheck_config", "init_params", "keep_count",
    "model_forward", "patchify_embed", "select_tokens", "static_topk_reduce", "tiny",
    "token_schedule", "vit_b16",
]
