"""ViT encoder with token reduction, cross-layer cache and aggregation head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from .. import autodiff as ad
from ..autodiff import Parameter, Tensor, get_default_dtype
from .config import ModelConfig
from .reduce import REDUCERS, Reduction
from .sequence import CrossLayerCache, Role, TokenSequence

INIT_STD = 0.02


@dataclass
class BlockTrace:
    block: int
    t_attn: int
    t_ffn: int
    t_out: int
    a0: np.ndarray  # [B, T_attn] head-averaged CLS attention
    max_abs_activation: float
    cache_after: int = 0
    recovered: int = 0
    uniform_fallback: bool = False


@dataclass
class ForwardTrace:
    blocks: list[BlockTrace] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    cache_after_recovery: list[int] = field(default_factory=list)
    cache_at_end: int = 0
    recovered_origins: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def token_counts(self) -> list[tuple[int, int, int]]:
        return [(b.t_attn, b.t_ffn, b.t_out) for b in self.blocks]


# ---------------------------------------------------------------------------
# parameters

def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_params(config: ModelConfig, seed: int = 0, dtype=None):
    """Fresh parameters and batch-norm buffers for ``config``."""
    dtype = np.dtype(dtype or get_default_dtype())
    rng = np.random.default_rng(seed)
    d, c = config.dim, config.num_classes
    hidden = config.ffn_ratio * d
    arrays: dict[str, np.ndarray] = {}

    def tn(name, shape):
        arrays[name] = _trunc_normal(rng, shape)

    def const(name, shape, value=0.0):
        arrays[name] = np.full(shape, value)

    tn("patch_embed.weight", (config.in_chans * config.patch_size ** 2, d))
    const("patch_embed.bias", (d,))
    tn("cls_token", (d,))
    if config.clca:
        tn("clr_token", (d,))
    tn("pos_embed", (config.seq_len, d))
    for i in range(1, config.depth + 1):
        pre = f"blocks.{i}."
        const(pre + "norm1.weight", (d,), 1.0)
        const(pre + "norm1.bias", (d,))
        tn(pre + "attn.qkv.weight", (d, 3 * d))
        const(pre + "attn.q_bias", (d,))
        const(pre + "attn.v_bias", (d,))
        tn(pre + "attn.proj.weight", (d, d))
        const(pre + "attn.proj.bias", (d,))
        const(pre + "norm2.weight", (d,), 1.0)
        const(pre + "norm2.bias", (d,))
        tn(pre + "mlp.fc1.weight", (d, hidden))
        const(pre + "mlp.fc1.bias", (hidden,))
        tn(pre + "mlp.fc2.weight", (hidden, d))
        const(pre + "mlp.fc2.bias", (d,))
    const("norm.weight", (d,), 1.0)
    const("norm.bias", (d,))

    buffers: dict[str, np.ndarray] = {}
    if config.clca:
        wide = d * config.dwg
        const("head.bn1.weight", (d,), 1.0)
        const("head.bn1.bias", (d,))
        tn("head.dw.weight", (d, config.dwg, config.groups))
        const("head.bn2.weight", (wide,), 1.0)
        const("head.bn2.bias", (wide,))
        const("head.pw.weight", (wide, c))
        const("head.pw.bias", (c,))
        for name, width in (("head.bn1", d), ("head.bn2", wide)):
            buffers[name + ".running_mean"] = np.zeros(width, dtype=dtype)
            buffers[name + ".running_var"] = np.ones(width, dtype=dtype)
    else:
        const("head.weight", (d, c))
        const("head.bias", (c,))

    params = {name: Parameter(name, value, dtype=dtype) for name, value in arrays.items()}
    return params, buffers


# ---------------------------------------------------------------------------
# stages

def patchify_embed(images: Tensor, config: ModelConfig, params) -> Tensor:
    """Non-overlapping ``P x P`` convolution with stride ``P``, flattened to tokens.

    Returns ``[B, N, D]`` with ``N = (S / P) ** 2`` in row-major patch order.
    """
    b, ch, s1, s2 = images.shape
    p = config.patch_size
    if s1 % p or s2 % p:
        raise ValueError(f"image {s1}x{s2} is not divisible into {p}x{p} patches")
    if (s1, s2) != (config.image_size, config.image_size):
        raise ValueError(f"model expects {config.image_size}px images, got {s1}x{s2}")
    gh, gw = s1 // p, s2 // p
    x = ad.reshape(images, (b, ch, gh, p, gw, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    x = ad.reshape(x, (b, gh * gw, ch * p * p))
    return ad.add(ad.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])


def assemble_sequence(
    patches: Tensor,
    cls_token: Tensor,
    clr_token: Tensor | None,
    pos_embed: Tensor,
) -> TokenSequence:
    """``[CLS, patches..., CLR?]`` plus positional embeddings on every position."""
    b, n, d = patches.shape
    expected = n + 1 + (clr_token is not None)
    if pos_embed.shape != (expected, d):
        raise ValueError(f"pos_embed has shape {pos_embed.shape}, expected {(expected, d)}")

    def expand(tok):
        return ad.broadcast_to(ad.reshape(tok, (1, 1, d)), (b, 1, d))

    parts = [expand(cls_token), patches]
    roles = [Role.CLS] + [Role.LOCAL] * n
    if clr_token is not None:
        parts.append(expand(clr_token))
        roles.append(Role.CLR)
    data = ad.add(ad.concat(parts, axis=1), pos_embed)
    roles_arr = np.tile(np.array(roles, dtype=np.int8), (b, 1))
    origin = np.zeros((b, expected), dtype=np.int32)
    return TokenSequence(data, roles_arr, origin, clr_token is not None)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def attention(x: Tensor, params, prefix: str, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Pre-norm multi-head self-attention. Returns (residual branch, A0)."""
    b, t, d = x.shape
    h, dh = config.heads, config.head_dim
    p = params
    y = ad.layer_norm(x, p[prefix + "norm1.weight"], p[prefix + "norm1.bias"], config.ln_eps)
    # key bias is omitted: softmax is invariant to it
    zeros = Tensor(np.zeros(d, dtype=x.dtype))
    bias = ad.concat([p[prefix + "attn.q_bias"], zeros, p[prefix + "attn.v_bias"]], axis=0)
    qkv = ad.add(ad.matmul(y, p[prefix + "attn.qkv.weight"]), bias)
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.reshape(ad.slice_axis(qkv, 0, i, i + 1), (b, h, t, dh)) for i in range(3))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    attn = ad.softmax_lastdim(scores)
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = _linear(out, p[prefix + "attn.proj.weight"], p[prefix + "attn.proj.bias"])
    a0 = ad.reshape(ad.mean(ad.slice_axis(attn, 2, 0, 1), axis=1), (b, t))
    return out, a0


def feed_forward(x: Tensor, params, prefix: str, config: ModelConfig) -> Tensor:
    p = params
    y = ad.layer_norm(x, p[prefix + "norm2.weight"], p[prefix + "norm2.bias"], config.ln_eps)
    y = ad.gelu(_linear(y, p[prefix + "mlp.fc1.weight"], p[prefix + "mlp.fc1.bias"]))
    return _linear(y, p[prefix + "mlp.fc2.weight"], p[prefix + "mlp.fc2.bias"])


def encoder_block_forward(
    seq: TokenSequence,
    params,
    config: ModelConfig,
    block: int,
    reduce: Callable[[TokenSequence, Tensor], Reduction] | None = None,
) -> tuple[TokenSequence, Tensor, Reduction | None]:
    """One pre-norm block; an optional reduction sits between MHSA and PWFFN."""
    if seq.length < 2:
        raise ValueError("an encoder block needs at least two tokens")
    prefix = f"blocks.{block}."
    branch, a0 = attention(seq.data, params, prefix, config)
    seq = seq.with_data(ad.add(seq.data, branch))
    reduction = None
    if reduce is not None:
        reduction = reduce(seq, a0)
        seq = reduction.seq
    seq = seq.with_data(ad.add(seq.data, feed_forward(seq.data, params, prefix, config)))
    return seq, a0, reduction


def cla_aggregate(
    snapshots: list[Tensor],
    params,
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    training: bool,
) -> Tensor:
    """Stack the group CLS outputs to ``[B, D, g]``, batch-normalise, then
    mix the ``g`` positions per channel with a depthwise kernel of length
    ``g`` and channel multiplier ``dwg``. Returns ``[B, D * dwg]``; output
    channel ``d * dwg + j`` comes from input channel ``d``.
    """
    g = config.groups
    if len(snapshots) != g:
        raise ValueError(f"aggregation head needs {g} CLS snapshots, got {len(snapshots)}")
    b, d = snapshots[0].shape
    p = params
    stacked = ad.concat([ad.reshape(s, (b, d, 1)) for s in snapshots], axis=2)
    x = ad.batch_norm(
        stacked, p["head.bn1.weight"], p["head.bn1.bias"],
        buffers["head.bn1.running_mean"], buffers["head.bn1.running_var"],
        training, config.bn_momentum, config.bn_eps,
    )
    x = ad.matmul(ad.transpose(x, (1, 0, 2)), ad.transpose(p["head.dw.weight"], (0, 2, 1)))
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (b, d * config.dwg))


def cla_head_forward(
    snapshots: list[Tensor],
    params,
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    training: bool,
) -> Tensor:
    """Aggregate, then BN -> GELU -> pointwise projection to class logits."""
    agg = cla_aggregate(snapshots, params, buffers, config, training)
    b, wide = agg.shape
    p = params
    x = ad.batch_norm(
        ad.reshape(agg, (b, wide, 1)), p["head.bn2.weight"], p["head.bn2.bias"],
        buffers["head.bn2.running_mean"], buffers["head.bn2.running_var"],
        training, config.bn_momentum, config.bn_eps,
    )
    x = ad.gelu(ad.reshape(x, (b, wide)))
    return _linear(x, p["head.pw.weight"], p["head.pw.bias"])


# ---------------------------------------------------------------------------
# the model

PostBlockHook = Callable[[int, TokenSequence], TokenSequence]


def model_forward(
    model: "ClcaViT",
    images,
    training: bool = False,
    selections: dict[int, np.ndarray] | None = None,
    post_block: PostBlockHook | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Full forward pass.

    Per block: attention, reduction (reduction layers), feed-forward, then
    with the cache enabled: recovery (recovery layers) followed by a cache
    store when some later block will recover it.

    ``selections`` pins the top-k choice per reduction block: blocks already
    present are replayed, missing ones are recorded into the dict. Gradient
    checks use this to keep the selection fixed under perturbation.
    """
    cfg, p = model.config, model.params
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=model.dtype)
    if images.dtype != model.dtype:
        images = Tensor(images.data, dtype=model.dtype)
    trace = ForwardTrace()

    patches = patchify_embed(images, cfg, p)
    seq = assemble_sequence(
        patches, p["cls_token"], p["clr_token"] if cfg.clca else None, p["pos_embed"]
    )
    b, _, d = seq.data.shape
    cache = CrossLayerCache() if cfg.clca else None
    snapshots: list[Tensor] = []

    for block in range(1, cfg.depth + 1):
        t_attn = seq.length
        reduce = None
        if cfg.reduces and block in cfg.reduction_layers:
            reducer = REDUCERS[cfg.reducer]
            fixed = None if selections is None else selections.get(block)

            def reduce(s, a0, _block=block, _fixed=fixed, _reducer=reducer):
                return _reducer(s, a0, cfg.keep_rate, _block, kept=_fixed)

        seq, a0, reduction = encoder_block_forward(seq, p, cfg, block, reduce)
        if reduction is not None and selections is not None:
            selections.setdefault(block, reduction.kept)
        t_ffn = t_attn if reduction is None else reduction.seq.length

        recovered = 0
        if cache is not None:
            if block in cfg.recovery_layers:
                before = seq.length
                seq = cache.recover(seq, block)
                recovered = seq.length - before
                trace.cache_after_recovery.append(len(cache))
                end = seq.length - 1  # recovered tokens sit just before the CLR
                trace.recovered_origins.append(seq.origin[0, end - recovered:end].copy())
            if cfg.stores_after(block):
                cache.store(seq, block)
        if post_block is not None:
            seq = post_block(block, seq)

        trace.blocks.append(
            BlockTrace(
                block=block,
                t_attn=t_attn,
                t_ffn=t_ffn,
                t_out=seq.length,
                a0=a0.data.copy(),
                max_abs_activation=float(np.abs(seq.data.data).max()),
                cache_after=len(cache) if cache is not None else 0,
                recovered=recovered,
                uniform_fallback=bool(reduction is not None and reduction.uniform_fallback.any()),
            )
        )
        if cfg.clca and block in cfg.reduction_layers:
            snapshots.append(ad.reshape(ad.slice_axis(seq.data, 1, 0, 1), (b, d)))

    final = ad.layer_norm(seq.data, p["norm.weight"], p["norm.bias"], cfg.ln_eps)
    cls_out = ad.reshape(ad.slice_axis(final, 1, 0, 1), (b, d))
    if cfg.clca:
        snapshots.append(cls_out)
        trace.snapshots = [s.data.copy() for s in snapshots]
        logits = cla_head_forward(snapshots, p, model.buffers, cfg, training)
        trace.cache_at_end = len(cache)
        trace.warnings.extend(cache.warnings)
    else:
        trace.snapshots = [cls_out.data.copy()]
        logits = _linear(cls_out, p["head.weight"], p["head.bias"])
    return logits, trace


class ClcaViT:
    """Parameters, batch-norm buffers and config bundled for convenience."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        self.seed = seed
        self.params, self.buffers = init_params(config, seed, dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.params["cls_token"].dtype

    def __call__(self, images, training: bool = False, **kwargs):
        return model_forward(self, images, training, **kwargs)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for prm in self.params.values():
            prm.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: prm.data for name, prm in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, prm in self.params.items():
            if state[name].shape != prm.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {prm.shape}")
            prm.data = np.array(state[name], dtype=prm.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=self.dtype)

    def astype(self, dtype) -> "ClcaViT":
        clone = ClcaViT.__new__(ClcaViT)
        clone.config, clone.seed = self.config, self.seed
        clone.params = {n: Parameter(n, p.data, dtype=dtype) for n, p in self.params.items()}
        clone.buffers = {n: np.array(v, dtype=dtype) for n, v in self.buffers.items()}
        return clone
