"""Reference attention kernels with online-softmax partials.

Everything here is single-head, float32, and deterministic: the engine,
the parallel workers, and the test oracles all build on these kernels, so
they stay dumb and exact. Multi-head callers loop over head slices.
Positions enter only through the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MaskError

NEG_INF = np.float32(-np.inf)


def _as_f32(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise DimensionError("tensor contains non-finite values")
    return a


def block_causal_mask(num_blocks: int, block_len: int) -> np.ndarray:
    """Boolean [n, n] mask: full attention within a block, causal across blocks.

    Token i in block b_i may attend token j iff b_j <= b_i.
    """
    if num_blocks < 1 or block_len < 1:
        raise DimensionError("num_blocks and block_len must be >= 1")
    blk = np.arange(num_blocks * block_len) // block_len
    return blk[None, :] <= blk[:, None]


def windowed_block_causal_mask(
    num_blocks: int, block_len: int, window_tokens: int | None
) -> np.ndarray:
    """Block-causal mask additionally limited to a trailing token window.

    Token i (block b_i) attends token j iff b_j <= b_i and j falls within the
    last `window_tokens` tokens preceding block b_i (its own block is always
    visible). With window_tokens None this is plain block_causal_mask.
    Mirrors what a cache sees when an eviction window is applied after every
    generated block.
    """
    mask = block_causal_mask(num_blocks, block_len)
    if window_tokens is None:
        return mask
    if window_tokens < 0:
        raise DimensionError("window_tokens must be >= 0")
    n = num_blocks * block_len
    blk = np.arange(n) // block_len
    # token j visible from block b iff j >= b*block_len - window_tokens
    lo = blk[:, None] * block_len - window_tokens
    return mask & (np.arange(n)[None, :] >= lo)


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("q, k, v must be rank-2 [tokens, dim]")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q dim {q.shape[1]} != k dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    if mask.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(
            f"mask shape {mask.shape} != ({q.shape[0]}, {k.shape[0]})"
        )


def scaled_dot_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """softmax(q kᵀ / sqrt(d)) v over the allowed entries of `mask`.

    Max-subtracted softmax in float32. Raises MaskError if any query row has
    no allowed key.
    """
    q, k, v = _as_f32(q), _as_f32(k), _as_f32(v)
    mask = np.asarray(mask, dtype=bool)
    _check_qkv(q, k, v, mask)
    if not mask.any(axis=1).all():
        raise MaskError("query row with no allowed key")
    scale = np.float32(1.0) / np.float32(np.sqrt(np.float32(q.shape[1])))
    logits = (q @ k.T) * scale
    logits = np.where(mask, logits, NEG_INF).astype(np.float32)
    m = logits.max(axis=1, keepdims=True)
    w = np.exp((logits - m).astype(np.float32), dtype=np.float32)
    w = np.where(mask, w, np.float32(0.0))
    denom = w.sum(axis=1, keepdims=True, dtype=np.float32)
    return ((w / denom) @ v).astype(np.float32)


@dataclass
class AttentionPartial:
    """Online-softmax partial: unnormalized accumulator + running max/denominator.

    Merging partials is associative and commutative, which is what lets ring
    workers combine shard results in any order.
    """

    acc: np.ndarray  # [n, d] sum of exp(logit - row_max) * v
    row_max: np.ndarray  # [n]
    denom: np.ndarray  # [n]

    @property
    def num_queries(self) -> int:
        return self.acc.shape[0]

    @property
    def head_dim(self) -> int:
        return self.acc.shape[1]


def empty_partial(num_queries: int, head_dim: int) -> AttentionPartial:
    """Identity element for merge_partials."""
    return AttentionPartial(
        acc=np.zeros((num_queries, head_dim), dtype=np.float32),
        row_max=np.full(num_queries, NEG_INF, dtype=np.float32),
        denom=np.zeros(num_queries, dtype=np.float32),
    )


def attention_partial(
    q: np.ndarray, k_shard: np.ndarray, v_shard: np.ndarray, mask_shard: np.ndarray
) -> AttentionPartial:
    """Partial attention of q against one key/value shard.

    Queries whose shard rows are fully masked get denom 0 and are resolved
    only when merged with a shard that can see them.
    """
    q, k, v = _as_f32(q), _as_f32(k_shard), _as_f32(v_shard)
    mask = np.asarray(mask_shard, dtype=bool)
    _check_qkv(q, k, v, mask)
    if k.shape[0] == 0:
        return empty_partial(q.shape[0], v.shape[1])
    scale = np.float32(1.0) / np.float32(np.sqrt(np.float32(q.shape[1])))
    logits = (q @ k.T) * scale
    logits = np.where(mask, logits, NEG_INF).astype(np.float32)
    row_max = logits.max(axis=1)
    # fully masked rows: keep row_max at -inf and contribute nothing
    safe_max = np.where(np.isfinite(row_max), row_max, np.float32(0.0))
    w = np.exp((logits - safe_max[:, None]).astype(np.float32), dtype=np.float32)
    w = np.where(mask, w, np.float32(0.0))
    denom = w.sum(axis=1, dtype=np.float32)
    acc = (w @ v).astype(np.float32)
    dead = ~np.isfinite(row_max)
    if dead.any():
        acc[dead] = 0.0
        denom[dead] = 0.0
    return AttentionPartial(acc=acc, row_max=row_max.astype(np.float32), denom=denom)


def merge_partials(a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """Combine two partials over disjoint key sets (online-softmax merge)."""
    if a.acc.shape != b.acc.shape:
        raise DimensionError(f"partial shapes differ: {a.acc.shape} vs {b.acc.shape}")
    new_max = np.maximum(a.row_max, b.row_max)
    safe = np.where(np.isfinite(new_max), new_max, np.float32(0.0))

    def rescale(p: AttentionPartial) -> np.ndarray:
        s = np.exp((p.row_max - safe).astype(np.float32), dtype=np.float32)
        return np.where(np.isfinite(p.row_max), s, np.float32(0.0)).astype(np.float32)

    sa, sb = rescale(a), rescale(b)
    return AttentionPartial(
        acc=(a.acc * sa[:, None] + b.acc * sb[:, None]).astype(np.float32),
        row_max=new_max.astype(np.float32),
        denom=(a.denom * sa + b.denom * sb).astype(np.float32),
    )


def finalize_partial(p: AttentionPartial) -> np.ndarray:
    """Normalize a fully merged partial into the attention output."""
    if not (p.denom > 0).all():
        raise MaskError("finalize with zero denominator (query saw no keys)")
    return (p.acc / p.denom[:, None]).astype(np.float32)
