"""Generate-and-cache block diffusion loop over a toy transformer denoiser.

The model is deliberately tiny and fully seeded: every weight comes from a
single numpy PCG64 stream, so two builds with the same seed are bit-identical
and a whole generation is a pure function of (ModelConfig, GenerationRequest).

What is actually under test here is cache semantics, not sample quality:
`generate_sequence` runs with a paged KV cache, `recompute_reference` replays
the identical process with no cache by re-running attention over all raw
clean-block tokens each step. The two must agree to ~1e-4.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import scaled_dot_attention, windowed_block_causal_mask
from .errors import ConfigError, DimensionError
from .kvcache import CROSS_ATTN, KvCache, KvConfig, SELF_ATTN, create_cache

_RMS_EPS = np.float32(1e-6)


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    block_len: int = 16
    frame_shape: tuple[int, int] = (16, 16)
    prompt_dim: int = 16
    weight_seed: int = 0

    def validate(self):
        for name in ("layers", "heads", "head_dim", "block_len", "prompt_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.frame_shape[0] < 1 or self.frame_shape[1] < 1:
            raise ConfigError("frame_shape must be positive")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class DenoiseSchedule:
    steps: list[float]  # strictly decreasing noise levels, all > 0
    step_scale: float = 0.5

    def validate(self):
        if not self.steps:
            raise ConfigError("schedule needs at least one step")
        if any(t <= 0 for t in self.steps):
            raise ConfigError("noise levels must be > 0")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ConfigError("noise levels must be strictly decreasing")


@dataclass
class GenerationRequest:
    num_blocks: int
    schedule: DenoiseSchedule
    seed: int = 0
    prompt_schedule: list[tuple[int, str]] = field(
        default_factory=lambda: [(0, "a quiet scene")]
    )
    kv_window: int | None = None

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        self.schedule.validate()
        if not self.prompt_schedule or self.prompt_schedule[0][0] != 0:
            raise ConfigError("prompt_schedule must start at chunk 0")
        chunks = [c for c, _ in self.prompt_schedule]
        if any(a >= b for a, b in zip(chunks, chunks[1:])):
            raise ConfigError("prompt_schedule chunks must be strictly increasing")
        if any(not text for _, text in self.prompt_schedule):
            raise ConfigError("prompts must be nonempty")
        if self.kv_window is not None and self.kv_window < 0:
            raise ConfigError("kv_window must be >= 0")


@dataclass
class GeneratedBlock:
    chunk_index: int
    latent: np.ndarray  # [block_len, model_dim]
    frames: list[np.ndarray]  # block_len frames, uint8 [h, w]
    prompt_in_effect: str


@dataclass
class _LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    cq: np.ndarray
    ck: np.ndarray  # [prompt_dim, D]
    cv: np.ndarray
    co: np.ndarray
    w1: np.ndarray  # [D, 2D]
    w2: np.ndarray  # [2D, D]


class ToyModel:
    """Seeded toy transformer denoiser.

    Parameter count: layers * (10*D^2 + 2*P*D) + D (time vector)
    + D^2 (noise head) + D*H*W (frame decoder), with D = heads*head_dim,
    P = prompt_dim, (H, W) = frame_shape.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        d = config.model_dim
        p = config.prompt_dim
        rng = np.random.default_rng(np.random.PCG64(config.weight_seed))

        def w(rows, cols):
            scale = np.float32(0.5 / np.sqrt(rows))
            return (rng.standard_normal((rows, cols)).astype(np.float32) * scale)

        self.layers = [
            _LayerWeights(
                wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
                cq=w(d, d), ck=w(p, d), cv=w(p, d), co=w(d, d),
                w1=w(d, 2 * d), w2=w(2 * d, d),
            )
            for _ in range(config.layers)
        ]
        self.time_vec = w(1, d)[0]
        self.w_out = w(d, d)
        h, wdt = config.frame_shape
        self.w_decode = (
            rng.standard_normal((d, h * wdt)).astype(np.float32) * np.float32(0.35)
        )

    def num_parameters(self) -> int:
        total = self.time_vec.size + self.w_out.size + self.w_decode.size
        for lw in self.layers:
            total += sum(getattr(lw, f).size for f in lw.__dataclass_fields__)
        return total


def build_model(config: ModelConfig) -> ToyModel:
    return ToyModel(config)


def embed_prompt(model: ToyModel, prompt_text: str) -> np.ndarray:
    """Hash each whitespace token to a deterministic unit vector."""
    if not prompt_text:
        raise ConfigError("empty prompt")
    dim = model.config.prompt_dim
    rows = []
    for token in prompt_text.split():
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(dim).astype(np.float32)
        rows.append(v / np.float32(np.linalg.norm(v)))
    return np.stack(rows)


def _rms(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32) + _RMS_EPS)
    return (x / norm).astype(np.float32)


def _mha(q, k, v, heads: int, mask) -> np.ndarray:
    dh = q.shape[1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        outs.append(scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], mask))
    return np.concatenate(outs, axis=1)


def _forward_block(
    model: ToyModel,
    latent: np.ndarray,
    t: float,
    ctx: list[tuple[np.ndarray, np.ndarray]],
    cross: list[tuple[np.ndarray, np.ndarray]] | None,
    collect_kv: bool = False,
):
    """Forward pass over one block with per-layer cached context K/V.

    Returns (eps_hat, per-layer (k, v) of the block tokens or None).
    """
    cfg = model.config
    L = latent.shape[0]
    x = (latent + np.float32(t) * model.time_vec).astype(np.float32)
    kv_out = [] if collect_kv else None
    for li, lw in enumerate(model.layers):
        h = _rms(x)
        q = h @ lw.wq
        cur_k = h @ lw.wk
        cur_v = h @ lw.wv
        ctx_k, ctx_v = ctx[li]
        k = np.concatenate([ctx_k, cur_k], axis=0) if ctx_k.size else cur_k
        v = np.concatenate([ctx_v, cur_v], axis=0) if ctx_v.size else cur_v
        mask = np.ones((L, k.shape[0]), dtype=bool)
        x = x + _mha(q, k, v, cfg.heads, mask) @ lw.wo
        if cross is not None:
            kc, vc = cross[li]
            h2 = _rms(x)
            cmask = np.ones((L, kc.shape[0]), dtype=bool)
            x = x + _mha(h2 @ lw.cq, kc, vc, cfg.heads, cmask) @ lw.co
        h3 = _rms(x)
        x = x + np.maximum(h3 @ lw.w1, np.float32(0.0)) @ lw.w2
        if collect_kv:
            kv_out.append((cur_k, cur_v))
    eps = _rms(x) @ model.w_out
    return eps.astype(np.float32), kv_out


def _cross_ctx_from_prompt(model: ToyModel, prompt_emb: np.ndarray):
    return [(prompt_emb @ lw.ck, prompt_emb @ lw.cv) for lw in model.layers]


def _cache_ctx(model: ToyModel, cache: KvCache | None):
    cfg = model.config
    empty = np.empty((0, cfg.model_dim), dtype=np.float32)
    if cache is None:
        return [(empty, empty) for _ in range(cfg.layers)]
    ctx = []
    for li in range(cfg.layers):
        lo, hi = cache.addressable_range(li, SELF_ATTN)
        ctx.append(cache.fetch_range(li, (lo, hi)) if hi > lo else (empty, empty))
    return ctx


def _cache_cross_ctx(model: ToyModel, cache: KvCache | None, prompt_ctx):
    if cache is not None:
        lo, hi = cache.addressable_range(0, CROSS_ATTN)
        if hi > lo:
            return [
                cache.fetch_range(li, cache.addressable_range(li, CROSS_ATTN), CROSS_ATTN)
                for li in range(model.config.layers)
            ]
    if prompt_ctx is None:
        return None
    return _cross_ctx_from_prompt(model, prompt_ctx)


def denoise_step(
    model: ToyModel,
    latent: np.ndarray,
    t: float,
    step_scale: float,
    cache: KvCache | None = None,
    prompt_ctx: np.ndarray | None = None,
) -> np.ndarray:
    """One Euler update latent - step_scale * eps_hat; cache is read-only."""
    if latent.shape != (latent.shape[0], model.config.model_dim):
        raise DimensionError("latent must be [tokens, model_dim]")
    eps, _ = _forward_block(
        model, latent, t,
        ctx=_cache_ctx(model, cache),
        cross=_cache_cross_ctx(model, cache, prompt_ctx),
    )
    return (latent - np.float32(step_scale) * eps).astype(np.float32)


def decode_frames(model: ToyModel, latent: np.ndarray) -> list[np.ndarray]:
    """Affine map of each latent row to a clamped grayscale frame."""
    h, w = model.config.frame_shape
    px = np.float32(127.5) + np.float32(48.0) * (_rms(latent) @ model.w_decode)
    px = np.clip(px, 0.0, 255.0)
    return [row.reshape(h, w).astype(np.uint8) for row in px]


def _init_noise(cfg: ModelConfig, seed: int, chunk_index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, chunk_index])
    return rng.standard_normal((cfg.block_len, cfg.model_dim)).astype(np.float32)


def generate_block(
    model: ToyModel,
    cache: KvCache | None,
    schedule: DenoiseSchedule,
    prompt_ctx: np.ndarray | None,
    chunk_index: int,
    seed: int,
    prompt_text: str = "",
) -> GeneratedBlock:
    """Denoise one block from seeded noise, then append its clean K/V to cache."""
    schedule.validate()
    latent = _init_noise(model.config, seed, chunk_index)
    ctx = _cache_ctx(model, cache)
    cross = _cache_cross_ctx(model, cache, prompt_ctx)
    for t in schedule.steps:
        eps, _ = _forward_block(model, latent, t, ctx=ctx, cross=cross)
        latent = (latent - np.float32(schedule.step_scale) * eps).astype(np.float32)
    # clean pass at t=0 produces the K/V that future blocks will see
    _, kv = _forward_block(model, latent, 0.0, ctx=ctx, cross=cross, collect_kv=True)
    if cache is not None:
        for li, (k, v) in enumerate(kv):
            cache.append_block(li, k, v, kind=SELF_ATTN, chunk_index=chunk_index)
    return GeneratedBlock(
        chunk_index=chunk_index,
        latent=latent,
        frames=decode_frames(model, latent),
        prompt_in_effect=prompt_text,
    )


def default_kv_config(model_cfg: ModelConfig, **overrides) -> KvConfig:
    kw = dict(
        num_layers=model_cfg.layers,
        head_dim=model_cfg.model_dim,
        page_len=16,
        capacity_pages_device=4096,
        capacity_pages_host=4096,
    )
    kw.update(overrides)
    return KvConfig(**kw)


def _prompt_for_chunk(schedule: list[tuple[int, str]], chunk: int) -> str:
    text = schedule[0][1]
    for c, p in schedule:
        if c <= chunk:
            text = p
    return text


class Engine:
    """Owns one generation stream; prompt updates arrive from other threads
    and are merged into the schedule at block boundaries, never retroactively."""

    def __init__(self, model: ToyModel, kv_config: KvConfig | None = None,
                 profiler=None):
        self.model = model
        self.kv_config = kv_config or default_kv_config(model.config)
        self.profiler = profiler
        self._lock = threading.Lock()
        self._generating_chunk = -1
        self._pending: list[tuple[int, str]] = []
        self._schedule: list[tuple[int, str]] = []
        self.event_log: list[tuple[str, int]] = []
        self.cache: KvCache | None = None

    def apply_prompt_update(self, effective_chunk: int, prompt_text: str) -> bool:
        """Accept iff the target chunk is strictly after the one being generated."""
        if not prompt_text:
            return False
        with self._lock:
            if effective_chunk <= self._generating_chunk:
                return False
            self._pending.append((effective_chunk, prompt_text))
            return True

    def _merge_pending(self):
        for chunk, text in self._pending:
            entries = [e for e in self._schedule if e[0] != chunk]
            entries.append((chunk, text))
            self._schedule = sorted(entries)
        self._pending.clear()

    def generate(self, request: GenerationRequest, sinks=()) -> list[GeneratedBlock]:
        request.validate()
        prof = self.profiler
        self.cache = create_cache(self.kv_config)
        with self._lock:
            self._schedule = list(request.prompt_schedule)
            self._generating_chunk = -1
        blocks = []
        current_prompt = None
        for chunk in range(request.num_blocks):
            with self._lock:
                self._merge_pending()
                self._generating_chunk = chunk
                prompt = _prompt_for_chunk(self._schedule, chunk)
            if prompt != current_prompt:
                if current_prompt is not None:
                    self.cache.clear_cross_attention()
                    self.event_log.append(("clear_cross_attention", chunk))
                emb = embed_prompt(self.model, prompt)
                for li, (kc, vc) in enumerate(
                    _cross_ctx_from_prompt(self.model, emb)
                ):
                    self.cache.append_block(li, kc, vc, kind=CROSS_ATTN,
                                            chunk_index=chunk)
                current_prompt = prompt
            span = prof.scoped("generate_block") if prof else None
            if span:
                span.__enter__()
            block = generate_block(
                self.model, self.cache, request.schedule,
                prompt_ctx=None, chunk_index=chunk, seed=request.seed,
                prompt_text=prompt,
            )
            if span:
                span.__exit__(None, None, None)
            if request.kv_window is not None:
                self.cache.evict_window(request.kv_window)
            self.event_log.append(("block", chunk))
            for sink in sinks:
                sink(block)
            blocks.append(block)
        with self._lock:
            self._generating_chunk = request.num_blocks
        return blocks


def generate_sequence(
    model: ToyModel,
    request: GenerationRequest,
    sinks=(),
    kv_config: KvConfig | None = None,
    profiler=None,
) -> list[GeneratedBlock]:
    return Engine(model, kv_config, profiler).generate(request, sinks)


def recompute_reference(model: ToyModel, request: GenerationRequest) -> list[GeneratedBlock]:
    """Cache-free oracle: identical semantics to generate_sequence, but every
    denoise step recomputes attention over all prior clean blocks' raw tokens
    under a (windowed) block-causal mask."""
    request.validate()
    cfg = model.config
    L = cfg.block_len
    clean: list[np.ndarray] = []  # clean latents per block
    prompts: list[np.ndarray] = []  # per-block prompt embeddings
    blocks = []
    for chunk in range(request.num_blocks):
        prompt = _prompt_for_chunk(request.prompt_schedule, chunk)
        prompts.append(embed_prompt(model, prompt))
        latent = _init_noise(cfg, request.seed, chunk)
        for t in request.schedule.steps:
            eps = _reference_eps(model, clean, prompts, latent, t, request.kv_window)
            latent = (latent - np.float32(request.schedule.step_scale) * eps).astype(
                np.float32
            )
        clean.append(latent)
        blocks.append(
            GeneratedBlock(
                chunk_index=chunk,
                latent=latent,
                frames=decode_frames(model, latent),
                prompt_in_effect=prompt,
            )
        )
    return blocks


def _reference_eps(model, clean, prompts, latent, t, window):
    """Full-sequence forward over [clean blocks | current latent].

    Context tokens carry t=0 conditioning (they were finalized by a clean
    pass) and attend under the same windowed block-causal visibility they had
    at their own generation time, so their layer activations reproduce the
    cached K/V exactly.
    """
    cfg = model.config
    L = cfg.block_len
    b = len(clean)
    n_blocks = b + 1
    x = np.concatenate(clean + [latent], axis=0).astype(np.float32)
    tvec = np.zeros((n_blocks * L, 1), dtype=np.float32)
    tvec[b * L :] = np.float32(t)
    x = (x + tvec * model.time_vec).astype(np.float32)
    mask = windowed_block_causal_mask(n_blocks, L, window)
    for lw in model.layers:
        h = _rms(x)
        q, k, v = h @ lw.wq, h @ lw.wk, h @ lw.wv
        x = x + _mha(q, k, v, cfg.heads, mask) @ lw.wo
        # cross-attention: each block attends its own prompt
        h2 = _rms(x)
        out = np.empty_like(x)
        for bi in range(n_blocks):
            emb = prompts[bi]
            kc, vc = emb @ lw.ck, emb @ lw.cv
            rows = slice(bi * L, (bi + 1) * L)
            cmask = np.ones((L, kc.shape[0]), dtype=bool)
            out[rows] = _mha(h2[rows] @ lw.cq, kc, vc, cfg.heads, cmask)
        x = x + out @ lw.co
        h3 = _rms(x)
        x = x + np.maximum(h3 @ lw.w1, np.float32(0.0)) @ lw.w2
    eps = _rms(x) @ model.w_out
    return eps[b * L :].astype(np.float32)


# -- pipeline registry -------------------------------------------------------


@dataclass(frozen=True)
class Pipeline:
    """Hooks a model family plugs into the common generate-and-cache loop."""

    name: str
    build_model: Callable[[ModelConfig], ToyModel]
    denoise_step: Callable
    decode_frames: Callable


_PIPELINES: dict[str, Pipeline] = {}


def register_pipeline(pipeline: Pipeline):
    _PIPELINES[pipeline.name] = pipeline


def get_pipeline(name: str) -> Pipeline:
    try:
        return _PIPELINES[name]
    except KeyError:
        raise ConfigError(
            f"unknown pipeline {name!r}; registered: {sorted(_PIPELINES)}"
        ) from None


register_pipeline(
    Pipeline(
        name="toy",
        build_model=build_model,
        denoise_step=denoise_step,
        decode_frames=decode_frames,
    )
)
