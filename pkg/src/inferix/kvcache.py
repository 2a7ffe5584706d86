"""Paged, tiered, block-wise KV cache.

Tokens live in fixed-size pages owned by one (layer, kind) stream. Pages are
allocated device-first and spill to the host tier when the device pool is
exhausted; fetching a host page restores it to the device, demoting the
least-recently-fetched device page if needed. The "device" tier is simulated:
both tiers are ordinary arrays, the tiers exist to exercise the bookkeeping.

An optional latent mode stores down-projected K/V rows and expands them
through an up-projection at fetch time (MLA-style latent store).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, DimensionError, OutOfRangeError

DUMP_MAGIC = b"INFKV1"


@dataclass
class LatentConfig:
    latent_dim: int
    down_proj: np.ndarray  # [head_dim, latent_dim]
    up_proj: np.ndarray  # [latent_dim, head_dim]


@dataclass
class KvConfig:
    num_layers: int
    head_dim: int
    page_len: int = 16
    latent: LatentConfig | None = None
    capacity_pages_device: int = 1024
    capacity_pages_host: int = 1024

    def validate(self):
        if self.num_layers < 1 or self.head_dim < 1 or self.page_len < 1:
            raise ConfigError("num_layers, head_dim, page_len must be >= 1")
        if self.capacity_pages_device < 0 or self.capacity_pages_host < 0:
            raise ConfigError("capacities must be >= 0")
        if self.latent is not None:
            lat = self.latent
            if not (1 <= lat.latent_dim <= self.head_dim):
                raise ConfigError("latent_dim must be in [1, head_dim]")
            if lat.down_proj.shape != (self.head_dim, lat.latent_dim):
                raise ConfigError("down_proj must be [head_dim, latent_dim]")
            if lat.up_proj.shape != (lat.latent_dim, self.head_dim):
                raise ConfigError("up_proj must be [latent_dim, head_dim]")

    @property
    def stored_width(self) -> int:
        return self.latent.latent_dim if self.latent else self.head_dim


DEVICE = "device"
HOST = "host"

SELF_ATTN = "self_attn"
CROSS_ATTN = "cross_attn"


@dataclass
class KvPage:
    id: int
    tier: str
    k_data: np.ndarray  # [page_len, stored_width]
    v_data: np.ndarray
    filled: int = 0
    start_token: int = 0  # position of row 0 in the owning stream
    last_access: int = 0


@dataclass
class BlockEntry:
    block_id: int
    layer: int
    token_range: tuple[int, int]
    page_list: list[int]
    kind: str
    chunk_index: int


@dataclass
class KvStats:
    device_pages_used: int
    host_pages_used: int
    total_tokens: int
    blocks_per_layer: dict[int, int]
    bytes_logical: int


@dataclass
class _Stream:
    pages: list[KvPage] = field(default_factory=list)
    total: int = 0  # tokens ever appended (token ids keep growing past eviction)
    base: int = 0  # first addressable token


class KvCache:
    """One paged KV store; create via create_cache()."""

    def __init__(self, config: KvConfig):
        config.validate()
        self.config = config
        self._lock = threading.RLock()
        self._streams: dict[tuple[int, str], _Stream] = {
            (layer, kind): _Stream()
            for layer in range(config.num_layers)
            for kind in (SELF_ATTN, CROSS_ATTN)
        }
        self._blocks: dict[int, BlockEntry] = {}
        self._next_block_id = 0
        self._next_page_id = 0
        self._device_used = 0
        self._host_used = 0
        self._access_clock = 0

    # -- allocation ---------------------------------------------------------

    def _new_page(self, start_token: int) -> KvPage:
        cfg = self.config
        if self._device_used < cfg.capacity_pages_device:
            tier = DEVICE
            self._device_used += 1
        elif self._host_used < cfg.capacity_pages_host:
            tier = HOST
            self._host_used += 1
        else:
            raise CapacityError(
                f"both tiers full (device={cfg.capacity_pages_device}, "
                f"host={cfg.capacity_pages_host} pages)"
            )
        w = cfg.stored_width
        page = KvPage(
            id=self._next_page_id,
            tier=tier,
            k_data=np.zeros((cfg.page_len, w), dtype=np.float32),
            v_data=np.zeros((cfg.page_len, w), dtype=np.float32),
            start_token=start_token,
        )
        self._next_page_id += 1
        return page

    def _free_page(self, page: KvPage):
        if page.tier == DEVICE:
            self._device_used -= 1
        else:
            self._host_used -= 1

    def _touch(self, page: KvPage):
        self._access_clock += 1
        page.last_access = self._access_clock

    def _restore(self, page: KvPage):
        """Bring a host page to the device, demoting the LRU device page."""
        cfg = self.config
        if cfg.capacity_pages_device == 0:
            return  # nowhere to restore to; read in place
        if self._device_used >= cfg.capacity_pages_device:
            lru = min(
                (p for s in self._streams.values() for p in s.pages if p.tier == DEVICE),
                key=lambda p: p.last_access,
            )
            lru.tier = HOST
            self._device_used -= 1
            self._host_used += 1
        page.tier = DEVICE
        self._host_used -= 1
        self._device_used += 1

    # -- mutations ----------------------------------------------------------

    def append_block(
        self,
        layer: int,
        k: np.ndarray,
        v: np.ndarray,
        kind: str = SELF_ATTN,
        chunk_index: int = 0,
    ) -> BlockEntry:
        cfg = self.config
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if k.ndim != 2 or k.shape != v.shape:
            raise DimensionError("k and v must be equal-shaped [t, head_dim]")
        t, d = k.shape
        if t < 1:
            raise DimensionError("append needs at least one token")
        if d != cfg.head_dim:
            raise DimensionError(f"width {d} != head_dim {cfg.head_dim}")
        if not (0 <= layer < cfg.num_layers):
            raise OutOfRangeError(f"layer {layer} out of range")
        if kind not in (SELF_ATTN, CROSS_ATTN):
            raise ConfigError(f"unknown kind {kind!r}")
        if cfg.latent is not None:
            k = (k @ cfg.latent.down_proj).astype(np.float32)
            v = (v @ cfg.latent.down_proj).astype(np.float32)

        with self._lock:
            stream = self._streams[(layer, kind)]
            start = stream.total
            page_ids = []
            written = 0
            while written < t:
                page = stream.pages[-1] if stream.pages else None
                if page is None or page.filled == cfg.page_len:
                    page = self._new_page(start_token=stream.total)
                    stream.pages.append(page)
                room = cfg.page_len - page.filled
                n = min(room, t - written)
                page.k_data[page.filled : page.filled + n] = k[written : written + n]
                page.v_data[page.filled : page.filled + n] = v[written : written + n]
                page.filled += n
                stream.total += n
                written += n
                if page.id not in page_ids:
                    page_ids.append(page.id)
            entry = BlockEntry(
                block_id=self._next_block_id,
                layer=layer,
                token_range=(start, start + t),
                page_list=page_ids,
                kind=kind,
                chunk_index=chunk_index,
            )
            self._next_block_id += 1
            self._blocks[entry.block_id] = entry
            return entry

    def offload_blocks(self, block_ids) -> int:
        with self._lock:
            pages = {}
            for bid in block_ids:
                entry = self._blocks.get(bid)
                if entry is None:
                    raise OutOfRangeError(f"unknown block id {bid}")
                stream = self._streams[(entry.layer, entry.kind)]
                for page in stream.pages:
                    if page.id in entry.page_list:
                        pages[page.id] = page
            moved = 0
            for page in pages.values():
                if page.tier == DEVICE:
                    if self._host_used >= self.config.capacity_pages_host:
                        raise CapacityError("host tier full, cannot offload")
                    page.tier = HOST
                    self._device_used -= 1
                    self._host_used += 1
                    moved += 1
            return moved

    def evict_window(self, keep_last_n_tokens: int) -> int:
        if keep_last_n_tokens < 0:
            raise ConfigError("keep_last_n_tokens must be >= 0")
        freed_tokens = 0
        with self._lock:
            for layer in range(self.config.num_layers):
                stream = self._streams[(layer, SELF_ATTN)]
                new_base = max(stream.base, stream.total - keep_last_n_tokens)
                freed_tokens += new_base - stream.base
                stream.base = new_base
                # free full pages whose every token is below the window; a
                # partially filled tail page stays allocated so later appends
                # keep packing into it (D3/D6)
                keep = []
                for page in stream.pages:
                    whole_page_evicted = page.start_token + page.filled <= new_base
                    if whole_page_evicted and page.filled == self.config.page_len:
                        self._free_page(page)
                    else:
                        keep.append(page)
                stream.pages = keep
            # drop block entries wholly outside the window
            for bid in list(self._blocks):
                e = self._blocks[bid]
                if e.kind == SELF_ATTN:
                    if e.token_range[1] <= self._streams[(e.layer, SELF_ATTN)].base:
                        del self._blocks[bid]
        return freed_tokens

    def clear_cross_attention(self) -> int:
        with self._lock:
            cleared = 0
            for bid in list(self._blocks):
                if self._blocks[bid].kind == CROSS_ATTN:
                    del self._blocks[bid]
                    cleared += 1
            for layer in range(self.config.num_layers):
                stream = self._streams[(layer, CROSS_ATTN)]
                for page in stream.pages:
                    self._free_page(page)
                self._streams[(layer, CROSS_ATTN)] = _Stream()
            return cleared

    # -- reads --------------------------------------------------------------

    def _gather(self, stream: _Stream, positions) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        w = cfg.stored_width
        k_out = np.empty((len(positions), w), dtype=np.float32)
        v_out = np.empty((len(positions), w), dtype=np.float32)
        pages = sorted(stream.pages, key=lambda p: p.start_token)
        for i, pos in enumerate(positions):
            idx = None
            for page in pages:
                if page.start_token <= pos < page.start_token + page.filled:
                    idx = page
                    break
            if idx is None:
                raise OutOfRangeError(f"token {pos} not stored")
            if idx.tier == HOST:
                self._restore(idx)
            self._touch(idx)
            row = pos - idx.start_token
            k_out[i] = idx.k_data[row]
            v_out[i] = idx.v_data[row]
        if cfg.latent is not None:
            k_out = (k_out @ cfg.latent.up_proj).astype(np.float32)
            v_out = (v_out @ cfg.latent.up_proj).astype(np.float32)
        return k_out, v_out

    def fetch_range(
        self, layer: int, token_range: tuple[int, int], kind: str = SELF_ATTN
    ) -> tuple[np.ndarray, np.ndarray]:
        start, end = token_range
        with self._lock:
            stream = self._streams[(layer, kind)]
            if start < stream.base or end > stream.total or start > end:
                raise OutOfRangeError(
                    f"range [{start}, {end}) outside addressable "
                    f"[{stream.base}, {stream.total})"
                )
            return self._gather(stream, range(start, end))

    def fetch_indices(
        self, layer: int, indices, kind: str = SELF_ATTN
    ) -> tuple[np.ndarray, np.ndarray]:
        indices = list(indices)
        with self._lock:
            stream = self._streams[(layer, kind)]
            for i in indices:
                if not (stream.base <= i < stream.total):
                    raise OutOfRangeError(f"index {i} not stored")
            if not indices:
                w = self.config.head_dim
                return (np.empty((0, w), np.float32), np.empty((0, w), np.float32))
            return self._gather(stream, indices)

    def addressable_range(self, layer: int, kind: str = SELF_ATTN) -> tuple[int, int]:
        stream = self._streams[(layer, kind)]
        return stream.base, stream.total

    def memory_stats(self) -> KvStats:
        with self._lock:
            total = sum(s.total - s.base for s in self._streams.values())
            per_layer: dict[int, int] = {l: 0 for l in range(self.config.num_layers)}
            for e in self._blocks.values():
                per_layer[e.layer] += 1
            width = self.config.stored_width
            return KvStats(
                device_pages_used=self._device_used,
                host_pages_used=self._host_used,
                total_tokens=total,
                blocks_per_layer=per_layer,
                bytes_logical=total * width * 4 * 2,
            )

    def block_entries(self) -> list[BlockEntry]:
        with self._lock:
            return sorted(self._blocks.values(), key=lambda e: e.block_id)

    # -- debug dump ---------------------------------------------------------

    def dump(self, path):
        """Versioned binary snapshot (tests only)."""
        cfg = self.config
        with self._lock, open(path, "wb") as f:
            f.write(DUMP_MAGIC)
            f.write(
                struct.pack(
                    "<5I",
                    cfg.num_layers,
                    cfg.head_dim,
                    cfg.page_len,
                    cfg.capacity_pages_device,
                    cfg.capacity_pages_host,
                )
            )
            pages = [p for s in self._streams.values() for p in s.pages]
            f.write(struct.pack("<I", len(pages)))
            for p in sorted(pages, key=lambda p: p.id):
                f.write(
                    struct.pack(
                        "<IBII", p.id, 0 if p.tier == DEVICE else 1, p.filled, p.start_token
                    )
                )
                f.write(p.k_data[: p.filled].tobytes())
                f.write(p.v_data[: p.filled].tobytes())


def create_cache(config: KvConfig) -> KvCache:
    return KvCache(config)
