"""In-process simulation of sequence-parallel attention strategies.

Workers are simulated ranks connected by per-pair FIFO channels; every send
is recorded in a trace so tests can audit communication volume. Three
strategies are provided and all must agree with dense single-worker
attention:

- ulysses: all-to-all from sequence shards to head shards, local full-sequence
  attention per head group, all-to-all back.
- ring pass-KV: queries stay put, K/V shards rotate around the ring and
  partials merge via online softmax.
- ring pass-Q: K/V stay put, (query, partial) pairs rotate; finished partials
  return to their owner in a final gather.

Per-rotation payload floats (single shard of n tokens, width d, h heads):
  pass_kv: 2*n*d            (K and V)
  pass_q:  n*d + n*(d+2*h)  (Q plus accumulator, running max, denominator)
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionPartial,
    attention_partial,
    empty_partial,
    finalize_partial,
    merge_partials,
    scaled_dot_attention,
)
from .errors import DimensionError

FLOAT_BYTES = 4


def _payload_bytes(payload) -> int:
    if isinstance(payload, np.ndarray):
        return payload.size * FLOAT_BYTES
    if isinstance(payload, AttentionPartial):
        return (payload.acc.size + payload.row_max.size + payload.denom.size) * FLOAT_BYTES
    if isinstance(payload, (tuple, list)):
        return sum(_payload_bytes(p) for p in payload)
    raise DimensionError(f"untraceable payload type {type(payload)!r}")


@dataclass
class TraceRecord:
    step: int
    sender: int
    receiver: int
    bytes: int
    tag: str

    def to_line(self) -> str:
        return f"{self.step}\t{self.sender}\t{self.receiver}\t{self.bytes}\t{self.tag}"


class WorkerGroup:
    """world_size simulated ranks with per-pair FIFO channels and a send trace."""

    def __init__(self, world_size: int):
        if world_size < 1:
            raise DimensionError("world_size must be >= 1")
        self.world_size = world_size
        self.channels = {
            (i, j): queue.Queue() for i in range(world_size) for j in range(world_size)
        }
        self.trace: list[TraceRecord] = []
        self._lock = threading.Lock()
        self._step = 0

    def send(self, sender: int, receiver: int, payload, tag: str = ""):
        with self._lock:
            self.trace.append(
                TraceRecord(self._step, sender, receiver, _payload_bytes(payload), tag)
            )
        self.channels[(sender, receiver)].put(payload)

    def recv(self, sender: int, receiver: int, timeout: float = 10.0):
        return self.channels[(sender, receiver)].get(timeout=timeout)

    def advance_step(self):
        with self._lock:
            self._step += 1

    def total_bytes(self, tag: str | None = None) -> int:
        return sum(r.bytes for r in self.trace if tag is None or r.tag == tag)

    def message_count(self, tag: str | None = None) -> int:
        return sum(1 for r in self.trace if tag is None or r.tag == tag)

    def export_trace(self) -> str:
        return "\n".join(r.to_line() for r in self.trace)


def all_to_all(group: WorkerGroup, per_worker_send):
    """recv[j][i] == send[i][j]; every pair (including self) is one message."""
    w = group.world_size
    if len(per_worker_send) != w or any(len(row) != w for row in per_worker_send):
        raise DimensionError("send matrix must be world_size x world_size")
    for i in range(w):
        for j in range(w):
            group.send(i, j, per_worker_send[i][j], tag="a2a")
    recv = [[group.recv(i, j) for i in range(w)] for j in range(w)]
    group.advance_step()
    return recv


def _shard_offsets(shards):
    offsets = [0]
    for s in shards:
        offsets.append(offsets[-1] + s.shape[0])
    return offsets


def _mha_dense(q, k, v, heads, mask):
    dh = q.shape[1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        outs.append(scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], mask))
    return np.concatenate(outs, axis=1)


def dense_reference(q_shards, k_shards, v_shards, heads, mask):
    """Single-worker multi-head attention over the unsharded sequence."""
    q = np.concatenate(q_shards, axis=0)
    k = np.concatenate(k_shards, axis=0)
    v = np.concatenate(v_shards, axis=0)
    out = _mha_dense(q, k, v, heads, mask)
    offsets = _shard_offsets(q_shards)
    return [out[offsets[i] : offsets[i + 1]] for i in range(len(q_shards))]


def ulysses_attention(group: WorkerGroup, q_shards, k_shards, v_shards, heads, mask):
    """Sequence-sharded in, sequence-sharded out, via head repartitioning."""
    w = group.world_size
    if heads % w != 0:
        raise DimensionError(f"heads {heads} not divisible by world_size {w}")
    d = q_shards[0].shape[1]
    dh = d // heads
    hpw = heads // w
    col = lambda j: slice(j * hpw * dh, (j + 1) * hpw * dh)

    send = [
        [(q_shards[i][:, col(j)], k_shards[i][:, col(j)], v_shards[i][:, col(j)])
         for j in range(w)]
        for i in range(w)
    ]
    recv = all_to_all(group, send)

    outs = []
    for j in range(w):
        q = np.concatenate([recv[j][i][0] for i in range(w)], axis=0)
        k = np.concatenate([recv[j][i][1] for i in range(w)], axis=0)
        v = np.concatenate([recv[j][i][2] for i in range(w)], axis=0)
        outs.append(_mha_dense(q, k, v, hpw, mask))

    offsets = _shard_offsets(q_shards)
    back = [
        [outs[j][offsets[i] : offsets[i + 1]] for i in range(w)] for j in range(w)
    ]
    recv_back = all_to_all(group, back)
    return [np.concatenate(recv_back[i], axis=1) for i in range(w)]


def _ring_partials_pass_kv(group, q_shards, k_shards, v_shards, heads, mask, threads):
    w = group.world_size
    dh = q_shards[0].shape[1] // heads
    q_off = _shard_offsets(q_shards)
    kv_off = _shard_offsets(k_shards)

    def head_slice(h):
        return slice(h * dh, (h + 1) * dh)

    def worker(i, out):
        partials = [empty_partial(q_shards[i].shape[0], dh) for _ in range(heads)]
        k_cur, v_cur, owner = k_shards[i], v_shards[i], i
        for step in range(w):
            rows = slice(q_off[i], q_off[i + 1])
            cols = slice(kv_off[owner], kv_off[owner + 1])
            m = mask[rows, cols]
            for h in range(heads):
                sl = head_slice(h)
                partials[h] = merge_partials(
                    partials[h],
                    attention_partial(q_shards[i][:, sl], k_cur[:, sl], v_cur[:, sl], m),
                )
            if step < w - 1:
                group.send(i, (i + 1) % w, (k_cur, v_cur), tag="kv")
                k_cur, v_cur = group.recv((i - 1) % w, i)
                owner = (owner - 1) % w
        out[i] = np.concatenate([finalize_partial(p) for p in partials], axis=1)

    out = [None] * w
    if threads:
        ts = [threading.Thread(target=worker, args=(i, out)) for i in range(w)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
    else:
        # deterministic lockstep scheduler: the same algorithm unrolled by rotation
        partials = [
            [empty_partial(q_shards[i].shape[0], dh) for _ in range(heads)]
            for i in range(w)
        ]
        cur = [(k_shards[i], v_shards[i], i) for i in range(w)]
        for step in range(w):
            for i in range(w):
                k_cur, v_cur, owner = cur[i]
                rows = slice(q_off[i], q_off[i + 1])
                cols = slice(kv_off[owner], kv_off[owner + 1])
                m = mask[rows, cols]
                for h in range(heads):
                    sl = head_slice(h)
                    partials[i][h] = merge_partials(
                        partials[i][h],
                        attention_partial(
                            q_shards[i][:, sl], k_cur[:, sl], v_cur[:, sl], m
                        ),
                    )
            if step < w - 1:
                prev_owner = [cur[i][2] for i in range(w)]
                for i in range(w):
                    k_cur, v_cur, _ = cur[i]
                    group.send(i, (i + 1) % w, (k_cur, v_cur), tag="kv")
                nxt = [None] * w
                for i in range(w):
                    payload = group.recv((i - 1) % w, i)
                    nxt[i] = (payload[0], payload[1], prev_owner[(i - 1) % w])
                cur = nxt
                group.advance_step()
        for i in range(w):
            out[i] = np.concatenate(
                [finalize_partial(p) for p in partials[i]], axis=1
            )
    return out


def ring_attention_pass_kv(group, q_shards, k_shards, v_shards, mask, heads=1,
                           threads=False):
    return _ring_partials_pass_kv(group, q_shards, k_shards, v_shards, heads, mask,
                                  threads)


def ring_attention_pass_q(group, q_shards, k_shards, v_shards, mask, heads=1):
    """Q and partials rotate, K/V stay; finished partials gathered to owners."""
    w = group.world_size
    dh = q_shards[0].shape[1] // heads
    q_off = _shard_offsets(q_shards)
    kv_off = _shard_offsets(k_shards)
    # traveling[i] = (q, partial-per-head, owner) currently held by worker i
    traveling = [
        (q_shards[i], [empty_partial(q_shards[i].shape[0], dh) for _ in range(heads)], i)
        for i in range(w)
    ]
    for step in range(w):
        for i in range(w):
            q, partials, owner = traveling[i]
            rows = slice(q_off[owner], q_off[owner + 1])
            cols = slice(kv_off[i], kv_off[i + 1])
            m = mask[rows, cols]
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                partials[h] = merge_partials(
                    partials[h],
                    attention_partial(q[:, sl], k_shards[i][:, sl], v_shards[i][:, sl], m),
                )
        if step < w - 1:
            for i in range(w):
                q, partials, owner = traveling[i]
                group.send(i, (i + 1) % w, (q, *partials), tag="q")
            nxt = [None] * w
            for i in range(w):
                payload = group.recv((i - 1) % w, i)
                _, _, owner = traveling[(i - 1) % w]
                nxt[i] = (payload[0], list(payload[1:]), owner)
            traveling = nxt
            group.advance_step()
    out = [None] * w
    for i in range(w):
        q, partials, owner = traveling[i]
        if owner == i:
            out[i] = np.concatenate([finalize_partial(p) for p in partials], axis=1)
        else:
            group.send(i, owner, tuple(partials), tag="gather")
    for i in range(w):
        if out[i] is None:
            holder = next(j for j in range(w) if traveling[j][2] == i)
            partials = list(group.recv(holder, i))
            out[i] = np.concatenate([finalize_partial(p) for p in partials], axis=1)
    return out


# -- strategy selection ------------------------------------------------------


@dataclass
class LinkCostModel:
    """cost = cost_per_message * messages + cost_per_byte * bytes"""

    cost_per_message: float = 1e-6
    cost_per_byte: float = 1e-9


def equal_shards(seq_len: int, world_size: int) -> list[int]:
    base, rem = divmod(seq_len, world_size)
    return [base + (1 if i < rem else 0) for i in range(world_size)]


def predict_communication(strategy, shard_lens, heads, head_dim, world_size):
    """(messages, bytes) of inter-worker traffic a strategy puts on the wire.

    Self-sends appear in the trace (all_to_all records world_size^2 messages)
    but are local copies and are excluded here; predictions must match the
    traced sender != receiver totals exactly.
    """
    w = world_size
    d = heads * head_dim
    if w == 1:
        return 0, 0
    if strategy == "ulysses":
        # two all-to-alls: q,k,v column slices out, output slices back
        per_col = d // w
        fwd = (w - 1) * sum(3 * n * per_col for n in shard_lens)
        back = (w - 1) * sum(n * per_col for n in shard_lens)
        return 2 * w * (w - 1), (fwd + back) * FLOAT_BYTES
    if strategy == "ring_pass_kv":
        msgs = w * (w - 1)
        bytes_ = (w - 1) * sum(2 * n * d for n in shard_lens) * FLOAT_BYTES
        return msgs, bytes_
    if strategy == "ring_pass_q":
        msgs = w * (w - 1) + w
        per_rot = sum(n * d + n * (d + 2 * heads) for n in shard_lens)
        gather = sum(n * (d + 2 * heads) for n in shard_lens)
        return msgs, ((w - 1) * per_rot + gather) * FLOAT_BYTES
    raise DimensionError(f"unknown strategy {strategy!r}")


STRATEGIES = ("ulysses", "ring_pass_kv", "ring_pass_q")


def choose_strategy(seq_len, heads, world_size, link_cost_model: LinkCostModel,
                    head_dim: int = 8):
    """argmin of predicted communication cost; ties break in listed order."""
    shard_lens = equal_shards(seq_len, world_size)
    best = None
    for name in STRATEGIES:
        if name == "ulysses" and heads % world_size != 0:
            continue
        msgs, nbytes = predict_communication(name, shard_lens, heads, head_dim,
                                             world_size)
        cost = (link_cost_model.cost_per_message * msgs
                + link_cost_model.cost_per_byte * nbytes)
        if best is None or cost < best[1]:
            best = (name, cost, msgs, nbytes)
    name, cost, msgs, nbytes = best
    return {"strategy": name, "cost": cost, "messages": msgs, "bytes": nbytes}
