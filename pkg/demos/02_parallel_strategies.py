#!/usr/bin/env python3
"""
Sequence-parallel attention strategies, simulated
=================================================

Runs the same attention problem through Ulysses (all-to-all head
repartitioning) and the two ring schedules (rotating K/V, rotating Q with
online-softmax partials), audits every simulated message, and checks the
cost model's predictions against the traced traffic.
"""

import numpy as np

from inferix.attention import block_causal_mask
from inferix.parallel import (
    LinkCostModel,
    WorkerGroup,
    choose_strategy,
    dense_reference,
    equal_shards,
    predict_communication,
    ring_attention_pass_kv,
    ring_attention_pass_q,
    ulysses_attention,
)

seq_len, heads, head_dim, world = 64, 4, 8, 4
d = heads * head_dim
rng = np.random.default_rng(0)
lens = equal_shards(seq_len, world)
qs = [rng.standard_normal((n, d)).astype(np.float32) for n in lens]
ks = [rng.standard_normal((n, d)).astype(np.float32) for n in lens]
vs = [rng.standard_normal((n, d)).astype(np.float32) for n in lens]
mask = block_causal_mask(seq_len // 16, 16)
ref = dense_reference(qs, ks, vs, heads, mask)

runs = {}
g = WorkerGroup(world)
runs["ulysses"] = (ulysses_attention(g, qs, ks, vs, heads, mask), g)
g = WorkerGroup(world)
runs["ring_pass_kv"] = (ring_attention_pass_kv(g, qs, ks, vs, mask, heads=heads), g)
g = WorkerGroup(world)
runs["ring_pass_q"] = (ring_attention_pass_q(g, qs, ks, vs, mask, heads=heads), g)

print(f"{seq_len} tokens, {heads} heads, {world} workers")
for name, (out, group) in runs.items():
    err = max(float(np.abs(o - r).max()) for o, r in zip(out, ref))
    inter = [t for t in group.trace if t.sender != t.receiver]
    msgs, nbytes = len(inter), sum(t.bytes for t in inter)
    predicted = predict_communication(name, lens, heads, head_dim, world)
    tag = "exact" if predicted == (msgs, nbytes) else "MISMATCH"
    print(f"  {name:14s} err {err:.1e}  traffic {msgs} msgs / {nbytes} B "
          f"(prediction {tag})")

# the planner picks whichever strategy is cheapest under the link model
for cost in (LinkCostModel(cost_per_message=1e-3, cost_per_byte=1e-9),
             LinkCostModel(cost_per_message=1e-9, cost_per_byte=1e-3)):
    pick = choose_strategy(seq_len, heads, world, cost, head_dim=head_dim)
    print(f"  link model (msg={cost.cost_per_message:g}, "
          f"byte={cost.cost_per_byte:g}) -> {pick['strategy']}")
