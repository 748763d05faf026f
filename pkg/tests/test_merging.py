import numpy as np
import pytest

from routefp.errors import InvalidInputError
from routefp.merging import (
    assemble_moe,
    bank_delta,
    merge_attention,
    moe_expert_mlp,
    moe_forward,
    routing_targets,
    train_routers,
)
from routefp.numerics import Rng
from routefp.synthdata import DataConfig, make_task
from routefp.toymodel import Arch, apply_delta, finetune, forward, init_params, task_vector

ARCH = Arch()


def _two_experts(seed=0):
    base = init_params(ARCH, seed)
    tuned, deltas = [], []
    for t in range(2):
        _, train, _ = make_task(t, seed)
        m = finetune(base, train, t, steps=120, lr=0.05, seed=Rng(seed).child_seed(f"e{t}"))
        tuned.append(m)
        deltas.append(task_vector(m, base, source_task=t))
    return base, tuned, deltas


def test_merge_attention_lambda_zero_is_identity():
    base, _, deltas = _two_experts()
    merged = merge_attention(base, deltas, 0.0)
    assert np.array_equal(merged.attn_W, base.attn_W)
    assert np.array_equal(merged.attn_b, base.attn_b)


def test_merge_attention_sums_deltas():
    base, _, deltas = _two_experts()
    for d in deltas:
        d.d_attn_W[:] = 1.0  # synthetic drift, recipe keeps real ones at zero
    merged = merge_attention(base, deltas, 0.3)
    assert np.allclose(merged.attn_W, base.attn_W + 0.3 * 2.0, atol=1e-12)


def test_single_expert_moe_equals_dense_model():
    """With one expert the softmax is 1, so fusion is plain delta addition."""
    base, tuned, deltas = _two_experts()
    moe = assemble_moe(base, deltas[:1], lam=0.3, router_seed=5)
    dense = apply_delta(merge_attention(base, deltas[:1], 0.3), deltas[0])
    dense.heads[0] = tuned[0].heads[0]
    X = make_task(0, 0)[1].inputs[:32]
    out = moe_forward(moe, X)
    assert np.allclose(out.routing, 1.0, atol=1e-15)
    _, _, final = forward(dense, X, 0)
    assert np.allclose(out.final, final, atol=1e-9)


def test_zero_router_routes_uniformly():
    base, _, deltas = _two_experts()
    moe = assemble_moe(base, deltas, lam=0.3, router_seed=5)
    moe.router_W[:] = 0.0
    moe.router_b[:] = 0.0
    _, train, _ = make_task(0, 0)
    out = moe_forward(moe, train.inputs[:16])
    assert np.allclose(out.routing, 0.5, atol=1e-15)


def test_router_temperature_flattens():
    base, _, deltas = _two_experts()
    sharp = assemble_moe(base, deltas, lam=0.3, router_seed=5, tau=0.5)
    flat = assemble_moe(base, deltas, lam=0.3, router_seed=5, tau=5.0)
    _, train, _ = make_task(0, 0)
    r_sharp = moe_forward(sharp, train.inputs[:64]).routing
    r_flat = moe_forward(flat, train.inputs[:64]).routing
    assert r_sharp.max() >= r_flat.max()


def test_fixed_router_logit_oracle():
    """Router logits (ln 3, 0) must mix experts exactly 3:1."""
    base, _, deltas = _two_experts()
    moe = assemble_moe(base, deltas, lam=0.3, router_seed=5)
    moe.router_W[:] = 0.0
    moe.router_b[:, 0] = np.log(3.0)
    moe.router_b[:, 1] = 0.0
    _, train, _ = make_task(0, 0)
    out = moe_forward(moe, train.inputs[:8])
    assert np.allclose(out.routing[..., 0], 0.75, atol=1e-12)
    assert np.allclose(out.routing[..., 1], 0.25, atol=1e-12)


def test_assemble_rejects_duplicate_sources_and_bad_tau():
    base, _, deltas = _two_experts()
    with pytest.raises(InvalidInputError):
        assemble_moe(base, [deltas[0], deltas[0]], lam=0.3, router_seed=1)
    with pytest.raises(InvalidInputError):
        assemble_moe(base, deltas, lam=0.3, router_seed=1, tau=0.0)
    with pytest.raises(InvalidInputError):
        assemble_moe(base, [], lam=0.3, router_seed=1)


def test_routing_targets_one_hot_and_uniform():
    t = routing_targets((0, 1, 2), 1, n_rows=3)
    assert t.shape == (3, 3)
    assert np.allclose(t, np.tile([0.0, 1.0, 0.0], (3, 1)))
    orphan = routing_targets((0, 1, 2), 9, n_rows=2)
    assert np.allclose(orphan, 1.0 / 3.0)


def test_train_routers_moves_mass_to_matching_expert():
    base, _, deltas = _two_experts(seed=3)
    moe = assemble_moe(base, deltas, lam=0.3, router_seed=7)
    datasets = [make_task(t, 3)[1] for t in range(2)]
    before = moe_forward(moe, datasets[0].inputs).routing[:, :, 0].mean()
    trained = train_routers(moe, datasets, steps=300, lr=0.2, seed=1)
    after = moe_forward(trained, datasets[0].inputs).routing[:, :, 0].mean()
    assert after > max(before, 0.6)
    # trunk and bank stay untouched
    assert np.array_equal(trained.bank_W1, moe.bank_W1)
    assert np.array_equal(trained.base.mlp_W1, moe.base.mlp_W1)


def test_train_routers_is_deterministic():
    base, _, deltas = _two_experts(seed=3)
    moe = assemble_moe(base, deltas, lam=0.3, router_seed=7)
    datasets = [make_task(t, 3)[1] for t in range(2)]
    a = train_routers(moe, datasets, steps=60, lr=0.2, seed=1)
    b = train_routers(moe, datasets, steps=60, lr=0.2, seed=1)
    assert np.array_equal(a.router_W, b.router_W)


def test_victim_router_mass_floor(victim, probes):
    """Routing concentrates on the matching expert across every probe task."""
    for slot, ds in enumerate(probes):
        mass = moe_forward(victim.moe, ds.inputs).routing[:, :, slot].mean()
        assert mass >= 0.6


def test_victim_routing_argmax_is_task_aligned(victim, probes):
    for slot, ds in enumerate(probes):
        routing = moe_forward(victim.moe, ds.inputs).routing
        # per-sample, per-layer winner; the matching expert should dominate
        share = np.mean(np.argmax(routing, axis=2) == slot)
        assert share >= 0.6


def test_bank_delta_round_trip(victim):
    d = bank_delta(victim.moe, 1)
    assert d.source_task == victim.moe.expert_ids[1]
    assert np.array_equal(d.d_mlp_W1, victim.moe.bank_W1[:, 1])
    W1, b1, W2, b2 = moe_expert_mlp(victim.moe, 1)
    assert np.allclose(W1, victim.moe.base.mlp_W1 + d.d_mlp_W1, atol=1e-15)
