"""Merging task experts into a routed mixture.

Attention weights are merged additively across all expert differences with a
single scaling factor. MLP differences stay separate: each layer holds a bank
of per-expert deltas plus a linear router, and at inference the router's
softmax mixes the deltas into effective MLP weights per sample. Routers are
trained layer-locally with the trunk frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError, InvalidRequestError
from .numerics import Rng
from .toymodel import Arch, ExpertDelta, ModelParams

ROUTER_INIT_SCALE = 0.01


@dataclass
class MergedMoE:
    arch: Arch
    base: ModelParams  # attention-merged trunk; MLP tensors are the pretrained base's
    bank_W1: np.ndarray  # (depth, n_experts, hidden, width) MLP deltas
    bank_b1: np.ndarray  # (depth, n_experts, hidden)
    bank_W2: np.ndarray  # (depth, n_experts, width, hidden)
    bank_b2: np.ndarray  # (depth, n_experts, width)
    router_W: np.ndarray  # (depth, n_experts, width)
    router_b: np.ndarray  # (depth, n_experts)
    tau: float
    lam: float
    expert_ids: tuple[int, ...]  # source task per bank slot

    @property
    def n_experts(self) -> int:
        return self.bank_W1.shape[1]

    def copy(self) -> "MergedMoE":
        return MergedMoE(
            arch=self.arch,
            base=self.base.copy(),
            bank_W1=self.bank_W1.copy(),
            bank_b1=self.bank_b1.copy(),
            bank_W2=self.bank_W2.copy(),
            bank_b2=self.bank_b2.copy(),
            router_W=self.router_W.copy(),
            router_b=self.router_b.copy(),
            tau=self.tau,
            lam=self.lam,
            expert_ids=tuple(self.expert_ids),
        )


@dataclass(frozen=True)
class MoEOutput:
    logits: np.ndarray | None  # (batch, n_classes), None when no head requested
    routing: np.ndarray  # (batch, depth, n_experts) softmax weights
    features: np.ndarray  # (batch, depth, width) pre-MLP router inputs
    final: np.ndarray  # (batch, width)
    hidden: np.ndarray  # (batch, depth, hidden) post-ReLU activations


def merge_attention(theta0: ModelParams, deltas, lam: float) -> ModelParams:
    """Base trunk plus lam times the summed attention differences."""
    deltas = list(deltas)
    out = theta0.copy()
    if not deltas:
        return out
    out.attn_W = out.attn_W + lam * np.sum([d.d_attn_W for d in deltas], axis=0)
    out.attn_b = out.attn_b + lam * np.sum([d.d_attn_b for d in deltas], axis=0)
    return out


def init_router(arch: Arch, n_experts: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    gen = Rng(seed).split("router-init").generator()
    w = ROUTER_INIT_SCALE * gen.standard_normal((arch.depth, n_experts, arch.width))
    return w, np.zeros((arch.depth, n_experts))


def stack_bank(deltas) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    deltas = list(deltas)
    return (
        np.stack([d.d_mlp_W1 for d in deltas], axis=1),
        np.stack([d.d_mlp_b1 for d in deltas], axis=1),
        np.stack([d.d_mlp_W2 for d in deltas], axis=1),
        np.stack([d.d_mlp_b2 for d in deltas], axis=1),
    )


def assemble_moe(
    theta0: ModelParams,
    deltas,
    lam: float,
    router_seed: int,
    tau: float = 1.0,
) -> MergedMoE:
    """Build the routed mixture from a base model and expert differences."""
    deltas = list(deltas)
    if not deltas:
        raise InvalidInputError("cannot assemble a mixture from zero experts")
    if tau <= 0.0:
        raise InvalidInputError(f"router temperature must be positive, got {tau}")
    ids = [d.source_task for d in deltas]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"expert source tasks must be unique, got {ids}")
    base = merge_attention(theta0, deltas, lam)
    bank_W1, bank_b1, bank_W2, bank_b2 = stack_bank(deltas)
    router_W, router_b = init_router(theta0.arch, len(deltas), router_seed)
    return MergedMoE(
        arch=theta0.arch,
        base=base,
        bank_W1=bank_W1,
        bank_b1=bank_b1,
        bank_W2=bank_W2,
        bank_b2=bank_b2,
        router_W=router_W,
        router_b=router_b,
        tau=float(tau),
        lam=float(lam),
        expert_ids=tuple(d.source_task for d in deltas),
    )


def moe_forward(moe: MergedMoE, X: np.ndarray, task: int | None = None) -> MoEOutput:
    """Run the mixture; pass a task id to also get that head's logits."""
    b = moe.base
    out, h_all, alpha, act = kernels.moe_forward(
        b.proj, b.attn_W, b.attn_b,
        b.mlp_W1, b.mlp_b1, b.mlp_W2, b.mlp_b2,
        moe.bank_W1, moe.bank_b1, moe.bank_W2, moe.bank_b2,
        moe.router_W, moe.router_b, moe.tau,
        np.ascontiguousarray(X, dtype=np.float64),
    )
    logits = None
    if task is not None:
        if task not in b.heads:
            raise InvalidRequestError(f"mixture has no head for task {task}")
        hw, hb = b.heads[task]
        logits = out @ hw.T + hb
    return MoEOutput(logits=logits, routing=alpha, features=h_all, final=out, hidden=act)


def routing_targets(expert_ids, task_id: int, n_rows: int) -> np.ndarray:
    """Per-sample target distribution over bank slots for one task's batch.

    Mass concentrates on the slot(s) sourced from this task; tasks with no
    matching slot get a uniform target so they pull toward indifference.
    """
    ids = np.asarray(expert_ids)
    mask = (ids == task_id).astype(np.float64)
    if mask.sum() > 0:
        t = mask / mask.sum()
    else:
        t = np.full(ids.shape[0], 1.0 / ids.shape[0])
    return np.tile(t, (n_rows, 1))


def train_routers(
    moe: MergedMoE,
    datasets,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> MergedMoE:
    """Train router weights only, with the trunk and expert bank frozen.

    Each layer's router gets an independent cross-entropy pull toward the
    target slot distribution, computed against the routing that layer
    actually produced. Earlier layers' routing still shapes later layers'
    inputs, so the layers co-adapt across steps.
    """
    datasets = list(datasets)
    if not datasets:
        raise InvalidInputError("router training needs at least one dataset")
    out = moe.copy()
    rng = Rng(seed)
    sched_gen = rng.split("schedule").generator()
    state = {}
    for k, ds in enumerate(datasets):
        state[k] = {
            "gen": rng.split(f"batches-{ds.task_id}-{k}").generator(),
            "order": np.arange(ds.inputs.shape[0]),
            "pos": ds.inputs.shape[0],
        }
    ds_order = np.arange(len(datasets))
    for step in range(steps):
        k = step % len(datasets)
        if k == 0:
            sched_gen.shuffle(ds_order)
        ds = datasets[ds_order[k]]
        st = state[ds_order[k]]
        n = ds.inputs.shape[0]
        if st["pos"] + batch_size > n:
            st["gen"].shuffle(st["order"])
            st["pos"] = 0
        idx = st["order"][st["pos"]:st["pos"] + batch_size]
        st["pos"] += batch_size
        res = moe_forward(out, ds.inputs[idx])
        targets = routing_targets(out.expert_ids, ds.task_id, idx.shape[0])
        diff = res.routing - targets[:, None, :]  # (B, L, E)
        scale = 1.0 / (out.tau * idx.shape[0])
        g_w = np.einsum("ble,bld->led", diff, res.features) * scale
        g_b = diff.sum(axis=0) * scale
        out.router_W = out.router_W - lr * g_w
        out.router_b = out.router_b - lr * g_b
    return out


def moe_expert_mlp(moe: MergedMoE, slot: int):
    """Full (not delta) MLP weights a single bank slot would apply alone."""
    if not 0 <= slot < moe.n_experts:
        raise InvalidRequestError(f"slot {slot} out of range for {moe.n_experts} experts")
    return (
        moe.base.mlp_W1 + moe.bank_W1[:, slot],
        moe.base.mlp_b1 + moe.bank_b1[:, slot],
        moe.base.mlp_W2 + moe.bank_W2[:, slot],
        moe.base.mlp_b2 + moe.bank_b2[:, slot],
    )


def bank_delta(moe: MergedMoE, slot: int) -> ExpertDelta:
    """The MLP delta stored at one bank slot, with zero attention parts."""
    if not 0 <= slot < moe.n_experts:
        raise InvalidRequestError(f"slot {slot} out of range for {moe.n_experts} experts")
    return ExpertDelta(
        source_task=moe.expert_ids[slot],
        d_attn_W=np.zeros_like(moe.base.attn_W),
        d_attn_b=np.zeros_like(moe.base.attn_b),
        d_mlp_W1=moe.bank_W1[:, slot].copy(),
        d_mlp_b1=moe.bank_b1[:, slot].copy(),
        d_mlp_W2=moe.bank_W2[:, slot].copy(),
        d_mlp_b2=moe.bank_b2[:, slot].copy(),
    )
