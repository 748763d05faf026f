"""Adversarial edits an acquirer might apply to a routed mixture.

Every operation returns a fresh model plus a record carrying the ground-truth
correspondence between suspect bank slots and victim bank slots (None marks a
slot with no victim counterpart). Structural edits retrain routers when
training data is supplied; weight-local edits (pruning, permutation) leave
routers untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidRequestError
from .merging import MergedMoE, assemble_moe, moe_forward, train_routers
from .numerics import Rng
from .toymodel import ModelParams, finetune, task_vector

ROUTER_INIT_SCALE = 0.01


@dataclass(frozen=True)
class RouterTrainConfig:
    steps: int = 500
    lr: float = 0.2
    seed: int = 0
    batch_size: int = 32


@dataclass(frozen=True)
class TamperRecord:
    op: str
    affected_experts: tuple[int, ...]
    params: dict = field(default_factory=dict)
    # suspect slot -> victim slot, or None for slots with no victim origin
    ground_truth_map: dict = field(default_factory=dict)


def _identity_map(n: int) -> dict:
    return {i: i for i in range(n)}


def _reinit_rows(moe: MergedMoE, slots, seed: int) -> None:
    gen = Rng(seed).split("router-reinit").generator()
    for slot in sorted(slots):
        moe.router_W[:, slot, :] = ROUTER_INIT_SCALE * gen.standard_normal(
            (moe.arch.depth, moe.arch.width)
        )
        moe.router_b[:, slot] = 0.0


def _maybe_retrain(moe: MergedMoE, datasets, cfg: RouterTrainConfig) -> MergedMoE:
    datasets = list(datasets)
    if not datasets:
        return moe
    return train_routers(moe, datasets, cfg.steps, cfg.lr, cfg.seed, cfg.batch_size)


def replace_experts(moe: MergedMoE, replacements, datasets, router_cfg: RouterTrainConfig):
    """Swap the deltas at the given slots for freshly trained ones.

    replacements maps slot -> ExpertDelta. Surviving router rows warm-start
    from the victim's; replaced rows are re-initialized before retraining.
    Replacing zero slots returns the mixture unchanged.
    """
    if not replacements:
        return moe.copy(), TamperRecord(
            op="replace",
            affected_experts=(),
            params={"count": 0},
            ground_truth_map=_identity_map(moe.n_experts),
        )
    for slot in replacements:
        if not 0 <= slot < moe.n_experts:
            raise InvalidRequestError(f"slot {slot} out of range")
    out = moe.copy()
    ids = list(out.expert_ids)
    for slot, delta in replacements.items():
        out.bank_W1[:, slot] = delta.d_mlp_W1
        out.bank_b1[:, slot] = delta.d_mlp_b1
        out.bank_W2[:, slot] = delta.d_mlp_W2
        out.bank_b2[:, slot] = delta.d_mlp_b2
        ids[slot] = delta.source_task
    out.expert_ids = tuple(ids)
    _reinit_rows(out, replacements.keys(), router_cfg.seed)
    out = _maybe_retrain(out, datasets, router_cfg)
    gt = {s: (None if s in replacements else s) for s in range(moe.n_experts)}
    return out, TamperRecord(
        op="replace",
        affected_experts=tuple(sorted(replacements.keys())),
        params={"count": len(replacements)},
        ground_truth_map=gt,
    )


def add_experts(moe: MergedMoE, new_deltas, datasets, router_cfg: RouterTrainConfig):
    """Append new expert slots; existing router rows warm-start."""
    new_deltas = list(new_deltas)
    if not new_deltas:
        return moe.copy(), TamperRecord(
            op="add",
            affected_experts=(),
            params={"count": 0},
            ground_truth_map=_identity_map(moe.n_experts),
        )
    out = moe.copy()
    out.bank_W1 = np.concatenate(
        [out.bank_W1] + [d.d_mlp_W1[:, None] for d in new_deltas], axis=1)
    out.bank_b1 = np.concatenate(
        [out.bank_b1] + [d.d_mlp_b1[:, None] for d in new_deltas], axis=1)
    out.bank_W2 = np.concatenate(
        [out.bank_W2] + [d.d_mlp_W2[:, None] for d in new_deltas], axis=1)
    out.bank_b2 = np.concatenate(
        [out.bank_b2] + [d.d_mlp_b2[:, None] for d in new_deltas], axis=1)
    n_old, n_new = moe.n_experts, len(new_deltas)
    out.router_W = np.concatenate(
        [out.router_W, np.zeros((moe.arch.depth, n_new, moe.arch.width))], axis=1)
    out.router_b = np.concatenate(
        [out.router_b, np.zeros((moe.arch.depth, n_new))], axis=1)
    out.expert_ids = tuple(moe.expert_ids) + tuple(d.source_task for d in new_deltas)
    _reinit_rows(out, range(n_old, n_old + n_new), router_cfg.seed)
    out = _maybe_retrain(out, datasets, router_cfg)
    gt = _identity_map(n_old)
    gt.update({n_old + k: None for k in range(n_new)})
    return out, TamperRecord(
        op="add",
        affected_experts=tuple(range(n_old, n_old + n_new)),
        params={"count": n_new},
        ground_truth_map=gt,
    )


def delete_experts(moe: MergedMoE, keep, datasets, router_cfg: RouterTrainConfig):
    """Keep only the listed slots; routers restart from scratch.

    Keeping every slot is allowed and yields the original mixture up to
    router re-initialization and retraining.
    """
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise InvalidRequestError("delete must keep at least one expert")
    for slot in keep:
        if not 0 <= slot < moe.n_experts:
            raise InvalidRequestError(f"slot {slot} out of range")
    out = moe.copy()
    out.bank_W1 = out.bank_W1[:, keep].copy()
    out.bank_b1 = out.bank_b1[:, keep].copy()
    out.bank_W2 = out.bank_W2[:, keep].copy()
    out.bank_b2 = out.bank_b2[:, keep].copy()
    out.expert_ids = tuple(moe.expert_ids[k] for k in keep)
    out.router_W = np.zeros((moe.arch.depth, len(keep), moe.arch.width))
    out.router_b = np.zeros((moe.arch.depth, len(keep)))
    _reinit_rows(out, range(len(keep)), router_cfg.seed)
    out = _maybe_retrain(out, datasets, router_cfg)
    dropped = tuple(s for s in range(moe.n_experts) if s not in keep)
    return out, TamperRecord(
        op="delete",
        affected_experts=dropped,
        params={"kept": len(keep)},
        ground_truth_map={new: old for new, old in enumerate(keep)},
    )


def finetune_experts(
    moe: MergedMoE,
    theta0: ModelParams,
    expert_models,
    train_by_task,
    datasets,
    steps: int,
    lr: float,
    seed: int,
    router_cfg: RouterTrainConfig,
):
    """Continue training every expert on its own task, then re-merge.

    expert_models maps task id to the standalone tuned model the expert came
    from; train_by_task maps task id to its training split. The rebuilt
    mixture warm-starts its routers from the victim's before retraining.
    """
    if steps < 0:
        raise InvalidRequestError("finetune step count cannot be negative")
    rng = Rng(seed)
    deltas = []
    for slot, task in enumerate(moe.expert_ids):
        if task not in expert_models or task not in train_by_task:
            raise InvalidRequestError(f"missing expert model or data for task {task}")
        tuned = finetune(
            expert_models[task], train_by_task[task], task,
            steps=steps, lr=lr, seed=rng.child_seed(f"ft-{slot}-{task}"),
        )
        deltas.append(task_vector(tuned, theta0, source_task=task))
    out = assemble_moe(theta0, deltas, moe.lam, router_seed=router_cfg.seed, tau=moe.tau)
    out.base.heads = {t: (w.copy(), b.copy()) for t, (w, b) in moe.base.heads.items()}
    out.router_W = moe.router_W.copy()
    out.router_b = moe.router_b.copy()
    out = _maybe_retrain(out, datasets, router_cfg)
    return out, TamperRecord(
        op="finetune",
        affected_experts=tuple(range(moe.n_experts)),
        params={"steps": steps, "lr": lr},
        ground_truth_map=_identity_map(moe.n_experts),
    )


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise InvalidInputError(f"sparsity must be in [0, 1), got {sparsity}")


def prune_magnitude(moe: MergedMoE, sparsity: float):
    """Zero the smallest-magnitude fraction of each expert delta matrix."""
    _check_sparsity(sparsity)
    out = moe.copy()
    for bank in (out.bank_W1, out.bank_W2):
        for l in range(bank.shape[0]):
            for e in range(bank.shape[1]):
                w = bank[l, e]
                k = int(np.floor(sparsity * w.size))
                if k == 0:
                    continue
                flat = np.abs(w).ravel()
                drop = np.argsort(flat, kind="stable")[:k]
                w.ravel()[drop] = 0.0
    return out, TamperRecord(
        op="prune_magnitude",
        affected_experts=tuple(range(moe.n_experts)),
        params={"sparsity": sparsity},
        ground_truth_map=_identity_map(moe.n_experts),
    )


def prune_wanda(moe: MergedMoE, sparsity: float, calib_datasets):
    """Activation-aware pruning of expert deltas, row by row.

    Each weight is scored by its magnitude times the calibration norm of the
    input feature it multiplies, with activations gathered under the model's
    own routing. The lowest-scored fraction of each output row is zeroed.
    """
    _check_sparsity(sparsity)
    calib_datasets = list(calib_datasets)
    if not calib_datasets:
        raise InvalidInputError("activation-aware pruning needs calibration data")
    X = np.concatenate([ds.inputs for ds in calib_datasets], axis=0)
    res = moe_forward(moe, X)
    norms_in = np.linalg.norm(res.features, axis=0)  # (depth, width)
    norms_hid = np.linalg.norm(res.hidden, axis=0)  # (depth, hidden)
    out = moe.copy()
    for bank, norms in ((out.bank_W1, norms_in), (out.bank_W2, norms_hid)):
        n_cols = bank.shape[-1]
        k = int(np.floor(sparsity * n_cols))
        if k == 0:
            continue
        for l in range(bank.shape[0]):
            for e in range(bank.shape[1]):
                w = bank[l, e]
                score = np.abs(w) * norms[l][None, :]
                drop = np.argsort(score, axis=1, kind="stable")[:, :k]
                np.put_along_axis(w, drop, 0.0, axis=1)
    return out, TamperRecord(
        op="prune_wanda",
        affected_experts=tuple(range(moe.n_experts)),
        params={"sparsity": sparsity, "calib_samples": int(X.shape[0])},
        ground_truth_map=_identity_map(moe.n_experts),
    )


def permute_hidden(moe: MergedMoE, seed: int):
    """Shuffle each layer's hidden MLP dimension; the function is unchanged.

    The same permutation is applied to the base MLP and every bank slot in a
    layer, so every expert's effective weights stay consistent.
    """
    out = moe.copy()
    rng = Rng(seed)
    perms = []
    for l in range(moe.arch.depth):
        perm = rng.split(f"perm-{l}").generator().permutation(moe.arch.hidden)
        perms.append(perm.tolist())
        out.base.mlp_W1[l] = out.base.mlp_W1[l][perm]
        out.base.mlp_b1[l] = out.base.mlp_b1[l][perm]
        out.base.mlp_W2[l] = out.base.mlp_W2[l][:, perm]
        out.bank_W1[l] = out.bank_W1[l][:, perm, :]
        out.bank_b1[l] = out.bank_b1[l][:, perm]
        out.bank_W2[l] = out.bank_W2[l][:, :, perm]
    return out, TamperRecord(
        op="permute",
        affected_experts=tuple(range(moe.n_experts)),
        params={"seed": seed},
        ground_truth_map=_identity_map(moe.n_experts),
    )
