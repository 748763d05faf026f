"""Reference similarity methods the routing approach is compared against.

Three families: direct parameter cosine (pcs_m whole model, pcs_e single
expert delta), permutation-invariant products of adjacent weight matrices
(ics_m, ics_e; immune to hidden reordering), and representational similarity
of tapped activations on a shared probe set (reef). Raw values live on their
natural scales; clamped_value maps onto [0, 1] for side-by-side tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidRequestError
from .fingerprint import SimilarityMatrix
from .merging import MergedMoE, bank_delta, moe_expert_mlp, moe_forward
from .numerics import cosine_sim, linear_cka
from .toymodel import ExpertDelta


@dataclass(frozen=True)
class BaselineScore:
    method: str  # pcs_m | pcs_e | ics_m | ics_e | reef
    value: float
    clamped_value: float
    granularity: str  # "model" | "expert"
    victim_ref: str
    suspect_ref: str
    flags: tuple[str, ...] = ()


def _score(method, value, granularity, victim_ref, suspect_ref, flags=()):
    return BaselineScore(
        method=method,
        value=float(value),
        clamped_value=float(np.clip(value, 0.0, 1.0)),
        granularity=granularity,
        victim_ref=victim_ref,
        suspect_ref=suspect_ref,
        flags=tuple(flags),
    )


def _flat_concat(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _delta_vec(delta: ExpertDelta) -> np.ndarray:
    return _flat_concat([delta.d_mlp_W1, delta.d_mlp_b1, delta.d_mlp_W2, delta.d_mlp_b2])


def pcs_expert(
    delta_v: ExpertDelta,
    delta_s: ExpertDelta,
    victim_ref: str = "expert",
    suspect_ref: str = "expert",
) -> BaselineScore:
    """Cosine of two experts' flattened MLP delta tensors."""
    cos, degenerate = cosine_sim(_delta_vec(delta_v), _delta_vec(delta_s), return_flag=True)
    return _score(
        "pcs_e", cos, "expert", victim_ref, suspect_ref,
        flags=("degenerate",) if degenerate else (),
    )


def _model_param_vecs(moe_v: MergedMoE, moe_s: MergedMoE):
    flags = []
    common = min(moe_v.n_experts, moe_s.n_experts)
    if moe_v.n_experts != moe_s.n_experts:
        flags.append("structure-mismatch")
    vecs = []
    for m in (moe_v, moe_s):
        b = m.base
        vecs.append(_flat_concat([
            b.proj, b.attn_W, b.attn_b,
            b.mlp_W1, b.mlp_b1, b.mlp_W2, b.mlp_b2,
            m.bank_W1[:, :common], m.bank_b1[:, :common],
            m.bank_W2[:, :common], m.bank_b2[:, :common],
            m.router_W[:, :common], m.router_b[:, :common],
        ]))
    return vecs[0], vecs[1], flags


def pcs_model(moe_v: MergedMoE, moe_s: MergedMoE) -> BaselineScore:
    """Cosine of the full flattened parameter vectors.

    With different expert counts only the leading common slots enter, and
    the score is flagged.
    """
    v, s, flags = _model_param_vecs(moe_v, moe_s)
    cos, degenerate = cosine_sim(v, s, return_flag=True)
    if degenerate:
        flags.append("degenerate")
    return _score("pcs_m", cos, "model", "model", "model", flags)


def _tail_layers(depth: int) -> range:
    # deeper layers specialize hardest, so products are taken there
    return range(depth - (depth + 1) // 2, depth)


def _mlp_products(mlp_weights) -> np.ndarray:
    w1, _, w2, _ = mlp_weights
    depth = w1.shape[0]
    return _flat_concat([w2[l] @ w1[l] for l in _tail_layers(depth)])


def ics_expert(
    mlp_v, mlp_s, victim_ref: str = "expert", suspect_ref: str = "expert"
) -> BaselineScore:
    """Cosine of hidden-permutation-invariant products of full expert MLPs.

    Arguments are per-layer (W1, b1, W2, b2) stacks of the expert's full
    weights, base plus delta. W2 P^T P W1 = W2 W1, so any hidden reordering
    cancels in the product.
    """
    cos, degenerate = cosine_sim(_mlp_products(mlp_v), _mlp_products(mlp_s), return_flag=True)
    return _score(
        "ics_e", cos, "expert", victim_ref, suspect_ref,
        flags=("degenerate",) if degenerate else (),
    )


def _model_products(moe: MergedMoE, common: int) -> np.ndarray:
    b = moe.base
    parts = []
    for l in _tail_layers(moe.arch.depth):
        parts.append(b.attn_W[l] @ b.attn_W[l].T)
        parts.append(b.mlp_W2[l] @ b.mlp_W1[l])
        for slot in range(common):
            w1 = b.mlp_W1[l] + moe.bank_W1[l, slot]
            w2 = b.mlp_W2[l] + moe.bank_W2[l, slot]
            parts.append(w2 @ w1)
    return _flat_concat(parts)


def ics_model(moe_v: MergedMoE, moe_s: MergedMoE) -> BaselineScore:
    """Model-level invariant products: mixer grams, base and expert MLPs."""
    flags = []
    common = min(moe_v.n_experts, moe_s.n_experts)
    if moe_v.n_experts != moe_s.n_experts:
        flags.append("structure-mismatch")
    cos, degenerate = cosine_sim(
        _model_products(moe_v, common), _model_products(moe_s, common), return_flag=True
    )
    if degenerate:
        flags.append("degenerate")
    return _score("ics_m", cos, "model", "model", "model", flags)


def _tap_activations(moe: MergedMoE, X: np.ndarray, tap: str) -> np.ndarray:
    res = moe_forward(moe, X)
    if tap == "final":
        return res.final
    if tap.startswith("pre_mlp:"):
        layer = int(tap.split(":", 1)[1])
        if not 0 <= layer < moe.arch.depth:
            raise InvalidRequestError(f"tap layer {layer} out of range")
        return res.features[:, layer, :]
    raise InvalidRequestError(f"unknown tap {tap!r}; use 'final' or 'pre_mlp:<layer>'")


def reef(moe_v: MergedMoE, moe_s: MergedMoE, probe_datasets, tap: str = "final") -> BaselineScore:
    """Centered kernel alignment of tapped activations on shared probes."""
    probe_datasets = list(probe_datasets)
    if not probe_datasets:
        raise InvalidInputError("representation comparison needs probe data")
    X = np.concatenate([ds.inputs for ds in probe_datasets], axis=0)
    value, degenerate = linear_cka(
        _tap_activations(moe_v, X, tap), _tap_activations(moe_s, X, tap), return_flag=True
    )
    return _score(
        "reef", value, "model", f"model:{tap}", f"model:{tap}",
        flags=("degenerate",) if degenerate else (),
    )


def expert_pair_score(moe_v: MergedMoE, slot_v: int, moe_s: MergedMoE, slot_s: int, method: str) -> BaselineScore:
    """One expert-granularity score between bank slots of two mixtures."""
    refs = {"victim_ref": f"expert:{slot_v}", "suspect_ref": f"expert:{slot_s}"}
    if method == "pcs_e":
        return pcs_expert(bank_delta(moe_v, slot_v), bank_delta(moe_s, slot_s), **refs)
    if method == "ics_e":
        return ics_expert(moe_expert_mlp(moe_v, slot_v), moe_expert_mlp(moe_s, slot_s), **refs)
    raise InvalidRequestError(f"unknown expert method {method!r}")


def expert_scores_and_matrix(moe_v: MergedMoE, moe_s: MergedMoE, method: str):
    """All-pairs expert scores plus the matrix view of their clamped values.

    Clamping onto [0, 1] lets the same margin-based matcher the fingerprints
    use apply unchanged.
    """
    nv, ns = moe_v.n_experts, moe_s.n_experts
    scores = []
    values = np.zeros((nv, ns))
    for i in range(nv):
        for j in range(ns):
            score = expert_pair_score(moe_v, i, moe_s, j, method)
            scores.append(score)
            values[i, j] = score.clamped_value
    matrix = SimilarityMatrix(
        values=values,
        rsf_values=values,
        rpf_values=values,
        victim_slots=tuple(range(nv)),
        suspect_slots=tuple(range(ns)),
        degenerate=(),
    )
    return scores, matrix


def expert_score_matrix(moe_v: MergedMoE, moe_s: MergedMoE, method: str) -> SimilarityMatrix:
    return expert_scores_and_matrix(moe_v, moe_s, method)[1]
