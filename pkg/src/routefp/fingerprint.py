"""Routing fingerprints and expert-level attribution.

A mixture's routing tensor holds, per probe task, each expert's mean routing
weight at each layer. Centering across experts removes the shared per-task
baseline; what is left is each expert's routing signature. Two views of that
signature are compared: the raw centered scores (cosine) and their
per-layer task distributions (divergence), averaged into one similarity.
Attribution then matches suspect experts to victim experts when the best
similarity clears the runner-up by a margin.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bundleio import FORMAT_VERSION, checksum_u64, save_json
from .errors import InvalidInputError, InvalidRequestError
from .merging import MergedMoE, moe_forward
from .numerics import cosine_sim, jsd2, pairwise_mean, softmax

DEFAULT_TAU_MARGIN = 0.3
DEFAULT_TAU_TOP1 = 0.8


@dataclass(frozen=True)
class RoutingTensor:
    """Mean routing weights, indexed [probe_task, expert_slot, layer]."""

    values: np.ndarray  # (n_tasks, n_experts, depth)
    probe_ids: tuple[int, ...]
    expert_ids: tuple[int, ...]
    samples_used: int
    centered: bool = False


@dataclass(frozen=True)
class ExpertFingerprint:
    expert_slot: int
    rsf: np.ndarray  # (n_tasks, depth) centered routing signature
    rpf_vec: np.ndarray  # (n_tasks,) softmax of layer-summed signature
    rpf_layered: np.ndarray  # (n_tasks, depth) per-layer task distributions


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (n_victim, n_suspect) combined similarity
    rsf_values: np.ndarray
    rpf_values: np.ndarray
    victim_slots: tuple[int, ...]
    suspect_slots: tuple[int, ...]
    degenerate: tuple[tuple[int, int], ...]  # pairs where cosine was undefined


@dataclass(frozen=True)
class AttributionReport:
    decisions: dict  # suspect slot -> victim slot or None
    top1: dict  # suspect slot -> best similarity
    margins: dict  # suspect slot -> top1 - top2, or None with a single victim
    rule: dict  # suspect slot -> "margin" | "top1"
    tau_margin: float
    tau_top1: float
    accuracy: float | None = None
    false_matches: int | None = None
    errors: tuple[tuple[int, object, object], ...] = ()  # (suspect, decided, truth)


def capture_routing(moe: MergedMoE, probe_datasets, batch_size: int = 256) -> RoutingTensor:
    """Average each expert's routing weight over every probe task's samples."""
    probe_datasets = list(probe_datasets)
    if not probe_datasets:
        raise InvalidInputError("routing capture needs at least one probe set")
    sizes = {ds.inputs.shape[0] for ds in probe_datasets}
    if len(sizes) != 1:
        raise InvalidInputError(f"probe sets must share one size, got {sorted(sizes)}")
    if 0 in sizes:
        raise InvalidInputError("every probe task needs at least one sample")
    rows = []
    for ds in probe_datasets:
        chunks = [
            moe_forward(moe, ds.inputs[s:s + batch_size]).routing
            for s in range(0, ds.inputs.shape[0], batch_size)
        ]
        mean_le = pairwise_mean(np.concatenate(chunks, axis=0))  # (depth, n_experts)
        rows.append(mean_le.T)  # (n_experts, depth)
    return RoutingTensor(
        values=np.stack(rows, axis=0),
        probe_ids=tuple(ds.task_id for ds in probe_datasets),
        expert_ids=tuple(moe.expert_ids),
        samples_used=int(sizes.pop()),
        centered=False,
    )


def center_routing(rt: RoutingTensor) -> RoutingTensor:
    """Subtract the cross-expert mean so signatures are relative preferences."""
    if rt.centered:
        return rt
    centered = rt.values - rt.values.mean(axis=1, keepdims=True)
    return replace(rt, values=centered, centered=True)


def build_fingerprints(rt: RoutingTensor) -> list[ExpertFingerprint]:
    """One fingerprint per expert slot from a centered routing tensor."""
    if not rt.centered:
        raise InvalidRequestError("fingerprints require a centered routing tensor")
    fps = []
    for j in range(rt.values.shape[1]):
        rsf = rt.values[:, j, :]
        rpf_vec = softmax(rsf.sum(axis=1))
        rpf_layered = np.stack(
            [softmax(rsf[:, l]) for l in range(rsf.shape[1])], axis=1
        )
        fps.append(
            ExpertFingerprint(
                expert_slot=j, rsf=rsf, rpf_vec=rpf_vec, rpf_layered=rpf_layered
            )
        )
    return fps


def fingerprint_moe(moe: MergedMoE, probe_datasets, batch_size: int = 256):
    """Capture, center, and fingerprint in one call."""
    rt = center_routing(capture_routing(moe, probe_datasets, batch_size=batch_size))
    return build_fingerprints(rt), rt


def sim_rsf(a: ExpertFingerprint, b: ExpertFingerprint) -> tuple[float, bool]:
    """Cosine of the flattened signatures, mapped onto [0, 1]."""
    cos, degenerate = cosine_sim(a.rsf.ravel(), b.rsf.ravel(), return_flag=True)
    if degenerate:
        return 0.5, True
    return 0.5 * (1.0 + cos), False


def sim_rpf(a: ExpertFingerprint, b: ExpertFingerprint) -> float:
    """One minus the mean per-layer divergence of the task distributions."""
    depth = a.rpf_layered.shape[1]
    div = np.array([jsd2(a.rpf_layered[:, l], b.rpf_layered[:, l]) for l in range(depth)])
    return float(1.0 - pairwise_mean(div))


def similarity_matrix(victim_fps, suspect_fps) -> SimilarityMatrix:
    victim_fps = list(victim_fps)
    suspect_fps = list(suspect_fps)
    if not victim_fps or not suspect_fps:
        raise InvalidInputError("similarity needs fingerprints on both sides")
    shapes = {fp.rsf.shape for fp in victim_fps + suspect_fps}
    if len(shapes) != 1:
        raise InvalidInputError(f"fingerprint shapes disagree: {sorted(shapes)}")
    nv, ns = len(victim_fps), len(suspect_fps)
    rsf_m = np.zeros((nv, ns))
    rpf_m = np.zeros((nv, ns))
    degenerate = []
    for i, vf in enumerate(victim_fps):
        for j, sf in enumerate(suspect_fps):
            rsf_m[i, j], flag = sim_rsf(vf, sf)
            rpf_m[i, j] = sim_rpf(vf, sf)
            if flag:
                degenerate.append((vf.expert_slot, sf.expert_slot))
    return SimilarityMatrix(
        values=0.5 * (rsf_m + rpf_m),
        rsf_values=rsf_m,
        rpf_values=rpf_m,
        victim_slots=tuple(fp.expert_slot for fp in victim_fps),
        suspect_slots=tuple(fp.expert_slot for fp in suspect_fps),
        degenerate=tuple(degenerate),
    )


def attribute(
    matrix: SimilarityMatrix,
    tau_margin: float = DEFAULT_TAU_MARGIN,
    tau_top1: float = DEFAULT_TAU_TOP1,
    ground_truth: dict | None = None,
) -> AttributionReport:
    """Match each suspect expert to its most similar victim expert, or to none.

    A match requires the best victim to beat the runner-up by tau_margin.
    With a single victim expert no runner-up exists, so the absolute
    threshold tau_top1 decides instead and the decision is flagged.
    """
    nv = matrix.values.shape[0]
    decisions, top1, margins, rule = {}, {}, {}, {}
    for j, s_slot in enumerate(matrix.suspect_slots):
        col = matrix.values[:, j]
        order = np.argsort(-col, kind="stable")
        best = int(order[0])
        best_val = float(col[best])
        top1[s_slot] = best_val
        if nv >= 2:
            margin = best_val - float(col[int(order[1])])
            margins[s_slot] = margin
            rule[s_slot] = "margin"
            matched = margin >= tau_margin
        else:
            margins[s_slot] = None
            rule[s_slot] = "top1"
            matched = best_val >= tau_top1
        decisions[s_slot] = matrix.victim_slots[best] if matched else None
    accuracy = None
    false_matches = None
    errors = ()
    if ground_truth is not None:
        missing = [s for s in matrix.suspect_slots if s not in ground_truth]
        if missing:
            raise InvalidInputError(f"ground truth missing suspect slots {missing}")
        wrong = [
            (s, decisions[s], ground_truth[s])
            for s in matrix.suspect_slots
            if decisions[s] != ground_truth[s]
        ]
        errors = tuple(wrong)
        accuracy = 1.0 - len(wrong) / len(matrix.suspect_slots)
        false_matches = sum(1 for s, d, t in wrong if d is not None)
    return AttributionReport(
        decisions=decisions,
        top1=top1,
        margins=margins,
        rule=rule,
        tau_margin=tau_margin,
        tau_top1=tau_top1,
        accuracy=accuracy,
        false_matches=false_matches,
        errors=errors,
    )


def fingerprint_to_obj(fp: ExpertFingerprint, rt: RoutingTensor) -> dict:
    return {
        "expert_slot": fp.expert_slot,
        "rsf": fp.rsf.tolist(),
        "rpf_vec": fp.rpf_vec.tolist(),
        "rpf_layered": fp.rpf_layered.tolist(),
        "probe_ids": list(rt.probe_ids),
        "samples_used": rt.samples_used,
        "checksum": checksum_u64([fp.rsf, fp.rpf_vec, fp.rpf_layered]),
    }


def fingerprints_to_obj(fps, rt: RoutingTensor) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "fingerprints",
        "probe_ids": list(rt.probe_ids),
        "expert_ids": list(rt.expert_ids),
        "samples_used": rt.samples_used,
        "experts": [fingerprint_to_obj(fp, rt) for fp in fps],
    }


def save_fingerprints(fps, rt: RoutingTensor, path) -> None:
    save_json(fingerprints_to_obj(fps, rt), path)


def similarity_to_obj(matrix: SimilarityMatrix) -> dict:
    return {
        "victim_slots": list(matrix.victim_slots),
        "suspect_slots": list(matrix.suspect_slots),
        "values": matrix.values.tolist(),
        "sim_rsf": matrix.rsf_values.tolist(),
        "sim_rpf": matrix.rpf_values.tolist(),
        "degenerate": [list(p) for p in matrix.degenerate],
    }


def similarity_from_obj(obj) -> SimilarityMatrix:
    return SimilarityMatrix(
        values=np.asarray(obj["values"], dtype=np.float64),
        rsf_values=np.asarray(obj["sim_rsf"], dtype=np.float64),
        rpf_values=np.asarray(obj["sim_rpf"], dtype=np.float64),
        victim_slots=tuple(int(v) for v in obj["victim_slots"]),
        suspect_slots=tuple(int(s) for s in obj["suspect_slots"]),
        degenerate=tuple((int(a), int(b)) for a, b in obj["degenerate"]),
    )


def attribution_to_obj(report: AttributionReport) -> dict:
    return {
        "decisions": {str(s): v for s, v in report.decisions.items()},
        "top1": {str(s): v for s, v in report.top1.items()},
        "margins": {str(s): v for s, v in report.margins.items()},
        "rule": {str(s): v for s, v in report.rule.items()},
        "tau_margin": report.tau_margin,
        "tau_top1": report.tau_top1,
        "accuracy": report.accuracy,
        "false_matches": report.false_matches,
        "errors": [list(e) for e in report.errors],
    }


def similarity_csv(matrix: SimilarityMatrix, path, which: str = "combined") -> None:
    """Matrix-form CSV: victim slots down the rows, suspect slots across."""
    source = {
        "combined": matrix.values,
        "signature": matrix.rsf_values,
        "distribution": matrix.rpf_values,
    }
    if which not in source:
        raise InvalidRequestError(f"unknown matrix component {which!r}")
    values = source[which]
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("victim_slot," + ",".join(f"suspect_{s}" for s in matrix.suspect_slots) + "\n")
        for i, v in enumerate(matrix.victim_slots):
            f.write(str(v) + "," + ",".join(f"{x:.6f}" for x in values[i]) + "\n")
