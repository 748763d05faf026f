import types

import numpy as np
import pytest

from routefp.errors import InvalidInputError, InvalidRequestError
from routefp.fingerprint import (
    ExpertFingerprint,
    SimilarityMatrix,
    attribute,
    build_fingerprints,
    capture_routing,
    center_routing,
    fingerprint_moe,
    fingerprints_to_obj,
    similarity_csv,
    similarity_from_obj,
    similarity_matrix,
    similarity_to_obj,
    sim_rpf,
    sim_rsf,
)
from routefp.harness import victim_probe_suite


@pytest.fixture(scope="module")
def victim_fps(victim, probes):
    return fingerprint_moe(victim.moe, probes)


def _fp(slot, rsf, rpf_layered):
    rpf_layered = np.asarray(rpf_layered, dtype=np.float64)
    return ExpertFingerprint(
        expert_slot=slot,
        rsf=np.asarray(rsf, dtype=np.float64),
        rpf_vec=rpf_layered.mean(axis=1),
        rpf_layered=rpf_layered,
    )


def test_capture_rows_are_distributions_over_experts(victim, probes):
    rt = capture_routing(victim.moe, probes)
    n_tasks = len(probes)
    assert rt.values.shape == (n_tasks, victim.moe.n_experts, victim.moe.arch.depth)
    sums = rt.values.sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert rt.probe_ids == tuple(ds.task_id for ds in probes)
    assert not rt.centered


def test_capture_fail_closed(victim, probes):
    with pytest.raises(InvalidInputError):
        capture_routing(victim.moe, [])
    short = types.SimpleNamespace(inputs=probes[0].inputs[:16], task_id=0)
    with pytest.raises(InvalidInputError):
        capture_routing(victim.moe, [short, probes[1]])
    empty = types.SimpleNamespace(inputs=probes[0].inputs[:0], task_id=0)
    with pytest.raises(InvalidInputError):
        capture_routing(victim.moe, [empty])


def test_capture_batch_size_does_not_change_result(victim, probes):
    a = capture_routing(victim.moe, probes, batch_size=256)
    b = capture_routing(victim.moe, probes, batch_size=37)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_centering_zeroes_the_expert_mean(victim, probes):
    rt = center_routing(capture_routing(victim.moe, probes))
    assert rt.centered
    assert np.allclose(rt.values.mean(axis=1), 0.0, atol=1e-12)
    # centering twice is a no-op
    assert center_routing(rt) is rt


def test_fingerprints_require_centering(victim, probes):
    raw = capture_routing(victim.moe, probes)
    with pytest.raises(InvalidRequestError):
        build_fingerprints(raw)
    fps = build_fingerprints(center_routing(raw))
    assert [fp.expert_slot for fp in fps] == list(range(victim.moe.n_experts))
    for fp in fps:
        assert np.isclose(fp.rpf_vec.sum(), 1.0, atol=1e-12)
        assert np.all(fp.rpf_vec > 0.0)
        assert np.allclose(fp.rpf_layered.sum(axis=0), 1.0, atol=1e-12)


def test_self_similarity_is_one(victim_fps):
    fps, _ = victim_fps
    assert sim_rsf(fps[0], fps[0]) == (1.0, False)
    assert sim_rpf(fps[0], fps[0]) == pytest.approx(1.0, abs=1e-12)


def test_rsf_degenerate_zero_signature():
    zero = _fp(0, np.zeros((3, 2)), np.full((3, 2), 1.0 / 3.0))
    other = _fp(1, np.eye(3)[:, :2], np.full((3, 2), 1.0 / 3.0))
    val, flag = sim_rsf(zero, other)
    assert flag
    assert val == 0.5


def test_rpf_divergence_oracle():
    """Layer divergences of 0.31128 and 0 must average to similarity 0.84436."""
    a = _fp(0, np.zeros((2, 2)), [[0.5, 0.5], [0.5, 0.5]])
    b = _fp(1, np.zeros((2, 2)), [[1.0, 0.5], [0.0, 0.5]])
    assert sim_rpf(a, b) == pytest.approx(0.84436, abs=1e-4)


def test_similarity_matrix_combines_evenly(victim_fps):
    fps, _ = victim_fps
    m = similarity_matrix(fps, fps)
    assert np.allclose(m.values, 0.5 * (m.rsf_values + m.rpf_values), atol=1e-15)
    assert m.victim_slots == m.suspect_slots == tuple(range(len(fps)))
    assert m.degenerate == ()


def test_similarity_matrix_fail_closed(victim_fps):
    fps, _ = victim_fps
    with pytest.raises(InvalidInputError):
        similarity_matrix([], fps)
    odd = _fp(0, np.zeros((2, 3)), np.full((2, 3), 0.5))
    with pytest.raises(InvalidInputError):
        similarity_matrix(fps, [odd])


def test_victim_self_matrix_is_diagonal_dominant(victim_fps):
    """Every expert matches itself perfectly and no one else closely."""
    fps, _ = victim_fps
    m = similarity_matrix(fps, fps)
    assert np.allclose(np.diag(m.values), 1.0, atol=1e-9)
    off = m.values[~np.eye(len(fps), dtype=bool)]
    assert off.max() < 0.8


def test_fingerprints_stable_under_probe_halving(victim, victim_fps):
    fps, _ = victim_fps
    half_probes = victim_probe_suite(victim, victim.config.samples_per_task // 2)
    half_fps, _ = fingerprint_moe(victim.moe, half_probes)
    cross = similarity_matrix(fps, half_fps)
    drift = np.abs(np.diag(cross.values) - 1.0)
    assert drift.max() < 0.05


def _matrix(values):
    values = np.asarray(values, dtype=np.float64)
    nv, ns = values.shape
    return SimilarityMatrix(
        values=values,
        rsf_values=values,
        rpf_values=values,
        victim_slots=tuple(range(nv)),
        suspect_slots=tuple(range(ns)),
        degenerate=(),
    )


def test_attribute_margin_rule():
    rep = attribute(_matrix([[0.9, 0.2], [0.3, 0.8]]), tau_margin=0.3)
    assert rep.decisions == {0: 0, 1: 1}
    assert rep.rule == {0: "margin", 1: "margin"}
    assert rep.margins[0] == pytest.approx(0.6)
    assert rep.top1[0] == pytest.approx(0.9)


def test_attribute_close_call_goes_to_none():
    rep = attribute(_matrix([[0.50], [0.45]]), tau_margin=0.3)
    assert rep.decisions == {0: None}
    assert rep.margins[0] == pytest.approx(0.05)


def test_attribute_single_victim_uses_absolute_threshold():
    rep = attribute(_matrix([[0.9, 0.5]]), tau_margin=0.3, tau_top1=0.8)
    assert rep.rule == {0: "top1", 1: "top1"}
    assert rep.margins == {0: None, 1: None}
    assert rep.decisions == {0: 0, 1: None}


def test_attribute_scores_against_ground_truth():
    m = _matrix([[0.9, 0.2, 0.4], [0.3, 0.8, 0.45]])
    rep = attribute(m, tau_margin=0.3, ground_truth={0: 0, 1: 1, 2: None})
    assert rep.accuracy == pytest.approx(1.0)
    assert rep.false_matches == 0
    assert rep.errors == ()
    wrong = attribute(m, tau_margin=0.3, ground_truth={0: 1, 1: 1, 2: None})
    assert wrong.accuracy == pytest.approx(2.0 / 3.0)
    assert wrong.false_matches == 1
    assert wrong.errors == ((0, 0, 1),)


def test_attribute_rejects_partial_ground_truth():
    with pytest.raises(InvalidInputError):
        attribute(_matrix([[0.9, 0.2]]), ground_truth={0: 0})


def test_fingerprint_serialization_schema(victim_fps):
    fps, rt = victim_fps
    obj = fingerprints_to_obj(fps, rt)
    assert obj["kind"] == "fingerprints"
    assert obj["expert_ids"] == list(rt.expert_ids)
    assert len(obj["experts"]) == len(fps)
    first = obj["experts"][0]
    for key in ("expert_slot", "rsf", "rpf_vec", "rpf_layered", "probe_ids",
                "samples_used", "checksum"):
        assert key in first
    # checksums are content-addressed and deterministic
    again = fingerprints_to_obj(fps, rt)
    assert first["checksum"] == again["experts"][0]["checksum"]
    assert first["checksum"] != obj["experts"][1]["checksum"]


def test_similarity_round_trip(victim_fps):
    fps, _ = victim_fps
    m = similarity_matrix(fps, fps)
    back = similarity_from_obj(similarity_to_obj(m))
    assert np.array_equal(back.values, m.values)
    assert back.victim_slots == m.victim_slots
    assert back.degenerate == m.degenerate


def test_similarity_csv_layout(victim_fps, tmp_path):
    fps, _ = victim_fps
    m = similarity_matrix(fps, fps[:2])
    path = tmp_path / "sim.csv"
    similarity_csv(m, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "victim_slot,suspect_0,suspect_1"
    assert len(lines) == len(fps) + 1
    cell = lines[1].split(",")[1]
    assert len(cell.split(".")[1]) == 6
    with pytest.raises(InvalidRequestError):
        similarity_csv(m, tmp_path / "x.csv", which="bogus")
