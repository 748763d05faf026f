import dataclasses
import json

import numpy as np
import pytest

from routefp.cli import main
from routefp.errors import InvalidConfigError, InvalidInputError, InvalidRequestError
from routefp.fingerprint import AttributionReport, SimilarityMatrix
from routefp.harness import (
    ScenarioConfig,
    config_from_obj,
    config_to_obj,
    load_config,
    margin_split,
    matched_mean,
    parse_config_file,
    probe_config_obj,
    probe_suite_from_obj,
    reserve_delta,
    run_scenario,
    run_suite,
    victim_probe_suite,
)


def test_load_config_defaults_and_overrides():
    assert load_config() == ScenarioConfig()
    assert load_config(None, global_seed=3).global_seed == 3
    assert load_config(None, methods=("ours",)).methods == ("ours",)


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment line\n"
        "global_seed = 3\n"
        "tamper_sparsity = 0.4  # trailing comment\n"
        "methods = ours, pcs_e\n"
        "\n"
    )
    overrides = parse_config_file(path)
    assert overrides == {
        "global_seed": 3,
        "tamper_sparsity": 0.4,
        "methods": ("ours", "pcs_e"),
    }
    cfg = load_config(path)
    assert cfg.global_seed == 3
    assert cfg.methods == ("ours", "pcs_e")


@pytest.mark.parametrize("line", [
    "routing_secret = 1",  # unknown key
    "global_seed",  # no assignment
    "global_seed = seven",  # unparseable int
])
def test_parse_config_file_fail_closed(tmp_path, line):
    path = tmp_path / "bad.cfg"
    path.write_text(line + "\n")
    with pytest.raises(InvalidConfigError):
        parse_config_file(path)


def test_config_obj_round_trip(default_config):
    assert config_from_obj(config_to_obj(default_config)) == default_config
    with pytest.raises(InvalidConfigError):
        config_from_obj({"global_seed": 1, "mystery": 2})


@pytest.mark.parametrize("overrides", [
    {"tamper_op": "explode"},
    {"methods": ("magic",)},
    {"methods": ()},
    {"samples_per_task": 0},
    {"samples_per_task": 257},
    {"tamper_op": "replace", "tamper_count": 5},
    {"tamper_op": "delete", "tamper_count": 5},
    {"threads": 0},
    {"router_temperature": 0.0},
    {"n_experts": 0},
])
def test_config_validation_fail_closed(overrides):
    cfg = dataclasses.replace(ScenarioConfig(), **overrides)
    with pytest.raises(InvalidConfigError):
        cfg.validate()


def test_run_scenario_none_is_perfect_self_match(victim, default_config):
    rep = run_scenario(default_config, victim=victim, scenario_id="none")
    assert rep.record.op == "none"
    assert rep.ours_attr.accuracy == 1.0
    assert rep.ours_attr.decisions == {i: i for i in range(victim.moe.n_experts)}
    assert set(rep.baseline_matrices) == {"pcs_e", "ics_e"}
    model_methods = {s.method for s in rep.baseline_scores if s.granularity == "model"}
    assert model_methods == {"pcs_m", "ics_m", "reef"}
    obj = rep.to_obj()
    assert obj["kind"] == "scenario_report"
    assert "ours" in obj
    # wall-clock timings never reach the serialized report
    assert "timings" not in json.dumps(obj)


def test_run_scenario_guards_the_supplied_victim(victim, default_config):
    other = dataclasses.replace(default_config, global_seed=default_config.global_seed + 1)
    with pytest.raises(InvalidRequestError):
        run_scenario(other, victim=victim)
    # tamper-side settings are free to differ
    permuted_cfg = dataclasses.replace(default_config, tamper_op="permute")
    rep = run_scenario(permuted_cfg, victim=victim)
    assert rep.record.op == "permute"
    assert rep.ours_attr.accuracy == 1.0


def test_scenario_id_salts_tamper_seeds(small_victim, small_config):
    cfg = dataclasses.replace(
        small_config, tamper_op="finetune", tamper_steps=small_config.ft_short_steps
    )
    rep_a = run_scenario(cfg, victim=small_victim, scenario_id="salt-a")
    rep_a2 = run_scenario(cfg, victim=small_victim, scenario_id="salt-a")
    rep_b = run_scenario(cfg, victim=small_victim, scenario_id="salt-b")
    assert json.dumps(rep_a.to_obj()) == json.dumps(rep_a2.to_obj())
    assert rep_a.suspect_fp_obj != rep_b.suspect_fp_obj


def test_reserve_delta_cached_and_bounded(small_victim):
    first = reserve_delta(small_victim, 0)
    assert reserve_delta(small_victim, 0) is first
    with pytest.raises(InvalidRequestError):
        reserve_delta(small_victim, small_victim.config.reserve_tasks)


def test_probe_config_round_trip(victim, default_config, probes):
    rebuilt = probe_suite_from_obj(probe_config_obj(default_config))
    assert len(rebuilt) == len(probes)
    for a, b in zip(rebuilt, probes):
        assert a.task_id == b.task_id
        assert np.array_equal(a.inputs, b.inputs)
    with pytest.raises(InvalidInputError):
        probe_suite_from_obj({"tasks": [0]})


def _matrix(values):
    values = np.asarray(values, dtype=np.float64)
    return SimilarityMatrix(
        values=values,
        rsf_values=values,
        rpf_values=values,
        victim_slots=tuple(range(values.shape[0])),
        suspect_slots=tuple(range(values.shape[1])),
        degenerate=(),
    )


def test_matched_mean():
    m = _matrix([[1.0, 0.2], [0.2, 0.8]])
    assert matched_mean(m, {0: 0, 1: 1}) == pytest.approx(0.9)
    assert matched_mean(m, {0: 0, 1: None}) == pytest.approx(1.0)
    assert matched_mean(m, {0: None, 1: None}) is None


def test_margin_split():
    report = AttributionReport(
        decisions={0: 0, 1: None, 2: None},
        top1={0: 0.9, 1: 0.4, 2: 0.5},
        margins={0: 0.5, 1: 0.1, 2: None},
        rule={0: "margin", 1: "margin", 2: "top1"},
        tau_margin=0.3,
        tau_top1=0.8,
    )
    reused, new = margin_split(report, {0: 0, 1: None, 2: 0})
    assert reused == [0.5]
    assert new == [0.1]


def test_run_suite_sparsity_layout_and_determinism(tmp_path, small_config):
    reports = run_suite("sparsity", small_config, str(tmp_path / "a"))
    assert [r.scenario_id for r in reports] == [
        "wanda-20", "wanda-30", "wanda-40", "wanda-50"
    ]
    suite_dir = tmp_path / "a" / "sparsity"
    agg = (suite_dir / "aggregate.csv").read_text().splitlines()
    assert agg[0] == (
        "suite,scenario,paper_exhibit,sparsity,op,accuracy,n_matched,n_new,"
        "min_reused_margin,max_new_margin,ours,pcs_m,pcs_e,ics_m,ics_e,reef"
    )
    assert len(agg) == 5
    first = agg[1].split(",")
    assert first[:5] == ["sparsity", "wanda-20", "fig4", "0.200000", "prune_wanda"]
    for sid in ("wanda-20", "wanda-50"):
        for name in ("report.json", "similarity.csv", "baselines.csv"):
            assert (suite_dir / sid / name).is_file()
    # a rerun reproduces every byte
    run_suite("sparsity", small_config, str(tmp_path / "b"))
    other = tmp_path / "b" / "sparsity"
    assert (other / "aggregate.csv").read_bytes() == (suite_dir / "aggregate.csv").read_bytes()
    assert (
        (other / "wanda-30" / "report.json").read_bytes()
        == (suite_dir / "wanda-30" / "report.json").read_bytes()
    )


def test_run_suite_fail_closed(tmp_path, small_config):
    with pytest.raises(InvalidRequestError):
        run_suite("mystery", small_config, str(tmp_path))
    with pytest.raises(InvalidRequestError):
        run_suite("sparsity", small_config, str(tmp_path), fmt="yaml")


def test_run_suite_routing_heatmap(tmp_path, small_config):
    obj = run_suite("routing-heatmap", small_config, str(tmp_path))
    assert obj["kind"] == "routing_heatmap"
    values = np.asarray(obj["values"])
    n = small_config.n_experts
    assert values.shape == (n, n, small_config.depth)
    assert np.allclose(values.sum(axis=1), 1.0, atol=1e-12)
    suite_dir = tmp_path / "routing-heatmap"
    agg = (suite_dir / "aggregate.csv").read_text().splitlines()
    assert agg[0] == "suite,scenario,paper_exhibit,probe_task,expert_slot,layer,mean_routing"
    assert len(agg) == 1 + n * n * small_config.depth
    assert (suite_dir / "report.json").is_file()


def _write_cfg(path, **overrides):
    lines = [f"{k} = {v}" for k, v in overrides.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


_SMALL = dict(
    n_experts=3, reserve_tasks=2, expert_steps=300,
    warmup_steps=60, router_steps=150, samples_per_task=64,
)


def test_cli_pipeline_round_trip(tmp_path):
    cfg = _write_cfg(tmp_path / "small.cfg", **_SMALL)
    tamper_cfg = _write_cfg(tmp_path / "tamper.cfg", tamper_op="permute", **_SMALL)

    data_dir = tmp_path / "data"
    assert main(["gen-data", "--config", cfg, "--out", str(data_dir)]) == 0
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["kind"] == "dataset_manifest"
    assert len(manifest["tasks"]) == 5
    assert (data_dir / "task-0.csv").is_file()

    victim_dir = tmp_path / "victim"
    assert main(["build-victim", "--config", cfg, "--out", str(victim_dir)]) == 0
    summary = json.loads((victim_dir / "victim_summary.json").read_text())
    assert summary["kind"] == "victim_summary"
    assert summary["expert_ids"] == [0, 1, 2]
    assert (victim_dir / "victim.bundle").is_file()
    assert (victim_dir / "theta0.bundle").is_file()

    tamper_dir = tmp_path / "tampered"
    assert main(["tamper", "--config", tamper_cfg, "--out", str(tamper_dir)]) == 0
    record = json.loads((tamper_dir / "tamper.json").read_text())
    assert record["kind"] == "tamper_record"
    assert record["op"] == "permute"

    fp_dir = tmp_path / "fps"
    assert main([
        "fingerprint", "--bundle", str(victim_dir / "victim.bundle"),
        "--out", str(fp_dir),
    ]) == 0
    fps = json.loads((fp_dir / "fingerprints.json").read_text())
    assert fps["kind"] == "fingerprints"
    assert len(fps["experts"]) == 3
    header = (fp_dir / "fingerprints.csv").read_text().splitlines()[0]
    assert header == "expert_slot,probe_task,layer,rsf,rpf_layered"

    cmp_dir = tmp_path / "cmp"
    assert main([
        "compare",
        "--victim", str(victim_dir / "victim.bundle"),
        "--suspect", str(tamper_dir / "suspect.bundle"),
        "--out", str(cmp_dir),
    ]) == 0
    report = json.loads((cmp_dir / "report.json").read_text())
    assert report["kind"] == "comparison"
    assert (cmp_dir / "similarity.csv").is_file()

    attr_dir = tmp_path / "attr"
    assert main([
        "attribute",
        "--report", str(cmp_dir / "report.json"),
        "--tamper", str(tamper_dir / "tamper.json"),
        "--out", str(attr_dir),
    ]) == 0
    verdicts = json.loads((attr_dir / "attribution.json").read_text())
    assert verdicts["kind"] == "attribution"
    # permutation preserves the function, so every expert is recovered
    assert verdicts["accuracy"] == 1.0
    assert verdicts["decisions"] == {"0": 0, "1": 1, "2": 2}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence makes nans before the check fires
def test_cli_exit_codes(tmp_path):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("mystery_knob = 1\n")
    assert main(["build-victim", "--config", str(bad_cfg)]) == 2

    diverge_cfg = _write_cfg(
        tmp_path / "diverge.cfg",
        n_experts=1, reserve_tasks=0, warmup_steps=0,
        expert_steps=50, expert_lr=50.0, router_steps=0,
    )
    assert main([
        "build-victim", "--config", diverge_cfg, "--out", str(tmp_path / "d"),
    ]) == 3

    assert main([
        "fingerprint", "--bundle", str(tmp_path / "missing.bundle"),
    ]) == 4

    # a model bundle is not a mixture bundle
    cfg = _write_cfg(tmp_path / "small.cfg", **_SMALL)
    victim_dir = tmp_path / "victim"
    assert main(["build-victim", "--config", cfg, "--out", str(victim_dir)]) == 0
    assert main([
        "fingerprint", "--bundle", str(victim_dir / "theta0.bundle"),
    ]) == 2
