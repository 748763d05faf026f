"""End-to-end scenario runner: victim construction, tampering, attribution.

A scenario builds (or reuses) a victim mixture, applies one tamper
operation, fingerprints victim and suspect on a shared probe suite, scores
every requested method, and attributes suspect experts against ground truth.
Suites group scenarios the way the standard exhibits do and emit one
aggregate CSV each; the paper_exhibit column names which exhibit a row is
the desk-scale analogue of. Every number a suite writes is a deterministic
function of the config, so reruns are byte-identical; wall-clock timings
stay in memory and are never serialized.
"""

from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    BaselineScore,
    expert_scores_and_matrix,
    ics_model,
    pcs_model,
    reef,
)
from .bundleio import FORMAT_VERSION, checksum_u64, save_json, write_csv
from .errors import InvalidConfigError, InvalidInputError, InvalidRequestError
from .fingerprint import (
    AttributionReport,
    SimilarityMatrix,
    attribute,
    attribution_to_obj,
    capture_routing,
    fingerprint_moe,
    fingerprints_to_obj,
    similarity_csv,
    similarity_matrix,
    similarity_to_obj,
)
from .merging import MergedMoE, assemble_moe, train_routers
from .numerics import Rng
from .synthdata import DataConfig, make_task, probe_suite
from .tampering import (
    RouterTrainConfig,
    TamperRecord,
    add_experts,
    delete_experts,
    finetune_experts,
    permute_hidden,
    prune_magnitude,
    prune_wanda,
    replace_experts,
)
from .toymodel import Arch, finetune, init_pretrained, task_vector

TAMPER_OPS = (
    "none", "replace", "add", "delete",
    "finetune", "prune_magnitude", "prune_wanda", "permute",
)
METHODS = ("ours", "pcs_m", "pcs_e", "ics_m", "ics_e", "reef")
SUITE_IDS = (
    "effectiveness", "parametric", "structural",
    "sparsity", "samplesize", "routing-heatmap",
)


@dataclass(frozen=True)
class ScenarioConfig:
    global_seed: int = 8
    depth: int = 4
    width: int = 16
    hidden: int = 32
    n_classes: int = 4
    input_dim: int = 16
    n_experts: int = 5
    reserve_tasks: int = 3
    merge_lambda: float = 0.3
    router_temperature: float = 1.0
    tau_margin: float = 0.3
    tau_top1: float = 0.8
    samples_per_task: int = 256
    train_size: int = 512
    probe_size: int = 256
    noise_sigma: float = 0.3
    mean_scale: float = 1.5
    warmup_steps: int = 200
    warmup_lr: float = 0.05
    expert_steps: int = 1000
    expert_lr: float = 0.05
    router_steps: int = 500
    router_lr: float = 0.2
    batch_size: int = 32
    ft_short_steps: int = 200
    ft_long_steps: int = 400
    tamper_ft_lr: float = 0.04
    wanda_calib_per_task: int = 64
    tamper_op: str = "none"
    tamper_count: int = 1
    tamper_sparsity: float = 0.3
    tamper_steps: int = 200
    tamper_seed: int = 0
    methods: tuple[str, ...] = METHODS
    threads: int = 1

    @property
    def arch(self) -> Arch:
        return Arch(
            depth=self.depth, width=self.width, hidden=self.hidden,
            n_classes=self.n_classes, input_dim=self.input_dim,
        )

    @property
    def data_config(self) -> DataConfig:
        return DataConfig(
            n_classes=self.n_classes, input_dim=self.input_dim,
            train_size=self.train_size, probe_size=self.probe_size,
            noise_sigma=self.noise_sigma, mean_scale=self.mean_scale,
        )

    def validate(self) -> None:
        self.arch.validate()
        self.data_config.validate()
        if self.n_experts < 1:
            raise InvalidConfigError("need at least one expert")
        if self.reserve_tasks < 0:
            raise InvalidConfigError("reserve_tasks cannot be negative")
        if self.tamper_op not in TAMPER_OPS:
            raise InvalidConfigError(f"unknown tamper_op {self.tamper_op!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise InvalidConfigError(f"unknown methods {unknown}")
        if not self.methods:
            raise InvalidConfigError("methods cannot be empty")
        if not 0 < self.samples_per_task <= self.probe_size:
            raise InvalidConfigError(
                f"samples_per_task must lie in [1, {self.probe_size}]"
            )
        if not 0 < self.wanda_calib_per_task <= self.probe_size:
            raise InvalidConfigError(
                f"wanda_calib_per_task must lie in [1, {self.probe_size}]"
            )
        if self.tamper_op in ("replace", "add") and not 0 < self.tamper_count <= self.reserve_tasks:
            raise InvalidConfigError(
                f"{self.tamper_op} count {self.tamper_count} exceeds reserve_tasks {self.reserve_tasks}"
            )
        if self.tamper_op == "delete" and not 0 < self.tamper_count < self.n_experts:
            raise InvalidConfigError("delete must keep at least one expert")
        if self.tamper_op in ("prune_magnitude", "prune_wanda") and not 0.0 <= self.tamper_sparsity < 1.0:
            raise InvalidConfigError(f"sparsity must be in [0, 1), got {self.tamper_sparsity}")
        if self.threads < 1:
            raise InvalidConfigError("threads must be at least 1")
        if self.router_temperature <= 0.0:
            raise InvalidConfigError("router_temperature must be positive")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}


def config_to_obj(config: ScenarioConfig) -> dict:
    obj = dataclasses.asdict(config)
    obj["methods"] = list(config.methods)
    return obj


def config_from_obj(obj: dict) -> ScenarioConfig:
    kwargs = {}
    for key, value in obj.items():
        if key not in _FIELD_TYPES:
            raise InvalidConfigError(f"unknown config key {key!r}")
        if key == "methods":
            value = tuple(value)
        kwargs[key] = value
    config = ScenarioConfig(**kwargs)
    config.validate()
    return config


def _parse_scalar(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if key == "methods":
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; # comments; unknown keys are errors."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise InvalidConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                overrides[key] = _parse_scalar(key, raw)
            except ValueError as exc:
                raise InvalidConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return overrides


def load_config(path=None, **overrides) -> ScenarioConfig:
    merged = {}
    if path is not None:
        merged.update(parse_config_file(path))
    merged.update(overrides)
    config = dataclasses.replace(ScenarioConfig(), **merged)
    config.validate()
    return config


# Fields that shape the victim itself; scenarios differing only elsewhere
# (tamper settings, probe sizes, thresholds) can share one built victim.
_VICTIM_FIELDS = (
    "global_seed", "depth", "width", "hidden", "n_classes", "input_dim",
    "n_experts", "reserve_tasks", "merge_lambda", "router_temperature",
    "train_size", "probe_size", "noise_sigma", "mean_scale",
    "warmup_steps", "warmup_lr", "expert_steps", "expert_lr",
    "router_steps", "router_lr", "batch_size",
)


def victim_key(config: ScenarioConfig) -> tuple:
    return tuple(getattr(config, name) for name in _VICTIM_FIELDS)


@dataclass
class VictimArtifacts:
    config: ScenarioConfig
    task_specs: dict
    train: dict
    theta0: object
    expert_models: dict
    deltas: list
    moe: MergedMoE
    reserve_cache: dict = field(default_factory=dict)

    @property
    def victim_tasks(self) -> list[int]:
        return list(range(self.config.n_experts))


def build_victim(config: ScenarioConfig) -> VictimArtifacts:
    """Train the protected mixture end to end from the config's seed."""
    config.validate()
    rng = Rng(config.global_seed)
    n_tasks = config.n_experts + config.reserve_tasks
    task_specs, train = {}, {}
    for t in range(n_tasks):
        spec, train_ds, _ = make_task(t, config.global_seed, config.data_config)
        task_specs[t] = spec
        train[t] = train_ds
    victim_tasks = list(range(config.n_experts))
    victim_train = [train[t] for t in victim_tasks]
    theta0 = init_pretrained(
        config.arch, rng.child_seed("theta0"), victim_train,
        warmup_steps=config.warmup_steps, warmup_lr=config.warmup_lr,
        batch_size=config.batch_size,
    )
    expert_models, deltas = {}, []
    for t in victim_tasks:
        model = finetune(
            theta0, train[t], t, config.expert_steps, config.expert_lr,
            seed=rng.child_seed(f"expert-{t}"), batch_size=config.batch_size,
        )
        expert_models[t] = model
        deltas.append(task_vector(model, theta0, source_task=t))
    moe = assemble_moe(
        theta0, deltas, config.merge_lambda,
        router_seed=rng.child_seed("router"), tau=config.router_temperature,
    )
    moe = train_routers(
        moe, victim_train, config.router_steps, config.router_lr,
        rng.child_seed("router-train"), config.batch_size,
    )
    return VictimArtifacts(
        config=config,
        task_specs=task_specs,
        train=train,
        theta0=theta0,
        expert_models=expert_models,
        deltas=deltas,
        moe=moe,
    )


def reserve_delta(victim: VictimArtifacts, index: int):
    """Expert trained on the index-th reserve task, cached after first use."""
    cfg = victim.config
    if not 0 <= index < cfg.reserve_tasks:
        raise InvalidRequestError(f"reserve index {index} out of range")
    task = cfg.n_experts + index
    if task not in victim.reserve_cache:
        model = finetune(
            victim.theta0, victim.train[task], task,
            cfg.expert_steps, cfg.expert_lr,
            seed=Rng(cfg.global_seed).child_seed(f"expert-{task}"),
            batch_size=cfg.batch_size,
        )
        victim.reserve_cache[task] = (model, task_vector(model, victim.theta0, source_task=task))
    return victim.reserve_cache[task]


def victim_probe_suite(victim: VictimArtifacts, samples_per_task: int):
    specs = [victim.task_specs[t] for t in victim.victim_tasks]
    return probe_suite(specs, samples_per_task)


def probe_config_obj(config: ScenarioConfig) -> dict:
    """Everything needed to regenerate the victim's probe suite exactly."""
    return {
        "global_seed": config.global_seed,
        "samples_per_task": config.samples_per_task,
        "tasks": list(range(config.n_experts)),
        "data": dataclasses.asdict(config.data_config),
    }


def probe_suite_from_obj(obj: dict):
    """Rebuild the probe suite a bundle's probe_config describes."""
    try:
        data = DataConfig(**obj["data"])
        specs = [make_task(t, obj["global_seed"], data)[0] for t in obj["tasks"]]
        return probe_suite(specs, obj["samples_per_task"])
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed probe_config: {exc}") from exc


def apply_tamper(victim: VictimArtifacts, config: ScenarioConfig, scenario_id: str):
    """Dispatch one tamper operation; the scenario id salts its seeds."""
    cfg = config
    moe = victim.moe
    rng = Rng(cfg.global_seed)
    label = f"tamper:{scenario_id}:{cfg.tamper_seed}"
    router_cfg = RouterTrainConfig(
        steps=cfg.router_steps, lr=cfg.router_lr,
        seed=rng.child_seed(f"{label}:router"), batch_size=cfg.batch_size,
    )
    op = cfg.tamper_op
    if op == "none":
        return moe.copy(), TamperRecord(
            op="none", affected_experts=(), params={},
            ground_truth_map={i: i for i in range(moe.n_experts)},
        )
    # Structural ops retrain routers on the victim's whole task mixture (the
    # deployment inputs do not change when an expert is swapped out), so tasks
    # that lost their expert pull toward the uniform routing target.
    if op == "replace":
        replacements = {
            slot: reserve_delta(victim, slot)[1] for slot in range(cfg.tamper_count)
        }
        datasets = [victim.train[t] for t in moe.expert_ids] + [
            victim.train[replacements[s].source_task] for s in sorted(replacements)
        ]
        return replace_experts(moe, replacements, datasets, router_cfg)
    if op == "add":
        new_deltas = [reserve_delta(victim, k)[1] for k in range(cfg.tamper_count)]
        datasets = [victim.train[t] for t in moe.expert_ids] + [
            victim.train[d.source_task] for d in new_deltas
        ]
        return add_experts(moe, new_deltas, datasets, router_cfg)
    if op == "delete":
        keep = list(range(moe.n_experts - cfg.tamper_count))
        datasets = [victim.train[t] for t in moe.expert_ids]
        return delete_experts(moe, keep, datasets, router_cfg)
    if op == "finetune":
        datasets = [victim.train[t] for t in moe.expert_ids]
        return finetune_experts(
            moe, victim.theta0, victim.expert_models,
            {t: victim.train[t] for t in moe.expert_ids}, datasets,
            steps=cfg.tamper_steps, lr=cfg.tamper_ft_lr,
            seed=rng.child_seed(f"{label}:ft"), router_cfg=router_cfg,
        )
    if op == "prune_magnitude":
        return prune_magnitude(moe, cfg.tamper_sparsity)
    if op == "prune_wanda":
        calib = victim_probe_suite(victim, cfg.wanda_calib_per_task)
        return prune_wanda(moe, cfg.tamper_sparsity, calib)
    if op == "permute":
        return permute_hidden(moe, seed=rng.child_seed(f"{label}:perm"))
    raise InvalidConfigError(f"unknown tamper_op {op!r}")


@dataclass
class ScenarioReport:
    scenario_id: str
    config: ScenarioConfig
    record: TamperRecord
    probe_checksum: int
    victim_fp_obj: dict
    suspect_fp_obj: dict
    ours_matrix: SimilarityMatrix | None
    ours_attr: AttributionReport | None
    baseline_scores: list[BaselineScore]
    baseline_matrices: dict
    baseline_attrs: dict
    timings: dict = field(default_factory=dict)  # in-memory only, never serialized

    def to_obj(self) -> dict:
        record_obj = {
            "op": self.record.op,
            "affected_experts": list(self.record.affected_experts),
            "params": dict(self.record.params),
            "ground_truth_map": {str(k): v for k, v in self.record.ground_truth_map.items()},
        }
        obj = {
            "format_version": FORMAT_VERSION,
            "kind": "scenario_report",
            "scenario_id": self.scenario_id,
            "config": config_to_obj(self.config),
            "tamper": record_obj,
            "probe_checksum": self.probe_checksum,
            "victim_fingerprints": self.victim_fp_obj,
            "suspect_fingerprints": self.suspect_fp_obj,
            "baselines": {
                "scores": [_score_row_obj(s) for s in self.baseline_scores],
                "matrices": {m: similarity_to_obj(x) for m, x in sorted(self.baseline_matrices.items())},
                "attributions": {m: attribution_to_obj(x) for m, x in sorted(self.baseline_attrs.items())},
            },
        }
        if self.ours_matrix is not None:
            obj["ours"] = {
                "similarity": similarity_to_obj(self.ours_matrix),
                "attribution": attribution_to_obj(self.ours_attr),
            }
        return obj


def _expert_index(ref: str) -> str:
    return ref.split(":", 1)[1] if ref.startswith("expert:") else ""


def _score_row_obj(score: BaselineScore) -> dict:
    return {
        "method": score.method,
        "granularity": score.granularity,
        "victim_expert": _expert_index(score.victim_ref),
        "suspect_expert": _expert_index(score.suspect_ref),
        "value": score.value,
        "clamped_value": score.clamped_value,
        "flags": "|".join(score.flags),
    }


def run_scenario(
    config: ScenarioConfig,
    victim: VictimArtifacts | None = None,
    scenario_id: str | None = None,
) -> ScenarioReport:
    """Build or reuse the victim, tamper, fingerprint, score, attribute."""
    config.validate()
    sid = scenario_id if scenario_id is not None else config.tamper_op
    timings = {}
    t_start = time.perf_counter()
    if victim is None:
        victim = build_victim(config)
        timings["build_victim"] = time.perf_counter() - t_start
    elif victim_key(victim.config) != victim_key(config):
        raise InvalidRequestError("supplied victim was built from a different config")

    t0 = time.perf_counter()
    suspect, record = apply_tamper(victim, config, sid)
    timings["tamper"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    probe = victim_probe_suite(victim, config.samples_per_task)
    probe_checksum = checksum_u64([ds.inputs for ds in probe])
    victim_fps, victim_rt = fingerprint_moe(victim.moe, probe)
    suspect_fps, suspect_rt = fingerprint_moe(suspect, probe)
    victim_fp_obj = fingerprints_to_obj(victim_fps, victim_rt)
    suspect_fp_obj = fingerprints_to_obj(suspect_fps, suspect_rt)
    victim_fp_obj["probe_checksum"] = probe_checksum
    suspect_fp_obj["probe_checksum"] = probe_checksum
    timings["fingerprint"] = time.perf_counter() - t0

    gt = record.ground_truth_map
    ours_matrix = None
    ours_attr = None
    t0 = time.perf_counter()
    if "ours" in config.methods:
        ours_matrix = similarity_matrix(victim_fps, suspect_fps)
        ours_attr = attribute(
            ours_matrix, tau_margin=config.tau_margin,
            tau_top1=config.tau_top1, ground_truth=gt,
        )
    timings["attribute"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    baseline_scores: list[BaselineScore] = []
    baseline_matrices: dict = {}
    baseline_attrs: dict = {}
    for method in config.methods:
        if method == "ours":
            continue
        if method == "pcs_m":
            baseline_scores.append(pcs_model(victim.moe, suspect))
        elif method == "ics_m":
            baseline_scores.append(ics_model(victim.moe, suspect))
        elif method == "reef":
            baseline_scores.append(reef(victim.moe, suspect, probe))
        else:
            scores, matrix = expert_scores_and_matrix(victim.moe, suspect, method)
            baseline_scores.extend(scores)
            baseline_matrices[method] = matrix
            baseline_attrs[method] = attribute(
                matrix, tau_margin=config.tau_margin,
                tau_top1=config.tau_top1, ground_truth=gt,
            )
    timings["baselines"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start

    return ScenarioReport(
        scenario_id=sid,
        config=config,
        record=record,
        probe_checksum=probe_checksum,
        victim_fp_obj=victim_fp_obj,
        suspect_fp_obj=suspect_fp_obj,
        ours_matrix=ours_matrix,
        ours_attr=ours_attr,
        baseline_scores=baseline_scores,
        baseline_matrices=baseline_matrices,
        baseline_attrs=baseline_attrs,
        timings=timings,
    )


def matched_mean(matrix: SimilarityMatrix, ground_truth: dict) -> float | None:
    """Mean similarity over ground-truth (victim, suspect) pairs."""
    vals = []
    for j, s in enumerate(matrix.suspect_slots):
        v = ground_truth.get(s)
        if v is None:
            continue
        vals.append(float(matrix.values[matrix.victim_slots.index(v), j]))
    return float(np.mean(vals)) if vals else None


def margin_split(report: AttributionReport, ground_truth: dict):
    """Margins of ground-truth reused suspects vs ground-truth new suspects."""
    reused, new = [], []
    for s, margin in report.margins.items():
        if margin is None:
            continue
        (reused if ground_truth.get(s) is not None else new).append(margin)
    return reused, new


def _scenario_specs(suite_id: str, base: ScenarioConfig):
    """(scenario_id, config) pairs for one suite, in report order."""
    mk = lambda sid, **kw: (sid, dataclasses.replace(base, **kw))
    if suite_id == "effectiveness":
        return [
            mk("none", tamper_op="none"),
            mk("ft-short", tamper_op="finetune", tamper_steps=base.ft_short_steps),
            mk("wanda-30", tamper_op="prune_wanda", tamper_sparsity=0.3),
            mk("delete-1", tamper_op="delete", tamper_count=1),
            mk("add-2", tamper_op="add", tamper_count=2),
            mk("replace-1", tamper_op="replace", tamper_count=1),
        ]
    if suite_id == "parametric":
        return [
            mk("prune_magnitude-30", tamper_op="prune_magnitude", tamper_sparsity=0.3),
            mk("prune_wanda-30", tamper_op="prune_wanda", tamper_sparsity=0.3),
            mk("ft-short", tamper_op="finetune", tamper_steps=base.ft_short_steps),
            mk("ft-long", tamper_op="finetune", tamper_steps=base.ft_long_steps),
            mk("permute", tamper_op="permute"),
        ]
    if suite_id == "structural":
        out = []
        for op in ("replace", "delete", "add"):
            for count in (1, 2, 3):
                out.append(mk(f"{op}-{count}", tamper_op=op, tamper_count=count))
        return out
    if suite_id == "sparsity":
        return [
            mk(f"wanda-{pct}", tamper_op="prune_wanda", tamper_sparsity=pct / 100.0)
            for pct in (20, 30, 40, 50)
        ]
    if suite_id == "samplesize":
        return [
            mk(
                f"ft-short-s{n}", tamper_op="finetune",
                tamper_steps=base.ft_short_steps, samples_per_task=n,
            )
            for n in (16, 32, 64, 128, 256)
        ]
    raise InvalidRequestError(f"unknown suite id {suite_id!r}")


_EFFECTIVENESS_EXHIBITS = {
    "none": "fig3a", "ft-short": "fig3b", "wanda-30": "fig3c",
    "delete-1": "fig3d", "add-2": "fig3e", "replace-1": "fig3f",
}
_SUITE_EXHIBITS = {
    "parametric": "parametric-table", "structural": "fig5",
    "sparsity": "fig4", "samplesize": "fig6", "routing-heatmap": "fig2b",
}


def _headline(report: ScenarioReport, method: str):
    """One summary number per method: matched-pair mean, or the model score."""
    gt = report.record.ground_truth_map
    if method == "ours":
        return matched_mean(report.ours_matrix, gt) if report.ours_matrix is not None else None
    if method in report.baseline_matrices:
        return matched_mean(report.baseline_matrices[method], gt)
    for score in report.baseline_scores:
        if score.method == method and score.granularity == "model":
            return score.clamped_value
    return None


def _fmt_cell(value) -> object:
    return "" if value is None else float(value)


def aggregate_reports(suite_id: str, reports: list[ScenarioReport], report_objs: list[dict]):
    """Aggregate rows for one suite; refuses mixed report format versions."""
    versions = {obj.get("format_version") for obj in report_objs}
    if len(versions) > 1:
        raise InvalidInputError(f"cannot aggregate mixed report versions {sorted(versions)}")
    header = ["suite", "scenario", "paper_exhibit"]
    rows = []
    method_cols = list(reports[0].config.methods)
    if suite_id == "parametric":
        header += method_cols
        for rep in reports:
            rows.append(
                [suite_id, rep.scenario_id, _SUITE_EXHIBITS[suite_id]]
                + [_fmt_cell(_headline(rep, m)) for m in method_cols]
            )
        return header, rows
    header += ["op", "accuracy", "n_matched", "n_new", "min_reused_margin", "max_new_margin"]
    header += method_cols
    if suite_id == "sparsity":
        header.insert(3, "sparsity")
    if suite_id == "samplesize":
        header.insert(3, "samples_per_task")
    if suite_id == "structural":
        header.insert(3, "count")
    for rep in reports:
        gt = rep.record.ground_truth_map
        n_matched = sum(1 for v in gt.values() if v is not None)
        n_new = sum(1 for v in gt.values() if v is None)
        reused, new = ([], [])
        accuracy = None
        if rep.ours_attr is not None:
            reused, new = margin_split(rep.ours_attr, gt)
            accuracy = rep.ours_attr.accuracy
        row = [
            suite_id, rep.scenario_id,
            _EFFECTIVENESS_EXHIBITS.get(rep.scenario_id, _SUITE_EXHIBITS.get(suite_id, "")),
            rep.record.op,
            _fmt_cell(accuracy), n_matched, n_new,
            _fmt_cell(min(reused) if reused else None),
            _fmt_cell(max(new) if new else None),
        ]
        if suite_id == "sparsity":
            row.insert(3, float(rep.config.tamper_sparsity))
        if suite_id == "samplesize":
            row.insert(3, rep.config.samples_per_task)
        if suite_id == "structural":
            row.insert(3, rep.config.tamper_count)
        row += [_fmt_cell(_headline(rep, m)) for m in method_cols]
        rows.append(row)
    return header, rows


def _write_scenario(out_dir: str, rep: ScenarioReport, fmt: str) -> None:
    sdir = os.path.join(out_dir, rep.scenario_id)
    os.makedirs(sdir, exist_ok=True)
    if fmt in ("json", "both"):
        save_json(rep.to_obj(), os.path.join(sdir, "report.json"))
    if fmt in ("csv", "both"):
        if rep.ours_matrix is not None:
            similarity_csv(rep.ours_matrix, os.path.join(sdir, "similarity.csv"))
        rows = [
            (
                s.method, s.granularity,
                _expert_index(s.victim_ref), _expert_index(s.suspect_ref),
                s.value, s.clamped_value, "|".join(s.flags),
            )
            for s in rep.baseline_scores
        ]
        write_csv(
            os.path.join(sdir, "baselines.csv"),
            ["method", "granularity", "victim_expert", "suspect_expert", "value", "clamped_value", "flags"],
            rows,
        )


def _reserves_needed(suite_id: str, specs) -> int:
    needed = 0
    for _, cfg in specs:
        if cfg.tamper_op in ("replace", "add"):
            needed = max(needed, cfg.tamper_count)
    return needed


def run_suite(
    suite_id: str,
    base_config: ScenarioConfig,
    out_dir: str,
    fmt: str = "both",
    threads: int | None = None,
    log=None,
):
    """Run one suite, write per-scenario reports plus the aggregate CSV."""
    if suite_id not in SUITE_IDS:
        raise InvalidRequestError(f"unknown suite id {suite_id!r}; choose from {SUITE_IDS}")
    if fmt not in ("json", "csv", "both"):
        raise InvalidRequestError(f"unknown format {fmt!r}")
    base_config.validate()
    threads = base_config.threads if threads is None else threads
    log = log or (lambda msg: None)
    suite_dir = os.path.join(out_dir, suite_id)
    os.makedirs(suite_dir, exist_ok=True)

    t0 = time.perf_counter()
    victim = build_victim(base_config)
    log(f"victim built in {time.perf_counter() - t0:.1f}s")

    if suite_id == "routing-heatmap":
        return _run_heatmap_suite(victim, base_config, suite_dir, fmt, log)

    specs = _scenario_specs(suite_id, base_config)
    for k in range(_reserves_needed(suite_id, specs)):
        reserve_delta(victim, k)  # warm the cache before any thread pool

    def one(spec):
        sid, cfg = spec
        rep = run_scenario(cfg, victim=victim, scenario_id=sid)
        log(f"{suite_id}/{sid} done in {rep.timings['total']:.1f}s")
        return rep

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(one, specs))
    else:
        reports = [one(spec) for spec in specs]

    report_objs = [rep.to_obj() for rep in reports]
    for rep in reports:
        _write_scenario(suite_dir, rep, fmt)
    header, rows = aggregate_reports(suite_id, reports, report_objs)
    write_csv(os.path.join(suite_dir, "aggregate.csv"), header, rows)
    return reports


def _run_heatmap_suite(victim, config, suite_dir, fmt, log):
    probe = victim_probe_suite(victim, config.samples_per_task)
    rt = capture_routing(victim.moe, probe)
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "routing_heatmap",
        "probe_checksum": checksum_u64([ds.inputs for ds in probe]),
        "probe_ids": list(rt.probe_ids),
        "expert_ids": list(rt.expert_ids),
        "samples_used": rt.samples_used,
        "values": rt.values.tolist(),
    }
    if fmt in ("json", "both"):
        save_json(obj, os.path.join(suite_dir, "report.json"))
    rows = []
    n_tasks, n_experts, depth = rt.values.shape
    for i in range(n_tasks):
        for j in range(n_experts):
            for l in range(depth):
                rows.append([
                    "routing-heatmap", "heatmap", _SUITE_EXHIBITS["routing-heatmap"],
                    rt.probe_ids[i], j, l, float(rt.values[i, j, l]),
                ])
    write_csv(
        os.path.join(suite_dir, "aggregate.csv"),
        ["suite", "scenario", "paper_exhibit", "probe_task", "expert_slot", "layer", "mean_routing"],
        rows,
    )
    log("routing-heatmap exported")
    return obj
