"""Command-line front end.

Subcommands form a pipeline over shared artifacts: gen-data writes the
synthetic task corpora, build-victim trains and saves the protected
mixture, tamper derives a suspect bundle plus its ground-truth record,
fingerprint/compare/attribute run the attribution chain on bundles and
reports, and suite reproduces the standard experiment grids. Exit codes:
0 success, 2 invalid config or input, 3 training divergence, 4 I/O
failure. Everything written to disk is a deterministic function of the
config; progress and timing lines go to stderr only.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bundleio import (
    FORMAT_VERSION,
    checksum_u64,
    load_json,
    load_moe,
    save_json,
    save_model,
    save_moe,
    write_csv,
)
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidRequestError,
    TrainingDivergedError,
)
from .fingerprint import (
    attribute,
    attribution_to_obj,
    fingerprint_moe,
    fingerprints_to_obj,
    similarity_csv,
    similarity_from_obj,
    similarity_matrix,
    similarity_to_obj,
)
from .harness import (
    SUITE_IDS,
    ScenarioConfig,
    apply_tamper,
    build_victim,
    config_to_obj,
    load_config,
    probe_config_obj,
    probe_suite_from_obj,
    run_suite,
    victim_probe_suite,
)
from .merging import moe_forward
from .synthdata import dump_csv, make_task


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve_config(args) -> ScenarioConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["global_seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return load_config(getattr(args, "config", None), **overrides)


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset_manifest",
        "global_seed": cfg.global_seed,
        "data": config_to_obj(cfg),
        "tasks": [],
    }
    n_tasks = cfg.n_experts + cfg.reserve_tasks
    for t in range(n_tasks):
        _, train, probe = make_task(t, cfg.global_seed, cfg.data_config)
        if args.format in ("csv", "both"):
            dump_csv([train, probe], os.path.join(out, f"task-{t}.csv"))
        manifest["tasks"].append({
            "task_id": t,
            "train_size": int(train.inputs.shape[0]),
            "probe_size": int(probe.inputs.shape[0]),
            "train_checksum": checksum_u64([train.inputs, train.labels.astype(np.float64)]),
            "probe_checksum": checksum_u64([probe.inputs, probe.labels.astype(np.float64)]),
        })
    if args.format in ("json", "both"):
        save_json(manifest, os.path.join(out, "manifest.json"))
    print(f"wrote {n_tasks} tasks to {out}")
    return 0


def _probe_accuracy(moe, probe) -> dict:
    accs = {}
    for ds in probe:
        logits = moe_forward(moe, ds.inputs, task=ds.task_id).logits
        accs[str(ds.task_id)] = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return accs


def _cmd_build_victim(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    victim = build_victim(cfg)
    probe = victim_probe_suite(victim, cfg.samples_per_task)
    pc = probe_config_obj(cfg)
    save_moe(victim.moe, os.path.join(out, "victim.bundle"), probe_config=pc)
    save_model(victim.theta0, os.path.join(out, "theta0.bundle"))
    summary = {
        "format_version": FORMAT_VERSION,
        "kind": "victim_summary",
        "config": config_to_obj(cfg),
        "expert_ids": list(victim.moe.expert_ids),
        "probe_checksum": checksum_u64([ds.inputs for ds in probe]),
        "probe_accuracy": _probe_accuracy(victim.moe, probe),
    }
    save_json(summary, os.path.join(out, "victim_summary.json"))
    accs = ", ".join(f"task {k}: {v:.3f}" for k, v in summary["probe_accuracy"].items())
    print(f"victim with experts {summary['expert_ids']} saved to {out} ({accs})")
    return 0


def _cmd_tamper(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    victim = build_victim(cfg)
    suspect, record = apply_tamper(victim, cfg, cfg.tamper_op)
    pc = probe_config_obj(cfg)
    save_moe(victim.moe, os.path.join(out, "victim.bundle"), probe_config=pc)
    save_moe(suspect, os.path.join(out, "suspect.bundle"), probe_config=pc)
    save_json(
        {
            "format_version": FORMAT_VERSION,
            "kind": "tamper_record",
            "op": record.op,
            "affected_experts": list(record.affected_experts),
            "params": dict(record.params),
            "ground_truth_map": {str(k): v for k, v in record.ground_truth_map.items()},
            "victim_expert_ids": list(victim.moe.expert_ids),
            "suspect_expert_ids": list(suspect.expert_ids),
        },
        os.path.join(out, "tamper.json"),
    )
    print(
        f"{record.op} applied (affected experts {list(record.affected_experts)}); "
        f"bundles and tamper.json written to {out}"
    )
    return 0


def _load_probe_for(args, pc, source: str):
    if pc is None:
        _log(f"{source} carries no probe_config; regenerating probes from config")
        pc = probe_config_obj(_resolve_config(args))
    return probe_suite_from_obj(pc), pc


def _cmd_fingerprint(args) -> int:
    out = _out_dir(args)
    if args.bundle is not None:
        moe, pc = load_moe(args.bundle)
        probe, _ = _load_probe_for(args, pc, args.bundle)
    else:
        cfg = _resolve_config(args)
        victim = build_victim(cfg)
        moe = victim.moe
        probe = victim_probe_suite(victim, cfg.samples_per_task)
    fps, rt = fingerprint_moe(moe, probe)
    obj = fingerprints_to_obj(fps, rt)
    obj["probe_checksum"] = checksum_u64([ds.inputs for ds in probe])
    if args.format in ("json", "both"):
        save_json(obj, os.path.join(out, "fingerprints.json"))
    if args.format in ("csv", "both"):
        rows = []
        for fp in fps:
            for i, task in enumerate(rt.probe_ids):
                for l in range(fp.rsf.shape[1]):
                    rows.append([
                        fp.expert_slot, task, l,
                        float(fp.rsf[i, l]), float(fp.rpf_layered[i, l]),
                    ])
        write_csv(
            os.path.join(out, "fingerprints.csv"),
            ["expert_slot", "probe_task", "layer", "rsf", "rpf_layered"],
            rows,
        )
    print(f"fingerprinted {len(fps)} experts; reports written to {out}")
    return 0


def _cmd_compare(args) -> int:
    out = _out_dir(args)
    moe_v, pc_v = load_moe(args.victim)
    moe_s, pc_s = load_moe(args.suspect)
    probe, _ = _load_probe_for(args, pc_v if pc_v is not None else pc_s, args.victim)
    probe_checksum = checksum_u64([ds.inputs for ds in probe])
    fps_v, rt_v = fingerprint_moe(moe_v, probe)
    fps_s, rt_s = fingerprint_moe(moe_s, probe)
    matrix = similarity_matrix(fps_v, fps_s)
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "comparison",
        "probe_checksum": probe_checksum,
        "victim_fingerprints": fingerprints_to_obj(fps_v, rt_v),
        "suspect_fingerprints": fingerprints_to_obj(fps_s, rt_s),
        "similarity": similarity_to_obj(matrix),
    }
    obj["victim_fingerprints"]["probe_checksum"] = probe_checksum
    obj["suspect_fingerprints"]["probe_checksum"] = probe_checksum
    if args.format in ("json", "both"):
        save_json(obj, os.path.join(out, "report.json"))
    if args.format in ("csv", "both"):
        similarity_csv(matrix, os.path.join(out, "similarity.csv"))
    diag = [
        float(matrix.values[i, j])
        for i in range(len(matrix.victim_slots))
        for j in range(len(matrix.suspect_slots))
        if matrix.victim_slots[i] == matrix.suspect_slots[j]
    ]
    if diag:
        print(f"compared: diagonal mean {np.mean(diag):.6f}, min {np.min(diag):.6f}")
    else:
        print("compared: no shared expert slots")
    return 0


def _report_matrix_and_gt(args, obj):
    kind = obj.get("kind")
    if kind == "scenario_report":
        ours = obj.get("ours")
        if ours is None:
            raise InvalidInputError("scenario report has no similarity section to attribute")
        matrix = similarity_from_obj(ours["similarity"])
        gt = {int(k): v for k, v in obj["tamper"]["ground_truth_map"].items()}
        tau_margin = obj["config"]["tau_margin"]
        tau_top1 = obj["config"]["tau_top1"]
    elif kind == "comparison":
        matrix = similarity_from_obj(obj["similarity"])
        gt = None
        tau_margin = ScenarioConfig.tau_margin
        tau_top1 = ScenarioConfig.tau_top1
    else:
        raise InvalidInputError(f"cannot attribute report of kind {kind!r}")
    if args.tamper is not None:
        record = load_json(args.tamper)
        if record.get("kind") != "tamper_record":
            raise InvalidInputError(f"{args.tamper} is not a tamper record")
        gt = {int(k): v for k, v in record["ground_truth_map"].items()}
    if args.tau_margin is not None:
        tau_margin = args.tau_margin
    if args.tau_top1 is not None:
        tau_top1 = args.tau_top1
    return matrix, gt, tau_margin, tau_top1


def _cmd_attribute(args) -> int:
    out = _out_dir(args)
    obj = load_json(args.report)
    matrix, gt, tau_margin, tau_top1 = _report_matrix_and_gt(args, obj)
    report = attribute(matrix, tau_margin=tau_margin, tau_top1=tau_top1, ground_truth=gt)
    result = attribution_to_obj(report)
    result["format_version"] = FORMAT_VERSION
    result["kind"] = "attribution"
    save_json(result, os.path.join(out, "attribution.json"))
    n_matched = sum(1 for v in report.decisions.values() if v is not None)
    n_new = sum(1 for v in report.decisions.values() if v is None)
    line = f"matched={n_matched} new={n_new} rule={report.rule}"
    if report.accuracy is not None:
        line += f" accuracy={report.accuracy:.3f}"
    print(line)
    return 0


def _cmd_suite(args) -> int:
    cfg = _resolve_config(args)
    out = args.out or "."
    run_suite(
        args.suite_id, cfg, out,
        fmt=args.format, threads=cfg.threads, log=_log,
    )
    print(f"suite {args.suite_id} written to {os.path.join(out, args.suite_id)}")
    return 0


def _add_common(sub) -> None:
    sub.add_argument("--config", help="config file of key = value lines")
    sub.add_argument("--seed", type=int, help="override global_seed")
    sub.add_argument("--out", help="output directory (default: current)")
    sub.add_argument(
        "--format", choices=("json", "csv", "both"), default="both",
        help="which report formats to write",
    )
    sub.add_argument("--threads", type=int, help="worker threads for suite scenarios")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routefp",
        description="Routing-fingerprint attribution for merged mixture-of-experts models.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate the synthetic task corpora")
    _add_common(p)
    p.set_defaults(handler=_cmd_gen_data)

    p = subs.add_parser("build-victim", help="train and save the protected mixture")
    _add_common(p)
    p.set_defaults(handler=_cmd_build_victim)

    p = subs.add_parser("tamper", help="derive a tampered suspect bundle")
    _add_common(p)
    p.set_defaults(handler=_cmd_tamper)

    p = subs.add_parser("fingerprint", help="capture routing fingerprints for a bundle")
    _add_common(p)
    p.add_argument("--bundle", help="mixture bundle to fingerprint (default: rebuild victim)")
    p.set_defaults(handler=_cmd_fingerprint)

    p = subs.add_parser("compare", help="similarity matrix between two bundles")
    _add_common(p)
    p.add_argument("--victim", required=True, help="victim mixture bundle")
    p.add_argument("--suspect", required=True, help="suspect mixture bundle")
    p.set_defaults(handler=_cmd_compare)

    p = subs.add_parser("attribute", help="attribution verdicts from a report")
    _add_common(p)
    p.add_argument("--report", required=True, help="scenario or comparison report.json")
    p.add_argument("--tamper", help="tamper.json supplying ground truth")
    p.add_argument("--tau-margin", type=float, dest="tau_margin")
    p.add_argument("--tau-top1", type=float, dest="tau_top1")
    p.set_defaults(handler=_cmd_attribute)

    p = subs.add_parser("suite", help="run one standard experiment suite")
    p.add_argument("suite_id", choices=SUITE_IDS)
    _add_common(p)
    p.set_defaults(handler=_cmd_suite)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (InvalidConfigError, InvalidInputError, InvalidRequestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
