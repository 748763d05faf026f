"""Compare the compiled and pure-numpy kernel backends.

Times the three hot kernels (backbone forward, backbone backward, mixture
forward) on a victim-sized workload and prints per-call latency for each
backend plus the speedup. Run from the repo root:

    python3 benchmarks/bench_backends.py [--batch 256] [--repeats 200]

The compiled backend is JIT-warmed before timing, so the numbers reflect
steady-state cost, not compilation.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from routefp import kernels
from routefp.harness import ScenarioConfig, build_victim
from routefp.merging import moe_forward
from routefp.toymodel import forward, loss_and_grads


def _time(fn, repeats: int) -> float:
    fn()  # untimed call to settle caches
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    cfg = ScenarioConfig(global_seed=args.seed)
    print(f"building victim (seed {cfg.global_seed}) ...")
    victim = build_victim(cfg)
    model = victim.expert_models[0]
    moe = victim.moe
    X = victim.train[0].inputs[: args.batch]
    y = victim.train[0].labels[: args.batch]

    workloads = {
        "toy_forward": lambda: forward(model, X, task=0),
        "toy_backward": lambda: loss_and_grads(model, X, y, task=0),
        "moe_forward": lambda: moe_forward(moe, X, task=0),
    }

    backends = [b for b in ("numpy", "numba") if b in kernels.available_backends()]
    results: dict[str, dict[str, float]] = {name: {} for name in workloads}
    for backend in backends:
        kernels.set_backend(backend)
        kernels.warmup()
        for name, fn in workloads.items():
            results[name][backend] = _time(fn, args.repeats)
    header = f"{'kernel':<14}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print()
    print(f"batch {args.batch}, {args.repeats} repeats per timing")
    print(header)
    print("-" * len(header))
    for name, per_backend in results.items():
        row = f"{name:<14}" + "".join(
            f"{per_backend[b] * 1e3:>16.3f}" for b in backends
        )
        if len(backends) == 2:
            a, b = (per_backend[x] for x in backends)
            row += f"{a / b:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
