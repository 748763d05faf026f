"""Deterministic synthetic multi-task classification datasets.

Each task is a set of Gaussian clusters around a regular class simplex,
rotated per task and shifted by a task offset. Offsets are columns of one
shared orthogonal frame, so every pair of tasks sits equally far apart:
experts can specialize, routers can discriminate, and no two tasks collide
by accident of the seed. Regeneration from the same (task_id, global_seed,
config) is bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidRequestError
from .numerics import Rng


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 4
    input_dim: int = 16
    train_size: int = 512
    probe_size: int = 256
    noise_sigma: float = 0.3
    mean_scale: float = 1.5

    def validate(self) -> None:
        if self.input_dim < self.n_classes:
            raise InvalidConfigError(
                f"input_dim {self.input_dim} < n_classes {self.n_classes}"
            )
        if self.n_classes < 2 or self.train_size < self.n_classes or self.probe_size < self.n_classes:
            raise InvalidConfigError("degenerate dataset sizes")
        if self.noise_sigma <= 0.0:
            raise InvalidConfigError("noise_sigma must be positive")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_classes: int
    input_dim: int
    seed: int
    class_means: np.ndarray  # (n_classes, input_dim), centered on the origin
    rotation: np.ndarray  # orthogonal (input_dim, input_dim)
    offset: np.ndarray  # (input_dim,) task center, shared orthogonal frame
    noise_sigma: float
    train_size: int
    probe_size: int


@dataclass(frozen=True)
class Dataset:
    task_id: int
    inputs: np.ndarray  # (n, input_dim)
    labels: np.ndarray  # (n,) int64
    split: str  # "train" | "probe"


def _orthogonalize(m: np.ndarray) -> np.ndarray:
    # QR with sign fixing so the rotation is a deterministic function of m
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def _class_simplex(cfg: DataConfig) -> np.ndarray:
    """Class means on a regular simplex of edge mean_scale, centered at 0.

    Every class pair sits exactly mean_scale apart, so classification
    difficulty is uniform across classes and tasks.
    """
    if cfg.mean_scale < 2.0 * cfg.noise_sigma:
        raise InvalidConfigError(
            f"mean_scale {cfg.mean_scale} under the 2-sigma separation floor"
        )
    k, d = cfg.n_classes, cfg.input_dim
    simplex = np.zeros((k, d))
    simplex[:, :k] = np.eye(k) - 1.0 / k
    simplex *= cfg.mean_scale / np.sqrt(2.0)  # unit-edge simplex scaled to edge length
    return simplex


def _task_offset(global_seed: int, task_id: int, cfg: DataConfig) -> np.ndarray:
    """Task center: column task_id of one orthogonal frame drawn per seed.

    Orthogonal directions of equal length put every pair of task centers the
    same distance apart, so inter-task confusion never depends on a lucky or
    unlucky draw. Capped at input_dim tasks per frame.
    """
    if task_id >= cfg.input_dim:
        raise InvalidConfigError(
            f"task {task_id} exceeds the {cfg.input_dim} orthogonal offset "
            "directions input_dim provides"
        )
    gen = Rng(global_seed).split("task-frame").generator()
    frame = _orthogonalize(gen.standard_normal((cfg.input_dim, cfg.input_dim)))
    return 0.5 * cfg.mean_scale * np.sqrt(cfg.input_dim) * frame[:, task_id]


def _sample_split(spec: TaskSpec, n: int, label: str) -> Dataset:
    gen = Rng(spec.seed).split(label).generator()
    per = n // spec.n_classes
    extra = n % spec.n_classes
    counts = [per + (1 if c < extra else 0) for c in range(spec.n_classes)]
    # class-interleaved order keeps every prefix balanced
    labels = np.array(
        [c for i in range(max(counts)) for c in range(spec.n_classes) if i < counts[c]],
        dtype=np.int64,
    )
    centers = spec.offset[None, :] + spec.class_means @ spec.rotation.T
    noise = spec.noise_sigma * gen.standard_normal((n, spec.input_dim))
    inputs = centers[labels] + noise
    return Dataset(task_id=spec.task_id, inputs=inputs, labels=labels, split=label)


def make_task(task_id: int, global_seed: int, cfg: DataConfig = DataConfig()):
    """Build one task: its spec, train split, and probe split."""
    cfg.validate()
    seed = Rng(global_seed).child_seed(f"task-{task_id}")
    gen = Rng(seed).split("spec").generator()
    rotation = _orthogonalize(gen.standard_normal((cfg.input_dim, cfg.input_dim)))
    spec = TaskSpec(
        task_id=task_id,
        n_classes=cfg.n_classes,
        input_dim=cfg.input_dim,
        seed=seed,
        class_means=_class_simplex(cfg),
        rotation=rotation,
        offset=_task_offset(global_seed, task_id, cfg),
        noise_sigma=cfg.noise_sigma,
        train_size=cfg.train_size,
        probe_size=cfg.probe_size,
    )
    train = _sample_split(spec, cfg.train_size, "train")
    probe = _sample_split(spec, cfg.probe_size, "probe")
    return spec, train, probe


def probe_suite(task_specs, samples_per_task: int) -> list[Dataset]:
    """Fixed probe sets: the first samples_per_task probe items per task.

    The suite is regenerated from the task specs, so victim and suspect
    fingerprinting always see identical inputs in identical order.
    """
    out = []
    for spec in task_specs:
        if samples_per_task > spec.probe_size:
            raise InvalidRequestError(
                f"requested {samples_per_task} probes, pool holds {spec.probe_size}"
            )
        full = _sample_split(spec, spec.probe_size, "probe")
        out.append(
            Dataset(
                task_id=spec.task_id,
                inputs=full.inputs[:samples_per_task],
                labels=full.labels[:samples_per_task],
                split="probe",
            )
        )
    return out


def dump_csv(datasets, path) -> None:
    """Write datasets as rows of task_id,split,label,x0..x{d-1}."""
    datasets = list(datasets)
    dim = datasets[0].inputs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "split", "label"] + [f"x{i}" for i in range(dim)])
        for ds in datasets:
            for x, y in zip(ds.inputs, ds.labels):
                w.writerow([ds.task_id, ds.split, int(y)] + [repr(float(v)) for v in x])
