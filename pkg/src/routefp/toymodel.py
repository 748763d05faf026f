"""Small residual backbone with per-task heads.

Each block applies a linear token mixer and a two-layer ReLU MLP, both with
residual connections. All block parameters are stored stacked along a leading
layer axis so kernels can run the whole depth in one call. The input
projection is fixed at init (never trained) so every derived model shares the
same feature frame; per-task heads sit outside the trunk and are excluded
from task vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidConfigError, InvalidRequestError, TrainingDivergedError
from .numerics import Rng, sgd_step


@dataclass(frozen=True)
class Arch:
    depth: int = 4
    width: int = 16
    hidden: int = 32
    n_classes: int = 4
    input_dim: int = 16

    def validate(self) -> None:
        if min(self.depth, self.width, self.hidden, self.n_classes, self.input_dim) < 1:
            raise InvalidConfigError("all architecture sizes must be positive")
        if self.hidden < self.width:
            raise InvalidConfigError(
                f"hidden {self.hidden} must be at least width {self.width}"
            )


@dataclass
class ModelParams:
    arch: Arch
    proj: np.ndarray  # (width, input_dim), frozen after init
    attn_W: np.ndarray  # (depth, width, width)
    attn_b: np.ndarray  # (depth, width)
    mlp_W1: np.ndarray  # (depth, hidden, width)
    mlp_b1: np.ndarray  # (depth, hidden)
    mlp_W2: np.ndarray  # (depth, width, hidden)
    mlp_b2: np.ndarray  # (depth, width)
    heads: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            proj=self.proj.copy(),
            attn_W=self.attn_W.copy(),
            attn_b=self.attn_b.copy(),
            mlp_W1=self.mlp_W1.copy(),
            mlp_b1=self.mlp_b1.copy(),
            mlp_W2=self.mlp_W2.copy(),
            mlp_b2=self.mlp_b2.copy(),
            heads={t: (w.copy(), b.copy()) for t, (w, b) in self.heads.items()},
        )

    def block_tensors(self) -> dict[str, np.ndarray]:
        return {
            "attn_W": self.attn_W,
            "attn_b": self.attn_b,
            "mlp_W1": self.mlp_W1,
            "mlp_b1": self.mlp_b1,
            "mlp_W2": self.mlp_W2,
            "mlp_b2": self.mlp_b2,
        }


@dataclass(frozen=True)
class ExpertDelta:
    """Trunk-only parameter difference between a tuned model and its base."""

    source_task: int
    d_attn_W: np.ndarray
    d_attn_b: np.ndarray
    d_mlp_W1: np.ndarray
    d_mlp_b1: np.ndarray
    d_mlp_W2: np.ndarray
    d_mlp_b2: np.ndarray


def _init_proj(gen: np.random.Generator, d: int, din: int) -> np.ndarray:
    """Scaled orthogonal embedding, frozen for the model's whole life.

    An isometry (up to scale) treats every input direction alike, so no class
    or task axis gets squashed by an unlucky draw. The scale keeps trunk
    activations small enough that fixed-lr SGD stays inside its stability
    region at typical data magnitudes.
    """
    a = gen.standard_normal((max(d, din), min(d, din)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return (q if d >= din else q.T) * (np.sqrt(d) / 12.0)


def init_params(arch: Arch, seed: int) -> ModelParams:
    arch.validate()
    rng = Rng(seed)
    L, d, dh, din = arch.depth, arch.width, arch.hidden, arch.input_dim

    def draw(label, shape, fan_in):
        return rng.split(label).generator().standard_normal(shape) / np.sqrt(fan_in)

    return ModelParams(
        arch=arch,
        proj=_init_proj(rng.split("proj").generator(), d, din),
        attn_W=draw("attn_W", (L, d, d), d),
        attn_b=np.zeros((L, d)),
        mlp_W1=draw("mlp_W1", (L, dh, d), d),
        mlp_b1=np.zeros((L, dh)),
        mlp_W2=draw("mlp_W2", (L, d, dh), dh),
        mlp_b2=np.zeros((L, d)),
        heads={},
    )


def init_head(arch: Arch, seed: int, task: int) -> tuple[np.ndarray, np.ndarray]:
    gen = Rng(seed).split(f"head-{task}").generator()
    w = gen.standard_normal((arch.n_classes, arch.width)) / np.sqrt(arch.width)
    return w, np.zeros(arch.n_classes)


def forward(model: ModelParams, X: np.ndarray, task: int):
    """Run the trunk plus one task head.

    Returns (logits, features, final) where features are the pre-MLP
    activations per layer, shape (batch, depth, width).
    """
    if task not in model.heads:
        raise InvalidRequestError(f"model has no head for task {task}")
    out, xin, h_all, _ = kernels.toy_forward(
        model.proj, model.attn_W, model.attn_b,
        model.mlp_W1, model.mlp_b1, model.mlp_W2, model.mlp_b2,
        np.ascontiguousarray(X, dtype=np.float64),
    )
    hw, hb = model.heads[task]
    logits = out @ hw.T + hb
    return logits, h_all, out


def _ce_loss_grad(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(np.clip(probs[np.arange(n), labels], 1e-300, None))
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return float(np.mean(nll)), g / n


def loss_and_grads(model: ModelParams, X: np.ndarray, labels: np.ndarray, task: int):
    """Cross-entropy loss plus gradients for trunk blocks and the task head."""
    if task not in model.heads:
        raise InvalidRequestError(f"model has no head for task {task}")
    out, xin, h_all, act = kernels.toy_forward(
        model.proj, model.attn_W, model.attn_b,
        model.mlp_W1, model.mlp_b1, model.mlp_W2, model.mlp_b2,
        np.ascontiguousarray(X, dtype=np.float64),
    )
    hw, hb = model.heads[task]
    logits = out @ hw.T + hb
    loss, dlogits = _ce_loss_grad(logits, labels)
    g_hw = dlogits.T @ out
    g_hb = dlogits.sum(axis=0)
    g_out = dlogits @ hw
    gaW, gab, gW1, gb1, gW2, gb2 = kernels.toy_backward(
        model.attn_W, model.mlp_W1, model.mlp_W2, xin, h_all, act, g_out
    )
    grads = {
        "attn_W": gaW, "attn_b": gab,
        "mlp_W1": gW1, "mlp_b1": gb1,
        "mlp_W2": gW2, "mlp_b2": gb2,
        "head_W": g_hw, "head_b": g_hb,
    }
    return loss, grads


# Only the MLP weight tensors and the hidden bias train; the attention-analog
# maps stay at their initial values.  Letting the attention maps drift couples
# every residual block's growth through the backward pass, and plain fixed-lr
# SGD then oscillates or diverges at the default rates.  Specialization lives
# in the MLPs anyway, which is what the routing statistics read.  The output
# bias stays frozen too: the residual stream and the heads absorb any constant
# shift, so training it only adds a rigid component to every task vector.
_MLP_KEYS = ("mlp_W1", "mlp_b1", "mlp_W2")


def _mlp_step(model: ModelParams, grads: dict, lr: float) -> dict:
    params = {k: getattr(model, k) for k in _MLP_KEYS}
    return sgd_step(params, {k: grads[k] for k in _MLP_KEYS}, lr)


def finetune(
    model: ModelParams,
    dataset,
    task: int,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    record_loss: bool = False,
):
    """SGD on one task; returns a new model (and the loss curve if asked).

    Trains the MLP sublayers and this task's head. The attention-analog
    maps, the input projection, and every other head are left untouched.
    """
    out = model.copy()
    if task not in out.heads:
        out.heads[task] = init_head(out.arch, seed, task)
    gen = Rng(seed).split("batches").generator()
    n = dataset.inputs.shape[0]
    order = np.arange(n)
    losses = []
    pos = n  # force an initial shuffle
    for _ in range(steps):
        if pos + batch_size > n:
            gen.shuffle(order)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        loss, grads = loss_and_grads(out, dataset.inputs[idx], dataset.labels[idx], task)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss}; lower the learning rate")
        if record_loss:
            losses.append(loss)
        hw, hb = out.heads[task]
        new_mlp = _mlp_step(out, grads, lr)
        out.mlp_W1, out.mlp_b1 = new_mlp["mlp_W1"], new_mlp["mlp_b1"]
        out.mlp_W2 = new_mlp["mlp_W2"]
        out.heads[task] = (hw - lr * grads["head_W"], hb - lr * grads["head_b"])
    if record_loss:
        return out, losses
    return out


def init_pretrained(
    arch: Arch,
    seed: int,
    datasets,
    warmup_steps: int = 200,
    warmup_lr: float = 0.05,
    batch_size: int = 32,
    trunk_steps: int = 10,
) -> ModelParams:
    """Shared starting point: random init plus brief round-robin multi-task SGD.

    Warmup gives every expert a common non-degenerate ancestor, which is what
    makes parameter differences meaningful. Heads update throughout; the MLP
    sublayers update only during the first trunk_steps, which caps how
    task-specialized the shared trunk gets before experts branch off.
    """
    model = init_params(arch, seed)
    for ds in datasets:
        model.heads[ds.task_id] = init_head(arch, seed, ds.task_id)
    gens = {ds.task_id: Rng(seed).split(f"warmup-{ds.task_id}").generator() for ds in datasets}
    for step in range(warmup_steps):
        ds = datasets[step % len(datasets)]
        idx = gens[ds.task_id].choice(ds.inputs.shape[0], size=batch_size, replace=False)
        loss, grads = loss_and_grads(model, ds.inputs[idx], ds.labels[idx], ds.task_id)
        if not np.isfinite(loss):
            raise TrainingDivergedError("warmup diverged; lower warmup_lr")
        if step < trunk_steps:
            new_mlp = _mlp_step(model, grads, warmup_lr)
            model.mlp_W1, model.mlp_b1 = new_mlp["mlp_W1"], new_mlp["mlp_b1"]
            model.mlp_W2 = new_mlp["mlp_W2"]
        hw, hb = model.heads[ds.task_id]
        model.heads[ds.task_id] = (
            hw - warmup_lr * grads["head_W"],
            hb - warmup_lr * grads["head_b"],
        )
    return model


def task_vector(tuned: ModelParams, base: ModelParams, source_task: int = -1) -> ExpertDelta:
    """Trunk-only difference tuned minus base; heads and projection excluded."""
    if tuned.arch != base.arch:
        raise InvalidRequestError("task vector requires matching architectures")
    return ExpertDelta(
        source_task=source_task,
        d_attn_W=tuned.attn_W - base.attn_W,
        d_attn_b=tuned.attn_b - base.attn_b,
        d_mlp_W1=tuned.mlp_W1 - base.mlp_W1,
        d_mlp_b1=tuned.mlp_b1 - base.mlp_b1,
        d_mlp_W2=tuned.mlp_W2 - base.mlp_W2,
        d_mlp_b2=tuned.mlp_b2 - base.mlp_b2,
    )


def apply_delta(base: ModelParams, delta: ExpertDelta) -> ModelParams:
    out = base.copy()
    out.attn_W = out.attn_W + delta.d_attn_W
    out.attn_b = out.attn_b + delta.d_attn_b
    out.mlp_W1 = out.mlp_W1 + delta.d_mlp_W1
    out.mlp_b1 = out.mlp_b1 + delta.d_mlp_b1
    out.mlp_W2 = out.mlp_W2 + delta.d_mlp_W2
    out.mlp_b2 = out.mlp_b2 + delta.d_mlp_b2
    return out


def accuracy(model: ModelParams, dataset, task: int | None = None) -> float:
    task = dataset.task_id if task is None else task
    logits, _, _ = forward(model, dataset.inputs, task)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
