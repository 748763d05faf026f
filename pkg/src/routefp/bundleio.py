"""Serialization for models, mixtures, and tabular results.

Bundles are JSON with sorted keys, no NaN/Inf, and an embedded integrity
checksum over the tensor payload. Floats round-trip exactly (shortest-repr
encoding both ways), so save/load is lossless for float64 weights.
"""

from __future__ import annotations

import csv
import hashlib
import json

import numpy as np

from .errors import InvalidInputError
from .merging import MergedMoE
from .toymodel import Arch, ModelParams

FORMAT_VERSION = 1


def checksum_u64(arrays) -> int:
    """Order-sensitive digest of tensors: first 8 bytes of sha256.

    Hashes each array's shape header then its little-endian float64 bytes,
    so layout changes and value changes both show up.
    """
    h = hashlib.sha256()
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        h.update(str(a.shape).encode("ascii"))
        h.update(a.astype("<f8", copy=False).tobytes(order="C"))
    return int.from_bytes(h.digest()[:8], "big")


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, allow_nan=False, indent=2)
        f.write("\n")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _arch_to_obj(arch: Arch) -> dict:
    return {
        "depth": arch.depth,
        "width": arch.width,
        "hidden": arch.hidden,
        "n_classes": arch.n_classes,
        "input_dim": arch.input_dim,
    }


def _arch_from_obj(obj) -> Arch:
    return Arch(
        depth=int(obj["depth"]),
        width=int(obj["width"]),
        hidden=int(obj["hidden"]),
        n_classes=int(obj["n_classes"]),
        input_dim=int(obj["input_dim"]),
    )


def _heads_to_obj(heads) -> dict:
    return {
        str(t): {"W": w.tolist(), "b": b.tolist()} for t, (w, b) in sorted(heads.items())
    }


def _heads_from_obj(obj) -> dict:
    return {
        int(t): (np.asarray(v["W"], dtype=np.float64), np.asarray(v["b"], dtype=np.float64))
        for t, v in obj.items()
    }


_MODEL_TENSORS = ("proj", "attn_W", "attn_b", "mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2")
_MOE_TENSORS = (
    "bank_W1", "bank_b1", "bank_W2", "bank_b2", "router_W", "router_b",
)


def _model_tensor_list(model: ModelParams):
    arrays = [getattr(model, name) for name in _MODEL_TENSORS]
    for t in sorted(model.heads):
        arrays.extend(model.heads[t])
    return arrays


def save_model(model: ModelParams, path) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "arch": _arch_to_obj(model.arch),
        "tensors": {name: getattr(model, name).tolist() for name in _MODEL_TENSORS},
        "heads": _heads_to_obj(model.heads),
        "checksum": checksum_u64(_model_tensor_list(model)),
    }
    _dump_json(obj, path)


def _expect_kind(obj, kind: str, path) -> None:
    if obj.get("kind") != kind:
        raise InvalidInputError(f"{path} holds a {obj.get('kind')!r} bundle, expected {kind!r}")
    if obj.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported bundle format_version {obj.get('format_version')!r}")


def load_model(path) -> ModelParams:
    obj = _load_json(path)
    _expect_kind(obj, "model", path)
    tensors = {
        name: np.asarray(obj["tensors"][name], dtype=np.float64) for name in _MODEL_TENSORS
    }
    model = ModelParams(arch=_arch_from_obj(obj["arch"]), heads=_heads_from_obj(obj["heads"]), **tensors)
    if checksum_u64(_model_tensor_list(model)) != obj["checksum"]:
        raise InvalidInputError(f"{path}: checksum mismatch, bundle is corrupt")
    return model


def _moe_tensor_list(moe: MergedMoE):
    arrays = _model_tensor_list(moe.base)
    arrays.extend(getattr(moe, name) for name in _MOE_TENSORS)
    return arrays


def save_moe(moe: MergedMoE, path, probe_config: dict | None = None) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "moe",
        "arch": _arch_to_obj(moe.arch),
        "lam": moe.lam,
        "tau": moe.tau,
        "expert_ids": list(moe.expert_ids),
        "base": {name: getattr(moe.base, name).tolist() for name in _MODEL_TENSORS},
        "heads": _heads_to_obj(moe.base.heads),
        "tensors": {name: getattr(moe, name).tolist() for name in _MOE_TENSORS},
        "checksum": checksum_u64(_moe_tensor_list(moe)),
    }
    if probe_config is not None:
        obj["probe_config"] = probe_config
    _dump_json(obj, path)


def load_moe(path) -> tuple[MergedMoE, dict | None]:
    obj = _load_json(path)
    _expect_kind(obj, "moe", path)
    arch = _arch_from_obj(obj["arch"])
    base = ModelParams(
        arch=arch,
        heads=_heads_from_obj(obj["heads"]),
        **{name: np.asarray(obj["base"][name], dtype=np.float64) for name in _MODEL_TENSORS},
    )
    moe = MergedMoE(
        arch=arch,
        base=base,
        tau=float(obj["tau"]),
        lam=float(obj["lam"]),
        expert_ids=tuple(int(t) for t in obj["expert_ids"]),
        **{name: np.asarray(obj["tensors"][name], dtype=np.float64) for name in _MOE_TENSORS},
    )
    if checksum_u64(_moe_tensor_list(moe)) != obj["checksum"]:
        raise InvalidInputError(f"{path}: checksum mismatch, bundle is corrupt")
    return moe, obj.get("probe_config")


def save_json(obj, path) -> None:
    """Canonical JSON for reports: sorted keys, no NaN, trailing newline."""
    _dump_json(obj, path)


def load_json(path):
    return _load_json(path)


def fmt6(value: float) -> str:
    return f"{float(value):.6f}"


def write_csv(path, header, rows) -> None:
    """CSV with floats fixed to six decimals, everything else verbatim."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([
                fmt6(v) if isinstance(v, float) or isinstance(v, np.floating) else v
                for v in row
            ])
