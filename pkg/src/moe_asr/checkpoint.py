"""Checkpoint container: a directory of raw little-endian float32 tensor
files plus a MANIFEST mapping names to dtype/shape/filename. Round trips are
bit-identical; loading validates names and shapes against the target model."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .frontend import CmvnStats
from .model import U2Model

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _dtype_tag(dtype) -> str:
    for tag, dt in _DTYPES.items():
        if np.dtype(dtype) == dt or np.dtype(dtype).str.lstrip("<>=") == dt.str.lstrip("<"):
            return tag
    raise CheckpointError(f"unsupported dtype {dtype}")


def save_tensors(tensors: dict, path) -> None:
    """Write {name: np.ndarray} as a checkpoint directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        tag = _dtype_tag(arr.dtype)
        fname = name + ".bin"
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{tag}\t{dims}\t{fname}")
        np.ascontiguousarray(arr).astype(_DTYPES[tag]).tofile(path / fname)
    (path / "MANIFEST").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tensors(path) -> dict:
    path = Path(path)
    manifest = path / "MANIFEST"
    if not manifest.exists():
        raise CheckpointError(f"{path}: no MANIFEST")
    tensors = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CheckpointError(f"{manifest}:{lineno}: malformed line")
        name, tag, dims, fname = parts
        if tag not in _DTYPES:
            raise CheckpointError(f"{manifest}:{lineno}: unknown dtype {tag!r}")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        fpath = path / fname
        if not fpath.exists():
            raise CheckpointError(f"{path}: missing tensor file {fname}")
        arr = np.fromfile(fpath, dtype=_DTYPES[tag])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(
                f"{path}: tensor {name} has {arr.size} values, shape {shape} needs "
                f"{int(np.prod(shape))}")
        tensors[name] = arr.reshape(shape)
    return tensors


def save_checkpoint(model: U2Model, path) -> None:
    save_tensors({name: p.data for name, p in model.params.items()}, path)


def load_checkpoint(path, model: U2Model) -> U2Model:
    """Load weights into `model` in place; names and shapes must match the
    config exactly (no partial init)."""
    tensors = load_tensors(path)
    want = set(model.params)
    have = set(tensors)
    missing = sorted(want - have)
    extra = sorted(have - want)
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor set mismatch; missing={missing[:8]} extra={extra[:8]}")
    bad = [f"{n}: file {tensors[n].shape} vs model {model.params[n].data.shape}"
           for n in sorted(want) if tensors[n].shape != model.params[n].data.shape]
    if bad:
        raise CheckpointError(f"{path}: shape mismatch for " + "; ".join(bad[:8]))
    for name, p in model.params.items():
        p.data = tensors[name].astype(p.data.dtype)
    return model


CMVN_MEAN, CMVN_INV_STD, CMVN_COUNT = "cmvn.mean", "cmvn.inv_std", "cmvn.frame_count"


def save_cmvn(stats: CmvnStats, path) -> None:
    save_tensors({CMVN_MEAN: stats.mean, CMVN_INV_STD: stats.inv_std,
                  CMVN_COUNT: np.array([stats.frame_count], dtype=np.float32)}, path)


def load_cmvn(path) -> CmvnStats:
    tensors = load_tensors(path)
    for key in (CMVN_MEAN, CMVN_INV_STD):
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")
    count = int(tensors[CMVN_COUNT][0]) if CMVN_COUNT in tensors else 1
    return CmvnStats(tensors[CMVN_MEAN].astype(np.float32),
                     tensors[CMVN_INV_STD].astype(np.float32), count)
