"""Checkpoint container: DL3D-style header plus a named-tensor table of contents.

Layout (little-endian)::

    b"DL3C" | version u8 | meta_len u32 | meta JSON (utf-8)
    n_tensors u32
    per tensor: name_len u32 | name | ndim u32 | dims u32 * ndim
    payload: float64 values of every tensor, in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    ShapeError,
    TensorNameError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import DALightModel, ModelConfig
from .optim import OptimState

MAGIC = b"DL3C"
VERSION = 1
_U32 = struct.Struct("<I")


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, bytes([VERSION]), _U32.pack(len(meta_bytes)), meta_bytes, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts += [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)] + [_U32.pack(d) for d in arr.shape]
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(what, self.pos + n, len(self.raw))
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        try:
            return self.take(self.u32(what), what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8") from exc


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "header")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.take(1, "header")[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.text("metadata"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: metadata is not valid JSON") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: metadata must be a JSON object")
    toc = []
    for _ in range(r.u32("table of contents")):
        name = r.text("table of contents")
        ndim = r.u32("table of contents")
        toc.append((name, tuple(r.u32("table of contents") for _ in range(ndim))))
    expected = r.pos + 8 * sum(int(np.prod(s, dtype=np.int64)) for _, s in toc)
    if expected > len(r.raw):
        raise TruncatedFileError("payload", expected, len(r.raw))
    tensors = {}
    for name, shape in toc:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n, "payload"), dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, meta


def save_checkpoint(path, model: DALightModel, state: OptimState | None = None, extra: dict | None = None,
                    best: dict[str, np.ndarray] | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    tensors = {f"param/{n}": t.data for n, t in model.named_parameters()}
    meta = {"model": model.cfg.to_dict(), "extra": extra or {}}
    if state is not None:
        meta["optim"] = state.scalars()
        for n, m, v in zip(names, state.m, state.v):
            tensors[f"adam_m/{n}"] = m
            tensors[f"adam_v/{n}"] = v
    if best is not None:
        for n in names:
            tensors[f"best/{n}"] = best[n]
    write_tensors(path, tensors, meta)


def _section(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_into(model: DALightModel, path) -> tuple[OptimState | None, dict, dict[str, np.ndarray] | None]:
    """Restore parameters into ``model``; names must match exactly."""
    return _restore(model, *read_tensors(path))


def _restore(model, tensors, meta):
    params = _section(tensors, "param/")
    own = {n for n, _ in model.named_parameters()}
    if set(params) != own:
        raise TensorNameError(own - set(params), set(params) - own)
    try:
        model.load_state_dict(params)
    except ShapeError as exc:
        raise FormatError(f"stored tensor does not fit the model: {exc}") from exc
    state = None
    if "optim" in meta:
        names = [n for n, _ in model.named_parameters()]
        m, v = _section(tensors, "adam_m/"), _section(tensors, "adam_v/")
        missing = [f"adam_m/{n}" for n in names if n not in m] + [f"adam_v/{n}" for n in names if n not in v]
        if missing:
            raise TensorNameError(missing, [])
        try:
            state = OptimState([m[n].copy() for n in names], [v[n].copy() for n in names], **meta["optim"])
        except TypeError as exc:
            raise FormatError(f"optimizer metadata is malformed: {exc}") from exc
    best = _section(tensors, "best/") or None
    return state, meta.get("extra", {}), best


def load_checkpoint(path, seed: int = 0) -> tuple[DALightModel, OptimState | None, dict]:
    """Build the model recorded in the checkpoint and restore everything."""
    tensors, meta = read_tensors(path)
    try:
        model = DALightModel(ModelConfig.from_dict(meta["model"]), seed)
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: model metadata is malformed: {exc}") from exc
    state, extra, best = _restore(model, tensors, meta)
    if best is not None:
        extra = dict(extra, best_state=best)
    return model, state, extra
