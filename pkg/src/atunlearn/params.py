"""Flat parameter vectors, parameter-space arithmetic and the checkpoint file format."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ATUC"
SCHEMA_VERSION = 1
STAGES = ("pretrained", "adapted", "unlearned", "extrapolated")


class LayoutError(ValueError):
    """Raised when two parameter vectors do not share a layout."""


class CheckpointError(Exception):
    code = "checkpoint-error"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class SchemaVersionError(CheckpointError):
    code = "unsupported-schema"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParameterVector:
    """Immutable flat view of named tensors.

    ``layout`` maps each tensor name to its shape and offset in ``values``.
    Names are stored in lexicographic order.
    """

    __slots__ = ("_values", "_layout")

    def __init__(self, values, layout):
        values = np.array(values, copy=True)
        if values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        layout = tuple(Slot(str(n), tuple(int(d) for d in s), int(o)) for n, s, o in layout)
        expected = 0
        for slot in layout:
            if slot.offset != expected:
                raise ValueError(f"slot {slot.name!r} is not contiguous (offset {slot.offset}, expected {expected})")
            expected += slot.size
        if expected != values.size:
            raise ValueError(f"layout covers {expected} values but {values.size} were given")
        values.flags.writeable = False
        self._values = values
        self._layout = layout

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def layout(self) -> tuple[Slot, ...]:
        return self._layout

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self._layout)
        return f"ParameterVector(n={len(self)}, tensors=[{names}])"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return (
            self._layout == other._layout
            and self._values.dtype == other._values.dtype
            and np.array_equal(self._values, other._values)
        )

    __hash__ = None

    def compatible(self, other: "ParameterVector") -> bool:
        return self._layout == other._layout

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, [(s.name, s.shape, s.offset) for s in self._layout])

    def astype(self, dtype) -> "ParameterVector":
        return self.with_values(self._values.astype(dtype))

    def tensor(self, name: str) -> np.ndarray:
        for slot in self._layout:
            if slot.name == name:
                return self._values[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)


def flatten(named_tensors: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> ParameterVector:
    items = list(named_tensors.items()) if isinstance(named_tensors, Mapping) else list(named_tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate tensor names: {dupes}")
    items.sort(key=lambda kv: kv[0])
    layout, chunks, offset = [], [], 0
    for name, tensor in items:
        arr = np.asarray(tensor)
        layout.append((name, arr.shape, offset))
        chunks.append(arr.ravel())
        offset += arr.size
    dtype = np.result_type(*[c.dtype for c in chunks]) if chunks else np.float64
    values = np.concatenate(chunks).astype(dtype, copy=False) if chunks else np.zeros(0, dtype)
    return ParameterVector(values, layout)


def unflatten(vec: ParameterVector) -> dict[str, np.ndarray]:
    return {s.name: vec.values[s.offset : s.offset + s.size].reshape(s.shape).copy() for s in vec.layout}


def _check(a: ParameterVector, b: ParameterVector) -> None:
    if not a.compatible(b):
        raise LayoutError("parameter vectors have different layouts")


def sq_distance(a: ParameterVector, b: ParameterVector) -> float:
    _check(a, b)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(diff @ diff)


def affine_combine(a: ParameterVector, b: ParameterVector, t: float) -> ParameterVector:
    """Return ``a + t * (b - a)``; t > 1 extrapolates past ``b``."""
    _check(a, b)
    if t == 0:
        return a
    if t == 1:
        return b
    va, vb = a.values.astype(np.float64), b.values.astype(np.float64)
    return a.with_values(va + t * (vb - va))


@dataclass(frozen=True)
class CheckpointMeta:
    architecture: str
    stage: str
    seed: int = 0
    step: int = 0
    extra: tuple[tuple[str, str], ...] = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")


@dataclass(frozen=True)
class Checkpoint:
    params: ParameterVector
    meta: CheckpointMeta = field(compare=True)

    def __post_init__(self):
        # checkpoints are float32 snapshots so that save/load is exact
        if self.params.values.dtype != np.float32:
            object.__setattr__(self, "params", self.params.astype(np.float32))

    def replace(self, **kw) -> "Checkpoint":
        params = kw.pop("params", self.params)
        fields = {
            "architecture": self.meta.architecture,
            "stage": self.meta.stage,
            "seed": self.meta.seed,
            "step": self.meta.step,
            "extra": self.meta.extra,
        }
        fields.update(kw)
        if isinstance(fields["extra"], dict):
            fields["extra"] = tuple(sorted((str(k), str(v)) for k, v in fields["extra"].items()))
        return Checkpoint(params, CheckpointMeta(**fields))


def _encode_meta(meta: CheckpointMeta) -> bytes:
    lines = [
        f"architecture={meta.architecture}",
        f"stage={meta.stage}",
        f"seed={meta.seed}",
        f"step={meta.step}",
    ]
    lines += [f"x.{k}={v}" for k, v in meta.extra]
    for line in lines:
        if "\n" in line:
            raise ValueError("metadata values may not contain newlines")
    for k, _ in meta.extra:
        if "=" in k:
            raise ValueError(f"metadata key may not contain '=': {k!r}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(text: str, version: int) -> CheckpointMeta:
    kv, extra = {}, []
    for line in text.split("\n"):
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("x."):
            extra.append((key[2:], value))
        else:
            kv[key] = value
    return CheckpointMeta(
        architecture=kv.get("architecture", ""),
        stage=kv["stage"],
        seed=int(kv.get("seed", 0)),
        step=int(kv.get("step", 0)),
        extra=tuple(extra),
        schema_version=version,
    )


def dumps_checkpoint(c: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", SCHEMA_VERSION))
    meta = _encode_meta(c.meta)
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    values = c.params.values.astype("<f4", copy=False)
    for slot in c.params.layout:
        name = slot.name.encode("utf-8")
        out.write(struct.pack("<I", len(name)))
        out.write(name)
        out.write(struct.pack("<I", len(slot.shape)))
        out.write(struct.pack(f"<{len(slot.shape)}I", *slot.shape))
        out.write(values[slot.offset : slot.offset + slot.size].tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def loads_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    version = r.u32("schema version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {version}")
    meta = _decode_meta(r.take(r.u32("metadata length"), "metadata").decode("utf-8"), version)
    tensors = []
    while not r.done:
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = math.prod(shape)
        payload = np.frombuffer(r.take(4 * count, f"payload of {name}"), dtype="<f4")
        tensors.append((name, payload.reshape(shape).astype(np.float32)))
    return Checkpoint(flatten(tensors), meta)


def save_checkpoint(c: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(c))


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
