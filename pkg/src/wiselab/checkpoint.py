"""Flat parameter vectors with a named layout, and the algebra on them.

A checkpoint is an immutable float64 vector plus a :class:`ParamLayout` that
names contiguous slices of it.  Interpolation, EMA accumulation and distances
all operate on the flat vector, so identities between them hold to rounding.

File format (``.ckpt``)::

    8 bytes   magic  b"WISECKPT"
    1 byte    format version (1)
    8 bytes   header length H, little-endian uint64
    H bytes   UTF-8 JSON header {"layout": [...], "meta": {...}, "total": n}
    8n bytes  values, little-endian float64, layout order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import CodecError, DomainError, StateError, StructuralError

MAGIC = b"WISECKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple[LayoutEntry, ...]

    def __post_init__(self):
        seen = set()
        expected = 0
        for e in self.entries:
            if e.name in seen:
                raise StructuralError(f"duplicate parameter name {e.name!r}")
            seen.add(e.name)
            if any((not isinstance(s, int)) or s <= 0 for s in e.shape):
                raise StructuralError(f"parameter {e.name!r} has non-positive shape {e.shape}")
            if e.offset != expected:
                raise StructuralError(
                    f"parameter {e.name!r} starts at {e.offset}, expected {expected}"
                )
            expected += e.size

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, Sequence[int]]]) -> "ParamLayout":
        entries = []
        offset = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            entry = LayoutEntry(name, shape, offset)
            entries.append(entry)
            offset += entry.size
        return cls(tuple(entries))

    @property
    def total(self) -> int:
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.offset + last.size

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> LayoutEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        e = self.entry(name)
        return slice(e.offset, e.offset + e.size)

    def mask(self, predicate) -> np.ndarray:
        """Boolean mask over the flat vector selecting entries whose name satisfies ``predicate``."""
        m = np.zeros(self.total, dtype=bool)
        for e in self.entries:
            if predicate(e.name):
                m[e.offset : e.offset + e.size] = True
        return m

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in self.entries]

    @classmethod
    def from_json(cls, data) -> "ParamLayout":
        try:
            entries = tuple(
                LayoutEntry(str(d["name"]), tuple(int(s) for s in d["shape"]), int(d["offset"]))
                for d in data
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CodecError(f"malformed layout entry: {exc}") from exc
        return cls(entries)


@dataclass(frozen=True)
class CheckpointMeta:
    seed: int = 0
    step: int = 0
    tag: str = ""


@dataclass(frozen=True, eq=False)
class Checkpoint:
    layout: ParamLayout
    values: np.ndarray
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.shape[0] != self.layout.total:
            raise StructuralError(
                f"value length {values.shape[0]} does not match layout total {self.layout.total}"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("checkpoint values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, np.ndarray], meta: CheckpointMeta | None = None
    ) -> "Checkpoint":
        layout = ParamLayout.from_shapes((name, np.shape(a)) for name, a in arrays.items())
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays.values()])
        return cls(layout, flat, meta or CheckpointMeta())

    def view(self, name: str) -> np.ndarray:
        e = self.layout.entry(name)
        return self.values[e.offset : e.offset + e.size].reshape(e.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {e.name: self.view(e.name) for e in self.layout.entries}

    def with_values(self, values: np.ndarray, **meta_changes) -> "Checkpoint":
        return Checkpoint(self.layout, values, replace(self.meta, **meta_changes))

    def with_entry(self, name: str, value: np.ndarray, **meta_changes) -> "Checkpoint":
        e = self.layout.entry(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != e.shape:
            raise StructuralError(f"{name}: expected shape {e.shape}, got {value.shape}")
        values = self.values.copy()
        values[e.offset : e.offset + e.size] = value.reshape(-1)
        return self.with_values(values, **meta_changes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.meta == other.meta
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def _require_same_layout(c0: Checkpoint, c1: Checkpoint) -> None:
    if c0.layout != c1.layout:
        raise StructuralError("checkpoints have different layouts")


def interpolate(c0: Checkpoint, c1: Checkpoint, alpha: float) -> Checkpoint:
    """Element-wise ``(1 - alpha) * c0 + alpha * c1``; meta comes from ``c0``.

    The endpoints return exact copies so signed zeros survive.
    """
    _require_same_layout(c0, c1)
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        values = c0.values
    elif alpha == 1.0:
        values = c1.values
    else:
        values = (1.0 - alpha) * c0.values + alpha * c1.values
    return Checkpoint(c0.layout, values, replace(c0.meta, tag=f"interpolate(alpha={alpha!r})"))


def param_distance(c0: Checkpoint, c1: Checkpoint) -> float:
    _require_same_layout(c0, c1)
    return float(np.linalg.norm(c0.values - c1.values))


# --------------------------------------------------------------------------- EMA

EmaVariant = Literal["zero_init_debiased", "init_biased"]


@dataclass(frozen=True, eq=False)
class EmaState:
    """Running average of parameter iterates.

    ``zero_init_debiased`` starts from zeros and divides by ``1 - decay**step``
    at the end; ``init_biased`` starts from ``init_ref`` and is used as is.
    """

    variant: EmaVariant
    decay: float
    step: int
    accumulator: np.ndarray
    layout: ParamLayout
    init_ref: Checkpoint | None = None

    def __post_init__(self):
        if self.variant not in ("zero_init_debiased", "init_biased"):
            raise DomainError(f"unknown EMA variant {self.variant!r}")
        if not 0.0 <= self.decay < 1.0:
            raise DomainError(f"EMA decay must lie in [0, 1), got {self.decay}")
        if self.variant == "init_biased" and self.init_ref is None:
            raise StateError("init_biased EMA requires init_ref")
        if self.init_ref is not None and self.init_ref.layout != self.layout:
            raise StructuralError("init_ref layout does not match EMA layout")
        acc = np.array(self.accumulator, dtype=np.float64).reshape(-1)
        if acc.shape[0] != self.layout.total:
            raise StructuralError("accumulator length does not match layout")
        acc.setflags(write=False)
        object.__setattr__(self, "accumulator", acc)


def ema_init(
    variant: EmaVariant,
    decay: float,
    layout: ParamLayout | None = None,
    init_ref: Checkpoint | None = None,
) -> EmaState:
    if init_ref is not None:
        layout = init_ref.layout
    if layout is None:
        raise StructuralError("ema_init needs a layout or init_ref")
    if variant == "init_biased":
        if init_ref is None:
            raise StateError("init_biased EMA requires init_ref")
        acc = init_ref.values
    else:
        acc = np.zeros(layout.total)
    return EmaState(variant, float(decay), 0, acc, layout, init_ref)


def ema_update(state: EmaState, theta_t: Checkpoint) -> EmaState:
    if theta_t.layout != state.layout:
        raise StructuralError("checkpoint layout does not match EMA layout")
    beta = state.decay
    acc = beta * state.accumulator + (1.0 - beta) * theta_t.values
    return replace(state, step=state.step + 1, accumulator=acc)


def ema_final(state: EmaState) -> Checkpoint:
    if state.step < 1:
        raise StateError("EMA has not accumulated any iterate")
    if state.variant == "zero_init_debiased":
        values = state.accumulator / (1.0 - state.decay**state.step)
    else:
        values = state.accumulator
    base = state.init_ref.meta if state.init_ref is not None else CheckpointMeta()
    tag = f"ema({state.variant}, decay={state.decay!r}, steps={state.step})"
    return Checkpoint(state.layout, values, replace(base, step=state.step, tag=tag))


# ------------------------------------------------------------------------- codec


def encode(c: Checkpoint) -> bytes:
    header = {
        "layout": c.layout.to_json(),
        "meta": {"seed": c.meta.seed, "step": c.meta.step, "tag": c.meta.tag},
        "total": c.layout.total,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = c.values.astype("<f8", copy=False).tobytes()
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<Q", len(hbytes)) + hbytes + body


def decode(blob: bytes) -> Checkpoint:
    prefix = len(MAGIC) + 1 + 8
    if len(blob) < prefix:
        raise CodecError("file too short for checkpoint preamble")
    if blob[: len(MAGIC)] != MAGIC:
        raise CodecError("bad magic bytes")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CodecError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) + 1 : prefix])
    if prefix + hlen > len(blob):
        raise CodecError("header length exceeds file size")
    try:
        header = json.loads(blob[prefix : prefix + hlen].decode("utf-8"))
        layout = ParamLayout.from_json(header["layout"])
        meta = CheckpointMeta(
            seed=int(header["meta"]["seed"]),
            step=int(header["meta"]["step"]),
            tag=str(header["meta"]["tag"]),
        )
        total = int(header["total"])
    except CodecError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError, StructuralError) as exc:
        raise CodecError(f"malformed header: {exc}") from exc
    if total != layout.total:
        raise CodecError(f"header total {total} disagrees with layout total {layout.total}")
    body = blob[prefix + hlen :]
    if len(body) != 8 * total:
        raise CodecError(f"expected {8 * total} value bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise CodecError("checkpoint contains non-finite values")
    return Checkpoint(layout, values, meta)


def save(c: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(c))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
