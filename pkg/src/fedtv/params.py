"""Flat parameter vectors with named layer partitions and trainable masks.

Every model in the simulator is a single float64 vector split into named,
contiguous layer ranges. All server-side arithmetic happens on these vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import StructuralError

CHECKPOINT_FORMAT = "fedtv-checkpoint-v1"


@dataclass(frozen=True)
class LayerPartition:
    """Contiguous, non-overlapping ranges covering ``[0, dim)``, one name per range."""

    boundaries: tuple[tuple[int, int], ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        bounds = tuple((int(s), int(e)) for s, e in self.boundaries)
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "boundaries", bounds)
        object.__setattr__(self, "names", names)
        if not bounds:
            raise StructuralError("a partition needs at least one layer")
        if len(names) != len(bounds):
            raise StructuralError(f"{len(names)} names for {len(bounds)} layer ranges")
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate layer names in {names}")
        expected_start = 0
        for start, end in bounds:
            if start != expected_start or end < start:
                raise StructuralError(f"layer ranges must be contiguous from 0, got {bounds}")
            expected_start = end

    @classmethod
    def from_sizes(cls, names: Sequence[str], sizes: Sequence[int]) -> LayerPartition:
        offsets = np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))])
        return cls(tuple(zip(offsets[:-1].tolist(), offsets[1:].tolist())), tuple(names))

    @classmethod
    def single(cls, dim: int, name: str = "all") -> LayerPartition:
        return cls(((0, int(dim)),), (name,))

    @property
    def dim(self) -> int:
        return self.boundaries[-1][1]

    @property
    def num_layers(self) -> int:
        return len(self.boundaries)

    def index_of(self, layer: int | str) -> int:
        if isinstance(layer, str):
            try:
                return self.names.index(layer)
            except ValueError:
                raise StructuralError(f"unknown layer {layer!r}; have {self.names}") from None
        if not 0 <= layer < len(self.boundaries):
            raise StructuralError(f"layer index {layer} out of range for {len(self.boundaries)} layers")
        return int(layer)

    def range_of(self, layer: int | str) -> tuple[int, int]:
        return self.boundaries[self.index_of(layer)]


def _as_finite_float64(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise StructuralError(f"parameter values must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError("parameter values contain NaN or Inf")
    arr.flags.writeable = False
    return arr


class ParameterVector:
    """Immutable dense float64 vector tied to a :class:`LayerPartition`."""

    __slots__ = ("_values", "_partition")

    def __init__(self, values, partition: LayerPartition | None = None):
        arr = _as_finite_float64(values)
        if partition is None:
            partition = LayerPartition.single(arr.size)
        if partition.dim != arr.size:
            raise StructuralError(f"partition covers {partition.dim} coordinates, vector has {arr.size}")
        self._values = arr
        self._partition = partition

    @property
    def values(self) -> np.ndarray:
        """Read-only view of the coordinates."""
        return self._values

    @property
    def partition(self) -> LayerPartition:
        return self._partition

    @property
    def dim(self) -> int:
        return self._values.size

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        return f"ParameterVector(dim={self.dim}, layers={list(self._partition.names)})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self._partition == other._partition and np.array_equal(self._values, other._values)

    __hash__ = None  # type: ignore[assignment]

    def with_values(self, values) -> ParameterVector:
        return ParameterVector(values, self._partition)

    def __add__(self, other: ParameterVector) -> ParameterVector:
        return add(self, other)

    def __sub__(self, other: ParameterVector) -> ParameterVector:
        return sub(self, other)

    def __mul__(self, c: float) -> ParameterVector:
        return scale(self, c)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, partition: LayerPartition) -> ParameterVector:
        return cls(np.zeros(partition.dim), partition)


def check_compatible(a: ParameterVector, b: ParameterVector) -> None:
    if a.dim != b.dim:
        raise StructuralError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.partition != b.partition:
        raise StructuralError("layer partitions differ")


def add(a: ParameterVector, b: ParameterVector) -> ParameterVector:
    check_compatible(a, b)
    return ParameterVector(a.values + b.values, a.partition)


def sub(a: ParameterVector, b: ParameterVector) -> ParameterVector:
    check_compatible(a, b)
    return ParameterVector(a.values - b.values, a.partition)


def scale(a: ParameterVector, c: float) -> ParameterVector:
    c = float(c)
    if not np.isfinite(c):
        raise StructuralError(f"scale factor must be finite, got {c}")
    return ParameterVector(a.values * c, a.partition)


def dot(a: ParameterVector, b: ParameterVector) -> float:
    check_compatible(a, b)
    return float(np.dot(a.values, b.values))


def l2norm(a: ParameterVector) -> float:
    return float(np.sqrt(np.dot(a.values, a.values)))


def layer_slice(v: ParameterVector, layer: int | str) -> np.ndarray:
    """Coordinates of one layer as a read-only view into ``v``."""
    start, end = v.partition.range_of(layer)
    return v.values[start:end]


def layer_slices(v: ParameterVector) -> list[np.ndarray]:
    return [v.values[s:e] for s, e in v.partition.boundaries]


@dataclass(frozen=True)
class TrainableMask:
    """Sorted, unique trainable coordinate positions within ``[0, dim)``."""

    indices: np.ndarray
    dim: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.dim):
            raise StructuralError(f"mask index out of range for dimension {self.dim}")
        idx = np.unique(idx)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "dim", int(self.dim))

    @classmethod
    def full(cls, dim: int) -> TrainableMask:
        return cls(np.arange(dim), dim)

    @classmethod
    def from_layers(cls, partition: LayerPartition, layers: Iterable[int | str]) -> TrainableMask:
        chunks = [np.arange(*partition.range_of(layer)) for layer in layers]
        idx = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        return cls(idx, partition.dim)

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def is_full(self) -> bool:
        return self.size == self.dim

    def frozen_indices(self) -> np.ndarray:
        keep = np.ones(self.dim, dtype=bool)
        keep[self.indices] = False
        return np.flatnonzero(keep)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=bool)
        out[self.indices] = True
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainableMask):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.indices, other.indices)

    __hash__ = None  # type: ignore[assignment]


def masked(v: ParameterVector, mask: TrainableMask) -> np.ndarray:
    if mask.dim != v.dim:
        raise StructuralError(f"mask is for dimension {mask.dim}, vector has {v.dim}")
    return v.values[mask.indices]


def save_checkpoint(path: str | Path, v: ParameterVector, mask: TrainableMask | None = None) -> tuple[Path, Path]:
    """Write ``<path>`` as little-endian float64 plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(v.values.astype("<f8").tobytes())
    meta = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float64-le",
        "dim": v.dim,
        "boundaries": [list(b) for b in v.partition.boundaries],
        "names": list(v.partition.names),
        "mask": None if mask is None else mask.indices.tolist(),
    }
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_checkpoint(path: str | Path) -> tuple[ParameterVector, TrainableMask | None]:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise StructuralError(f"{sidecar}: unsupported checkpoint format {meta.get('format')!r}")
    values = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    if values.size != meta["dim"]:
        raise StructuralError(f"{path}: {values.size} values on disk, sidecar says {meta['dim']}")
    partition = LayerPartition(tuple(tuple(b) for b in meta["boundaries"]), tuple(meta["names"]))
    mask = None if meta.get("mask") is None else TrainableMask(np.asarray(meta["mask"]), meta["dim"])
    return ParameterVector(values, partition), mask
