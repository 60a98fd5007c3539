"""Task vectors (fine-tuned minus starting model) and pairwise similarity metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import StructuralError
from .params import ParameterVector, TrainableMask, check_compatible, masked

METRICS = ("cosine", "l2", "pearson")


@dataclass(frozen=True)
class TaskVector:
    delta: ParameterVector
    client_id: int = 0
    round: int = 0
    mask: TrainableMask | None = None

    @property
    def coords(self) -> np.ndarray:
        """Coordinates used for similarity: the trainable subset in PEFT mode."""
        if self.mask is None:
            return self.delta.values
        return masked(self.delta, self.mask)


VectorLike = Union[TaskVector, ParameterVector, np.ndarray, Sequence[float]]


def compute_task_vector(fine_tuned: ParameterVector, base: ParameterVector, client_id: int = 0, round: int = 0) -> TaskVector:
    check_compatible(fine_tuned, base)
    return TaskVector(ParameterVector(fine_tuned.values - base.values, base.partition), client_id, round)


def compute_task_vector_peft(
    fine_tuned: ParameterVector,
    base: ParameterVector,
    mask: TrainableMask,
    client_id: int = 0,
    round: int = 0,
) -> TaskVector:
    """Task vector over the trainable subset; frozen coordinates are exactly zero.

    Raises StructuralError if any frozen coordinate differs between the inputs.
    """
    check_compatible(fine_tuned, base)
    if mask.dim != base.dim:
        raise StructuralError(f"mask is for dimension {mask.dim}, models have {base.dim}")
    frozen = mask.frozen_indices()
    if not np.array_equal(fine_tuned.values[frozen], base.values[frozen]):
        raise StructuralError("frozen parameters changed during fine-tuning")
    delta = np.zeros(base.dim)
    idx = mask.indices
    delta[idx] = fine_tuned.values[idx] - base.values[idx]
    return TaskVector(ParameterVector(delta, base.partition), client_id, round, mask)


def _coords(v: VectorLike) -> np.ndarray:
    if isinstance(v, TaskVector):
        return v.coords
    if isinstance(v, ParameterVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def _mask_of(v: VectorLike) -> TrainableMask | None:
    return v.mask if isinstance(v, TaskVector) else None


def _check_masks(vectors: Sequence[VectorLike]) -> None:
    first = _mask_of(vectors[0])
    for v in vectors[1:]:
        m = _mask_of(v)
        if (m is None) != (first is None) or (m is not None and m != first):
            raise StructuralError("task vectors were computed under different trainable masks")


def _pair(a: VectorLike, b: VectorLike) -> tuple[np.ndarray, np.ndarray]:
    _check_masks([a, b])
    x, y = _coords(a), _coords(b)
    if x.shape != y.shape:
        raise StructuralError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def _cosine(x: np.ndarray, y: np.ndarray) -> float:
    mx, my = np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0)
    if mx == 0.0 or my == 0.0:
        # a vector that did not move carries no direction
        return 0.0
    # rescale first so squared norms cannot overflow for huge finite entries
    x, y = x / mx, y / my
    return float(np.clip(np.dot(x, y) / (np.sqrt(np.dot(x, x)) * np.sqrt(np.dot(y, y))), -1.0, 1.0))


def _l2(x: np.ndarray, y: np.ndarray) -> float:
    d = x - y
    return float(1.0 / (1.0 + np.sqrt(np.dot(d, d))))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise StructuralError("pearson similarity needs at least 2 coordinates")
    return _cosine(x - x.mean(), y - y.mean())


_KERNELS = {"cosine": _cosine, "l2": _l2, "pearson": _pearson}


def cosine_sim(a: VectorLike, b: VectorLike) -> float:
    return _cosine(*_pair(a, b))


def l2_sim(a: VectorLike, b: VectorLike) -> float:
    """``1 / (1 + ||a - b||)``: 1 at identity, decreasing with distance."""
    return _l2(*_pair(a, b))


def pearson_sim(a: VectorLike, b: VectorLike) -> float:
    return _pearson(*_pair(a, b))


def similarity(a: VectorLike, b: VectorLike, metric: str = "cosine") -> float:
    return kernel(metric)(*_pair(a, b))


def kernel(metric: str):
    try:
        return _KERNELS[metric]
    except KeyError:
        raise StructuralError(f"unknown similarity metric {metric!r}; expected one of {METRICS}") from None


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    metric: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


def similarity_rows(rows: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise similarities between the rows of a ``(K, n)`` array.

    Only the upper triangle is computed and mirrored, so the result is exactly
    symmetric; the diagonal is exactly 1 for every metric.
    """
    fn = kernel(metric)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise StructuralError("need a non-empty (K, n) array of vectors")
    k = rows.shape[0]
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = fn(rows[i], rows[j])
    return out


def similarity_matrix(vectors: Sequence[VectorLike], metric: str = "cosine") -> SimilarityMatrix:
    if len(vectors) == 0:
        raise StructuralError("similarity matrix of an empty client list")
    _check_masks(vectors)
    coords = [_coords(v) for v in vectors]
    if len({c.shape for c in coords}) != 1:
        raise StructuralError("vectors have differing dimensions")
    return SimilarityMatrix(similarity_rows(np.stack(coords), metric), metric)


def export_similarity_csv(path: str | Path, sim: SimilarityMatrix | np.ndarray, *, metric: str | None = None,
                          round: int = 0, kind: str = "task_vector") -> Path:
    """One comment header line (metric, round, kind), then the K x K matrix."""
    if isinstance(sim, SimilarityMatrix):
        values, metric = sim.values, sim.metric
    else:
        values = np.asarray(sim)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# metric={metric or 'unknown'} round={round} kind={kind}"]
    lines += [",".join(f"{x:.12f}" for x in row) for row in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_matrix_csv(path: str | Path) -> tuple[dict[str, str], np.ndarray]:
    """Parse a matrix file written by this package: header fields and values."""
    header: dict[str, str] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                header[key] = value
        elif line.strip():
            rows.append([float(x) for x in line.split(",")])
    return header, np.array(rows)
