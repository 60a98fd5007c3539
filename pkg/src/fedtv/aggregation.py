"""Server-side aggregation: personalized task-vector updates and baselines.

Each client ``i`` keeps its own aggregated model ``bar_i``. After a round of
local training produces ``local_i``, the server forms task vectors
``tau_k = local_k - bar_k``, turns pairwise similarities into a row-stochastic
weight matrix ``P`` and sets ``bar_i <- bar_i + sum_k P[i, k] * tau_k``.
The layer-wise variant repeats this independently on every layer slice.

Reductions over clients sum sorted terms, so results do not depend on client
order (permutation equivariance holds bit-exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AggregationInvariantError, StructuralError
from .params import ParameterVector, TrainableMask, check_compatible
from .task_vector import METRICS, similarity_rows

WEIGHTING_SOURCES = ("task_vector", "parameter", "uniform")
SUBSTRATES = ("task_vector", "parameter")
GRANULARITIES = ("global", "layer_wise")

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class StrategySpec:
    weighting_source: str = "task_vector"
    substrate: str = "task_vector"
    granularity: str = "global"
    metric: str = "cosine"

    def __post_init__(self) -> None:
        for name, value, allowed in (
            ("weighting_source", self.weighting_source, WEIGHTING_SOURCES),
            ("substrate", self.substrate, SUBSTRATES),
            ("granularity", self.granularity, GRANULARITIES),
            ("metric", self.metric, METRICS),
        ):
            if value not in allowed:
                raise StructuralError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def label(self) -> str:
        if self.weighting_source == "uniform":
            return f"uniform/{self.substrate}/{self.granularity}"
        return f"{self.weighting_source}/{self.substrate}/{self.granularity}/{self.metric}"


# named points of the strategy grid
PERSONALIZED = StrategySpec("task_vector", "task_vector", "global", "cosine")
PERSONALIZED_LAYERWISE = StrategySpec("task_vector", "task_vector", "layer_wise", "cosine")
UNIFORM = StrategySpec("uniform", "parameter", "global", "cosine")
PARAM_WEIGHT_VECTOR_AGG = StrategySpec("parameter", "task_vector", "global", "cosine")
PARAM_WEIGHT_PARAM_AGG = StrategySpec("parameter", "parameter", "global", "cosine")

PRESETS = {
    "task_vector": PERSONALIZED,
    "task_vector_layerwise": PERSONALIZED_LAYERWISE,
    "uniform": UNIFORM,
    "param_weight_vector_agg": PARAM_WEIGHT_VECTOR_AGG,
    "param_weight_param_agg": PARAM_WEIGHT_PARAM_AGG,
}


@dataclass(frozen=True)
class AggregationWeights:
    """Row-stochastic K x K weights; one matrix per layer in layer-wise mode.

    ``layers`` maps layer name to its matrix. Global mode uses the single key
    ``None``. Layers without trainable coordinates have no entry.
    """

    layers: dict = field(default_factory=dict)

    @property
    def matrix(self) -> np.ndarray:
        if None not in self.layers:
            raise KeyError("layer-wise weights have no single global matrix")
        return self.layers[None]

    @property
    def is_layer_wise(self) -> bool:
        return None not in self.layers

    def items(self):
        return self.layers.items()


def normalize_row(sims: Sequence[float], self_index: int) -> np.ndarray:
    """Clip similarities below at 0 and scale the row to sum to 1."""
    row = np.maximum(np.asarray(sims, dtype=np.float64), 0.0)
    if row.ndim != 1 or not 0 <= self_index < row.size:
        raise StructuralError(f"self index {self_index} invalid for a row of {row.size}")
    if not np.all(np.isfinite(row)):
        raise StructuralError("similarity row contains NaN or Inf")
    total = math.fsum(row.tolist())
    if row[self_index] <= 0.0 or total <= 0.0:
        raise AggregationInvariantError(
            f"self-similarity must be positive (got {row[self_index]!r}, row sum {total!r})"
        )
    return row / total


def similarity_weights(rows: np.ndarray, metric: str) -> np.ndarray:
    sims = similarity_rows(rows, metric)
    return np.stack([normalize_row(sims[i], i) for i in range(sims.shape[0])])


def _order_free_combination(weights_row: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_k w[k] * rows[k]`` summed in sorted order, independent of row order."""
    terms = weights_row[:, None] * rows
    return np.sort(terms, axis=0).sum(axis=0)


def _residual_update(bars: np.ndarray, taus: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.empty_like(bars)
    for i in range(bars.shape[0]):
        out[i] = bars[i] + _order_free_combination(weights[i], taus)
    return out


def _parameter_average(locals_: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.empty_like(locals_)
    for i in range(locals_.shape[0]):
        out[i] = _order_free_combination(weights[i], locals_)
    return out


def _check_models(bars: Sequence[ParameterVector], locals_: Sequence[ParameterVector]) -> None:
    if len(bars) == 0:
        raise StructuralError("aggregation needs at least one client")
    if len(bars) != len(locals_):
        raise StructuralError(f"{len(bars)} aggregated models but {len(locals_)} local models")
    ref = bars[0]
    for v in list(bars) + list(locals_):
        check_compatible(ref, v)


def _coordinate_index(dim: int, mask: TrainableMask | None) -> np.ndarray | slice:
    if mask is None:
        return slice(None)
    if mask.dim != dim:
        raise StructuralError(f"mask is for dimension {mask.dim}, models have {dim}")
    return mask.indices


def _check_frozen(bars: np.ndarray, locals_: np.ndarray, mask: TrainableMask | None) -> None:
    if mask is None or mask.is_full:
        return
    frozen = mask.frozen_indices()
    if not np.array_equal(bars[:, frozen], locals_[:, frozen]):
        raise StructuralError("frozen parameters changed during local training")


def _uniform_matrix(k: int, data_sizes: Sequence[float] | None) -> np.ndarray:
    if data_sizes is None:
        data_sizes = [1.0] * k
    sizes = np.asarray(data_sizes, dtype=np.float64)
    if sizes.shape != (k,):
        raise StructuralError(f"expected {k} data sizes, got {sizes.shape}")
    if np.any(sizes < 0) or not np.all(np.isfinite(sizes)):
        raise StructuralError("data sizes must be finite and nonnegative")
    total = math.fsum(sizes.tolist())
    if total <= 0.0:
        raise StructuralError("data sizes sum to zero")
    return np.tile(sizes / total, (k, 1))


def _aggregate_block(spec: StrategySpec, bars: np.ndarray, locals_: np.ndarray,
                     data_sizes: Sequence[float] | None) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate one coordinate block (whole model or one layer) of shape (K, n)."""
    taus = locals_ - bars
    if spec.weighting_source == "uniform":
        weights = _uniform_matrix(bars.shape[0], data_sizes)
    elif spec.weighting_source == "task_vector":
        weights = similarity_weights(taus, spec.metric)
    else:
        weights = similarity_weights(locals_, spec.metric)
    if spec.substrate == "task_vector":
        new = _residual_update(bars, taus, weights)
    else:
        new = _parameter_average(locals_, weights)
    return new, weights


def strategy_update(
    spec: StrategySpec,
    bars: Sequence[ParameterVector],
    locals_: Sequence[ParameterVector],
    data_sizes: Sequence[float] | None = None,
    mask: TrainableMask | None = None,
) -> tuple[list[ParameterVector], AggregationWeights]:
    """Apply one server aggregation step for any point of the strategy grid.

    ``weighting_source`` picks what similarities are measured on (task vectors,
    raw local parameters, or none, i.e. data-size weights). ``substrate`` picks
    what is combined: task vectors added to each client's own aggregated model,
    or local parameters averaged outright. With a mask only trainable
    coordinates take part; frozen coordinates of ``bars`` are carried over.
    """
    _check_models(bars, locals_)
    partition = bars[0].partition
    dim = bars[0].dim
    bar_arr = np.stack([b.values for b in bars])
    loc_arr = np.stack([v.values for v in locals_])
    _check_frozen(bar_arr, loc_arr, mask)
    new_arr = bar_arr.copy()
    layers: dict = {}

    if spec.granularity == "global":
        idx = _coordinate_index(dim, mask)
        new_block, w = _aggregate_block(spec, bar_arr[:, idx], loc_arr[:, idx], data_sizes)
        new_arr[:, idx] = new_block
        layers[None] = w
    else:
        trainable = np.ones(dim, dtype=bool) if mask is None else mask.as_bool()
        for name, (start, end) in zip(partition.names, partition.boundaries):
            cols = np.arange(start, end)[trainable[start:end]]
            if cols.size == 0:
                continue
            new_block, w = _aggregate_block(spec, bar_arr[:, cols], loc_arr[:, cols], data_sizes)
            new_arr[:, cols] = new_block
            layers[name] = w

    new_models = [ParameterVector(row, partition) for row in new_arr]
    return new_models, AggregationWeights(layers)


def task_vector_update(bars, locals_, metric: str = "cosine", mask: TrainableMask | None = None):
    """Personalized task-vector aggregation over the whole model."""
    return strategy_update(StrategySpec("task_vector", "task_vector", "global", metric), bars, locals_, mask=mask)


def layerwise_task_vector_update(bars, locals_, metric: str = "cosine", mask: TrainableMask | None = None):
    """Personalized task-vector aggregation with separate weights per layer."""
    return strategy_update(StrategySpec("task_vector", "task_vector", "layer_wise", metric), bars, locals_, mask=mask)


def uniform_update(bars, locals_, data_sizes=None, mask: TrainableMask | None = None) -> list[ParameterVector]:
    """Data-size weighted average of local models, sent identically to everyone."""
    new, _ = strategy_update(UNIFORM, bars, locals_, data_sizes, mask=mask)
    return new


def check_row_stochastic(weights: AggregationWeights, tol: float = ROW_SUM_TOL) -> None:
    for name, w in weights.items():
        if np.any(w < 0) or np.any(w > 1 + tol):
            raise AggregationInvariantError(f"weights outside [0, 1] in layer {name}")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > tol:
            raise AggregationInvariantError(f"weight rows do not sum to 1 in layer {name}")


def export_weights_csv(directory: str | Path, round_index: int, weights: AggregationWeights,
                       layer_names: Sequence[str] | None = None) -> list[Path]:
    """Write one CSV per round (and per layer in layer-wise mode).

    Files are ``round_RRRR.csv`` or ``round_RRRR_layer_LL.csv`` where ``LL`` is
    the layer's index in the model partition.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, w in weights.items():
        if name is None:
            path = directory / f"round_{round_index:04d}.csv"
            header = f"# round={round_index} layer=all"
        else:
            li = list(layer_names).index(name) if layer_names is not None else 0
            path = directory / f"round_{round_index:04d}_layer_{li:02d}.csv"
            header = f"# round={round_index} layer={li} name={name}"
        lines = [header] + [",".join(f"{x:.12f}" for x in row) for row in w]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written
