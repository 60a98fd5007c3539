from __future__ import annotations

import numpy as np

from fedtv.params import LayerPartition, ParameterVector


def two_layer_partition(d: int, split: int | None = None) -> LayerPartition:
    split = d // 2 if split is None else split
    return LayerPartition.from_sizes(["layer0", "layer1"], [split, d - split])


def random_fixture(rng: np.random.Generator, k: int, d: int, partition: LayerPartition | None = None):
    """Aggregated models and local models with task vectors of mixed signs.

    Task vectors are drawn around two opposed directions so that clipping of
    negative similarities is exercised as well as positive weights.
    """
    partition = partition or two_layer_partition(d)
    bars = rng.normal(size=(k, d))
    centers = rng.normal(size=(2, d))
    taus = np.stack([centers[rng.integers(2)] * rng.choice([-1, 1]) + 0.7 * rng.normal(size=d) for _ in range(k)])
    taus *= rng.uniform(0.01, 3.0, size=(k, 1))
    as_vectors = lambda arr: [ParameterVector(row, partition) for row in arr]  # noqa: E731
    return as_vectors(bars), as_vectors(bars + taus)


def stack(models) -> np.ndarray:
    return np.stack([m.values for m in models])
