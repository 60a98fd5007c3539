"""Synthetic heterogeneous federations.

Clients are split into contiguous clusters (sizes differ by at most one).
Clients in a cluster draw from the same distribution; clusters differ by

* ``label_flip``: a shared Gaussian class-mixture, relabelled by a fixed
  per-cluster permutation (cluster 0 keeps the identity, others get
  derangements, so every class is in conflict),
* ``rotation``: the same mixture with a per-cluster orthogonal rotation of
  the features (cluster 0 unrotated),
* ``cluster_concept``: standard-normal features labelled by a per-cluster
  random linear concept.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StructuralError

HETEROGENEITY_KINDS = ("label_flip", "rotation", "cluster_concept")
DATASET_FORMAT = "fedtv-dataset-v1"


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 8
    num_clusters: int = 2
    samples_per_client: int = 64
    feature_dim: int = 8
    num_classes: int = 4
    heterogeneity_kind: str = "label_flip"
    noise_std: float = 1.0
    seed: int = 0
    test_samples_per_client: int = 200

    def validate(self) -> None:
        if self.num_clients < 1:
            raise StructuralError("num_clients must be >= 1")
        if not 1 <= self.num_clusters <= self.num_clients:
            raise StructuralError("num_clusters must be in [1, num_clients]")
        if self.samples_per_client < 1 or self.test_samples_per_client < 1:
            raise StructuralError("sample counts must be >= 1")
        if self.feature_dim < 1:
            raise StructuralError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise StructuralError("num_classes must be >= 2")
        if self.heterogeneity_kind not in HETEROGENEITY_KINDS:
            raise StructuralError(f"heterogeneity_kind must be one of {HETEROGENEITY_KINDS}")
        if self.noise_std < 0:
            raise StructuralError("noise_std must be nonnegative")


@dataclass(frozen=True)
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    cluster_id: int
    num_classes: int
    train: Split
    test: Split

    @property
    def feature_dim(self) -> int:
        return int(self.train.X.shape[1])


def cluster_assignment(num_clients: int, num_clusters: int) -> list[int]:
    """Contiguous blocks: client k belongs to cluster ``k * C // K``."""
    return [k * num_clusters // num_clients for k in range(num_clients)]


def _derangement(n: int, rng: np.random.Generator, taken: list[np.ndarray]) -> np.ndarray:
    for _ in range(10_000):
        perm = rng.permutation(n)
        if np.any(perm == np.arange(n)):
            continue
        if any(np.array_equal(perm, t) for t in taken) and len(taken) < _num_derangements(n):
            continue
        return perm
    raise StructuralError(f"could not draw a label derangement for {n} classes")


def _num_derangements(n: int) -> int:
    a, b = 1, 0
    for i in range(2, n + 1):
        a, b = b, (i - 1) * (a + b)
    return b if n >= 2 else 0


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class _ClusterSampler:
    def __init__(self, cfg: FederationConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, c = cfg.feature_dim, cfg.num_classes
        kind = cfg.heterogeneity_kind
        self.means = rng.normal(size=(c, d))
        self.perms: list[np.ndarray] = []
        self.rotations: list[np.ndarray] = []
        self.concepts: list[np.ndarray] = []
        for cluster in range(cfg.num_clusters):
            if kind == "label_flip":
                perm = np.arange(c) if cluster == 0 else _derangement(c, rng, self.perms[1:])
                self.perms.append(perm)
            elif kind == "rotation":
                self.rotations.append(np.eye(d) if cluster == 0 else _random_rotation(d, rng))
            else:
                self.concepts.append(rng.normal(size=(c, d)))

    def sample(self, cluster: int, n: int, rng: np.random.Generator) -> Split:
        cfg = self.cfg
        d, c = cfg.feature_dim, cfg.num_classes
        if cfg.heterogeneity_kind == "cluster_concept":
            X = rng.normal(size=(n, d))
            scores = X @ self.concepts[cluster].T + cfg.noise_std * rng.normal(size=(n, c))
            y = np.argmax(scores, axis=1)
            return Split(X, y.astype(np.int64))
        base = np.arange(n) % c
        base = base[rng.permutation(n)]
        X = self.means[base] + cfg.noise_std * rng.normal(size=(n, d))
        if cfg.heterogeneity_kind == "rotation":
            return Split(X @ self.rotations[cluster].T, base.astype(np.int64))
        return Split(X, self.perms[cluster][base].astype(np.int64))


def generate_federation(cfg: FederationConfig) -> list[ClientDataset]:
    """Deterministic in ``cfg.seed``: identical configs give bit-identical data."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    structure_seq, *client_seqs = root.spawn(cfg.num_clients + 1)
    sampler = _ClusterSampler(cfg, np.random.default_rng(structure_seq))
    clusters = cluster_assignment(cfg.num_clients, cfg.num_clusters)
    out = []
    for k, seq in enumerate(client_seqs):
        rng = np.random.default_rng(seq)
        train = sampler.sample(clusters[k], cfg.samples_per_client, rng)
        test = sampler.sample(clusters[k], cfg.test_samples_per_client, rng)
        out.append(ClientDataset(k, clusters[k], cfg.num_classes, train, test))
    return out


def pooled(datasets: list[ClientDataset], split: str = "train") -> Split:
    parts = [getattr(ds, split) for ds in datasets]
    return Split(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]))


def dump_dataset(path: str | Path, ds: ClientDataset) -> Path:
    """Text dump: ``#`` header lines, then ``@train``/``@test`` sections of
    ``label f1 f2 ...`` rows with floats in round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# {DATASET_FORMAT}",
        f"# client_id={ds.client_id} cluster_id={ds.cluster_id} num_classes={ds.num_classes} feature_dim={ds.feature_dim}",
    ]
    for name in ("train", "test"):
        split = getattr(ds, name)
        lines.append(f"@{name}")
        for label, row in zip(split.y, split.X):
            lines.append(" ".join([str(int(label))] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path: str | Path) -> ClientDataset:
    header: dict[str, str] = {}
    rows: dict[str, list[list[str]]] = {"train": [], "test": []}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    header[key] = value
            continue
        if line.startswith("@"):
            current = line[1:].strip()
            if current not in rows:
                raise StructuralError(f"{path}:{lineno}: unknown section {current!r}")
            continue
        if current is None:
            raise StructuralError(f"{path}:{lineno}: sample before any section marker")
        rows[current].append(line.split())
    d = int(header["feature_dim"])

    def to_split(items: list[list[str]]) -> Split:
        y = np.array([int(r[0]) for r in items], dtype=np.int64)
        X = np.array([[float(v) for v in r[1:]] for r in items], dtype=np.float64).reshape(len(items), d)
        return Split(X, y)

    return ClientDataset(
        int(header["client_id"]), int(header["cluster_id"]), int(header["num_classes"]),
        to_split(rows["train"]), to_split(rows["test"]),
    )
