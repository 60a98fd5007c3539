from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from fedtv import seeding
from fedtv.client import LocalTrainConfig, cold_start, evaluate, local_update, pretrain_init
from fedtv.data import (
    ClientDataset,
    FederationConfig,
    Split,
    cluster_assignment,
    dump_dataset,
    generate_federation,
    load_dataset,
    pooled,
)
from fedtv.errors import StructuralError
from fedtv.models import Architecture
from fedtv.params import ParameterVector, TrainableMask


def numeric_grad(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


ARCHS = [
    Architecture("logistic_regression", 5, 3),
    Architecture("mlp_one_hidden", 5, 3, hidden_dim=4, activation="tanh"),
    Architecture("mlp_one_hidden", 5, 3, hidden_dim=4, activation="relu"),
]


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"{a.kind}-{a.activation}")
@pytest.mark.parametrize("mu", [0.0, 0.3])
def test_gradient_matches_finite_differences(arch, mu):
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(7, 5)), rng.integers(0, 3, size=7)
    theta = rng.normal(size=arch.dim)
    anchor = rng.normal(size=arch.dim)
    _, g = arch.loss_and_grad(theta, X, y, anchor, mu)
    num = numeric_grad(lambda t: arch.loss(t, X, y, anchor, mu), theta)
    assert np.allclose(g, num, rtol=1e-5, atol=1e-7)


def test_proximal_term_needs_anchor():
    arch = ARCHS[0]
    with pytest.raises(StructuralError):
        arch.loss_and_grad(np.zeros(arch.dim), np.zeros((1, 5)), np.array([0]), None, 0.5)


def test_uniform_logits_give_log_c_loss():
    arch = Architecture("logistic_regression", 2, 4)
    loss = arch.loss(np.zeros(arch.dim), np.ones((3, 2)), np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(4), abs=1e-15)


def test_layer_layout():
    arch = Architecture("mlp_one_hidden", 3, 2, hidden_dim=5)
    assert arch.partition.names == ("W1", "b1", "W2", "b2")
    assert arch.dim == 5 * 3 + 5 + 2 * 5 + 2


def small_client(rng, n=32, d=4, c=3, client_id=0):
    means = 3 * rng.normal(size=(c, d))
    y = rng.integers(0, c, size=n)
    X = means[y] + 0.3 * rng.normal(size=(n, d))
    split = Split(X, y)
    return ClientDataset(client_id, 0, c, split, split)


def test_learning_rate_to_zero_is_identity():
    rng = np.random.default_rng(2)
    ds = small_client(rng)
    arch = Architecture("logistic_regression", 4, 3)
    theta = cold_start(arch, 0)
    out = local_update(theta, ds, LocalTrainConfig(learning_rate=1e-14, batch_size=8), seed=1)
    assert np.allclose(out.values, theta.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["logistic_regression", "mlp_one_hidden"])
def test_full_batch_loss_decreases_monotonically(kind):
    rng = np.random.default_rng(3)
    ds = small_client(rng)
    cfg = LocalTrainConfig(learning_rate=0.05, batch_size=len(ds.train), model_kind=kind, hidden_dim=6)
    arch = cfg.architecture(4, 3)
    theta = cold_start(arch, 0)
    losses = [evaluate(theta, ds.train, arch)[1]]
    for _ in range(30):
        theta = local_update(theta, ds, cfg, seed=0)
        losses.append(evaluate(theta, ds.train, arch)[1])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_local_update_is_deterministic_in_seed():
    rng = np.random.default_rng(4)
    ds = small_client(rng)
    cfg = LocalTrainConfig(batch_size=5, epochs=2)
    theta = cold_start(cfg.architecture(4, 3), 0)
    a = local_update(theta, ds, cfg, seed=seeding.stream(0, seeding.LOCAL, 1, 1))
    b = local_update(theta, ds, cfg, seed=seeding.stream(0, seeding.LOCAL, 1, 1))
    c = local_update(theta, ds, cfg, seed=seeding.stream(0, seeding.LOCAL, 1, 2))
    assert a == b
    assert a != c


def test_local_update_respects_mask():
    rng = np.random.default_rng(5)
    ds = small_client(rng)
    cfg = LocalTrainConfig(model_kind="mlp_one_hidden", hidden_dim=3, trainable_layers=("W2", "b2"))
    arch = cfg.architecture(4, 3)
    theta = cold_start(arch, 0)
    out = local_update(theta, ds, cfg, seed=0)
    mask = cfg.mask_for(arch)
    frozen = mask.frozen_indices()
    assert np.array_equal(out.values[frozen], theta.values[frozen])
    assert not np.array_equal(out.values[mask.indices], theta.values[mask.indices])


def test_proximal_term_limits_drift():
    rng = np.random.default_rng(6)
    ds = small_client(rng)
    theta = cold_start(Architecture("logistic_regression", 4, 3), 0)
    free = local_update(theta, ds, LocalTrainConfig(epochs=5), seed=0)
    held = local_update(theta, ds, LocalTrainConfig(epochs=5, proximal_mu=5.0), seed=0)
    assert np.linalg.norm(held.values - theta.values) < np.linalg.norm(free.values - theta.values)


def test_evaluate_examples():
    arch = Architecture("logistic_regression", 2, 2)
    # logits = x (identity W, zero bias): predicts argmax of the features
    theta = ParameterVector([1, 0, 0, 1, 0, 0], arch.partition)
    split = Split(np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]]), np.array([0, 1, 1]))
    acc, _ = evaluate(theta, split, arch)
    assert acc == pytest.approx(2 / 3)  # the tie on the last row goes to class 0


def test_random_model_is_at_chance():
    arch = Architecture("logistic_regression", 10, 10)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(5000, 10))
    y = rng.integers(0, 10, size=5000)
    accs = [evaluate(cold_start(arch, s), Split(X, y), arch)[0] for s in range(20)]
    assert abs(np.mean(accs) - 0.1) < 0.02


def test_evaluate_rejects_wrong_dimension():
    arch = Architecture("logistic_regression", 2, 2)
    with pytest.raises(StructuralError):
        evaluate(ParameterVector(np.zeros(3)), Split(np.zeros((1, 2)), np.zeros(1, dtype=int)), arch)


def test_pretraining_reduces_pooled_loss():
    for seed in range(5):
        fed = generate_federation(FederationConfig(num_clients=4, num_clusters=1, seed=seed))
        cfg = LocalTrainConfig(learning_rate=0.05)
        arch = cfg.architecture(fed[0].feature_dim, fed[0].num_classes)
        seq = seeding.stream(seed, seeding.PRETRAIN)
        cold = pretrain_init(fed, cfg, 0, seed=seq)
        warm = pretrain_init(fed, cfg, 10, seed=seq)
        data = pooled(fed, "train")
        assert evaluate(warm, data, arch)[1] < evaluate(cold, data, arch)[1]


# --- synthetic federations -------------------------------------------------------

def test_cluster_assignment_is_balanced_and_contiguous():
    assert cluster_assignment(8, 2) == [0, 0, 0, 0, 1, 1, 1, 1]
    assert cluster_assignment(5, 2) == [0, 0, 0, 1, 1]
    assert cluster_assignment(3, 3) == [0, 1, 2]
    assert cluster_assignment(4, 1) == [0] * 4


@pytest.mark.parametrize("kind", ["label_flip", "rotation", "cluster_concept"])
def test_federation_is_deterministic(kind):
    cfg = FederationConfig(num_clients=4, num_clusters=2, heterogeneity_kind=kind, seed=9)
    a, b = generate_federation(cfg), generate_federation(cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.train.X, y.train.X) and np.array_equal(x.train.y, y.train.y)
        assert np.array_equal(x.test.X, y.test.X)
    c = generate_federation(dataclasses.replace(cfg, seed=10))
    assert not np.array_equal(a[0].train.X, c[0].train.X)


def test_label_flip_clusters_conflict():
    fed = generate_federation(FederationConfig(num_clients=4, num_clusters=2, samples_per_client=400, noise_std=0.1))
    # same input region, different label across clusters: the class-conditional means are permuted
    def class_means(ds):
        return np.stack([ds.train.X[ds.train.y == c].mean(axis=0) for c in range(ds.num_classes)])
    m0, m1 = class_means(fed[0]), class_means(fed[2])
    assert np.allclose(class_means(fed[0]), class_means(fed[1]), atol=0.1)
    for c in range(m0.shape[0]):
        assert np.linalg.norm(m0[c] - m1[c]) > 0.5


def test_single_cluster_and_one_per_client():
    iid = generate_federation(FederationConfig(num_clients=3, num_clusters=1))
    assert {ds.cluster_id for ds in iid} == {0}
    each = generate_federation(FederationConfig(num_clients=3, num_clusters=3))
    assert [ds.cluster_id for ds in each] == [0, 1, 2]


@pytest.mark.parametrize("kwargs", [dict(num_clients=0), dict(num_clusters=9), dict(num_classes=1),
                                    dict(heterogeneity_kind="shuffle"), dict(noise_std=-1.0)])
def test_federation_config_validation(kwargs):
    with pytest.raises(StructuralError):
        generate_federation(FederationConfig(**kwargs))


def test_dataset_dump_round_trip(tmp_path):
    ds = generate_federation(FederationConfig(num_clients=2, samples_per_client=10, test_samples_per_client=5))[1]
    loaded = load_dataset(dump_dataset(tmp_path / "c1.txt", ds))
    assert (loaded.client_id, loaded.cluster_id, loaded.num_classes) == (ds.client_id, ds.cluster_id, ds.num_classes)
    for name in ("train", "test"):
        assert np.array_equal(getattr(loaded, name).X, getattr(ds, name).X)
        assert np.array_equal(getattr(loaded, name).y, getattr(ds, name).y)


def test_mask_from_unknown_layer():
    arch = Architecture("logistic_regression", 2, 2)
    with pytest.raises(StructuralError):
        TrainableMask.from_layers(arch.partition, ["W9"])
