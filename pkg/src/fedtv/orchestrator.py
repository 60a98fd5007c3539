"""Round loop: send each client its aggregated model, train locally, aggregate.

All clients take part in every round. The server keeps one aggregated model
per client between rounds and never rebuilds it from client uploads.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import seeding
from .aggregation import AggregationWeights, StrategySpec, UNIFORM, strategy_update
from .client import LocalTrainConfig, architecture_for, evaluate, local_update, pretrain_init
from .data import ClientDataset, FederationConfig, generate_federation, pooled
from .errors import StructuralError, TrainingError
from .params import ParameterVector, TrainableMask
from .task_vector import similarity_rows

METRICS_COLUMNS = ("round", "client_id", "accuracy", "loss", "aggregated_accuracy", "aggregated_loss")
TIMINGS_COLUMNS = ("round", "client_id", "client_time", "server_time")
FLOAT_FORMAT = "{:.6f}"


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    strategy: StrategySpec = field(default_factory=StrategySpec)
    rounds: int = 20
    pretrain_epochs: int = 20
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1:
            raise StructuralError("rounds must be >= 1")
        if self.eval_every < 1:
            raise StructuralError("eval_every must be >= 1")
        if self.pretrain_epochs < 0:
            raise StructuralError("pretrain_epochs must be >= 0")
        if self.seed < 0:
            raise StructuralError("seed must be >= 0")
        self.federation.validate()
        self.local.validate()


@dataclass
class FederationState:
    aggregated: list[ParameterVector]
    local: list[ParameterVector] | None = None
    round: int = 0

    @classmethod
    def fresh(cls, theta_pre: ParameterVector, num_clients: int) -> FederationState:
        return cls([theta_pre] * num_clients, None, 0)


@dataclass(frozen=True)
class RoundRecord:
    """Metrics for one round. Accuracies are ``None`` on rounds that were not evaluated."""

    round: int
    weights: AggregationWeights
    server_time: float
    client_times: tuple[float, ...]
    accuracies: tuple[float, ...] | None = None
    losses: tuple[float, ...] | None = None
    aggregated_accuracies: tuple[float, ...] | None = None
    aggregated_losses: tuple[float, ...] | None = None
    global_accuracy: float | None = None

    @property
    def num_clients(self) -> int:
        return len(self.client_times)

    @property
    def evaluated(self) -> bool:
        return self.accuracies is not None

    @property
    def mean_accuracy(self) -> float | None:
        return None if self.accuracies is None else float(np.mean(self.accuracies))

    @property
    def mean_aggregated_accuracy(self) -> float | None:
        return None if self.aggregated_accuracies is None else float(np.mean(self.aggregated_accuracies))


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    models: list[ParameterVector]
    aggregated: list[ParameterVector]
    theta_pre: ParameterVector
    datasets: list[ClientDataset]
    config: ExperimentConfig

    @property
    def final_mean_accuracy(self) -> float:
        return [r for r in self.records if r.evaluated][-1].mean_accuracy


def _is_global_model(spec: StrategySpec) -> bool:
    return spec.weighting_source == "uniform" and spec.substrate == "parameter"


ClientSeed = Callable[[int, int], np.random.SeedSequence]


def default_client_seed(cfg: ExperimentConfig) -> ClientSeed:
    return lambda client_id, round_index: seeding.stream(cfg.seed, seeding.LOCAL, client_id, round_index)


def run_round(state: FederationState, datasets: Sequence[ClientDataset], cfg: ExperimentConfig, *,
              evaluate_now: bool = True, mask: TrainableMask | None = None,
              client_seed: ClientSeed | None = None) -> tuple[FederationState, RoundRecord]:
    """One communication round; returns the new state and its record.

    ``state`` is left untouched. By default client ``i`` in round ``t`` draws
    its batch order from the ``local`` seed stream at ``(i, t)``.
    """
    if len(state.aggregated) != len(datasets):
        raise StructuralError(f"{len(state.aggregated)} aggregated models for {len(datasets)} clients")
    round_index = state.round + 1
    local_cfg = cfg.local
    arch = architecture_for(local_cfg, datasets[0])
    if mask is None:
        mask = local_cfg.mask_for(arch)

    client_seed = client_seed or default_client_seed(cfg)
    locals_: list[ParameterVector] = []
    client_times: list[float] = []
    for i, (bar, ds) in enumerate(zip(state.aggregated, datasets)):
        t0 = time.perf_counter()
        try:
            theta = local_update(bar, ds, local_cfg, anchor=bar, seed=client_seed(i, round_index), mask=mask)
        except TrainingError as exc:
            raise TrainingError(str(exc), client_id=i, round_index=round_index) from exc
        client_times.append(time.perf_counter() - t0)
        locals_.append(theta)

    t0 = time.perf_counter()
    sizes = [len(ds.train) for ds in datasets]
    new_bars, weights = strategy_update(cfg.strategy, state.aggregated, locals_, sizes, mask=mask)
    server_time = time.perf_counter() - t0

    extra = {}
    if evaluate_now:
        acc, loss = zip(*(evaluate(m, ds.test, arch) for m, ds in zip(locals_, datasets)))
        bar_acc, bar_loss = zip(*(evaluate(m, ds.test, arch) for m, ds in zip(new_bars, datasets)))
        extra = dict(accuracies=acc, losses=loss, aggregated_accuracies=bar_acc, aggregated_losses=bar_loss)
        if _is_global_model(cfg.strategy):
            extra["global_accuracy"] = evaluate(new_bars[0], pooled(list(datasets), "test"), arch)[0]

    record = RoundRecord(round_index, weights, server_time, tuple(client_times), **extra)
    return FederationState(new_bars, locals_, round_index), record


def run_federation(datasets: Sequence[ClientDataset], theta_pre: ParameterVector, cfg: ExperimentConfig, *,
                   client_seed: ClientSeed | None = None,
                   trace: list[FederationState] | None = None) -> tuple[FederationState, list[RoundRecord]]:
    """Run ``cfg.rounds`` rounds from ``theta_pre``. Pass a list as ``trace`` to
    collect the state after every round."""
    state = FederationState.fresh(theta_pre, len(datasets))
    records = []
    for t in range(1, cfg.rounds + 1):
        evaluate_now = t % cfg.eval_every == 0 or t == cfg.rounds
        state, rec = run_round(state, datasets, cfg, evaluate_now=evaluate_now, client_seed=client_seed)
        records.append(rec)
        if trace is not None:
            trace.append(state)
    return state, records


def prepare(cfg: ExperimentConfig) -> tuple[list[ClientDataset], ParameterVector]:
    """Generate the federation and pretrain the shared initialization."""
    cfg.validate()
    fed_cfg = replace(cfg.federation, seed=seeding.data_seed(cfg.seed))
    datasets = generate_federation(fed_cfg)
    theta_pre = pretrain_init(datasets, cfg.local, cfg.pretrain_epochs, seed=seeding.stream(cfg.seed, seeding.PRETRAIN))
    return datasets, theta_pre


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    datasets, theta_pre = prepare(cfg)
    state, records = run_federation(datasets, theta_pre, cfg)
    return ExperimentResult(records, state.local, state.aggregated, theta_pre, datasets, cfg)


def run_independent(datasets: Sequence[ClientDataset], theta_pre: ParameterVector,
                    cfg: ExperimentConfig) -> list[ParameterVector]:
    """Each client trains alone from ``theta_pre`` for the same rounds x epochs budget."""
    arch = architecture_for(cfg.local, datasets[0])
    mask = cfg.local.mask_for(arch)
    models = []
    for i, ds in enumerate(datasets):
        theta = theta_pre
        for t in range(1, cfg.rounds + 1):
            theta = local_update(theta, ds, cfg.local, anchor=theta, seed=seeding.stream(cfg.seed, seeding.LOCAL, i, t), mask=mask)
        models.append(theta)
    return models


@dataclass(frozen=True)
class ClusterComparison:
    cluster_id: int
    joint_accuracy: float
    independent_accuracy: float


def compare_joint_vs_independent(cfg: ExperimentConfig, *, joint_model: str = "local") -> list[ClusterComparison]:
    """Per-cluster accuracy of uniform federation versus isolated local training.

    By default the joint arm is scored like every other personalized result:
    each client's model after its final local update. ``joint_model="global"``
    scores the shared aggregated model instead.
    """
    if joint_model not in ("global", "local"):
        raise ValueError("joint_model must be 'global' or 'local'")
    datasets, theta_pre = prepare(cfg)
    arch = architecture_for(cfg.local, datasets[0])
    joint_cfg = replace(cfg, strategy=UNIFORM)
    state, _ = run_federation(datasets, theta_pre, joint_cfg)
    joint_models = state.aggregated if joint_model == "global" else state.local
    independent = run_independent(datasets, theta_pre, cfg)

    out = []
    for c in sorted({ds.cluster_id for ds in datasets}):
        members = [i for i, ds in enumerate(datasets) if ds.cluster_id == c]
        joint = np.mean([evaluate(joint_models[i], datasets[i].test, arch)[0] for i in members])
        indep = np.mean([evaluate(independent[i], datasets[i].test, arch)[0] for i in members])
        out.append(ClusterComparison(c, float(joint), float(indep)))
    return out


def similarity_grid(exp: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Pretrain, fine-tune every client once from the shared start, and return
    cosine matrices of the fine-tuned parameters and of the task vectors."""
    datasets, theta_pre = prepare(exp)
    tuned = [
        local_update(theta_pre, ds, exp.local, seed=seeding.stream(exp.seed, seeding.LOCAL, i, 1))
        for i, ds in enumerate(datasets)
    ]
    params = np.stack([m.values for m in tuned])
    taus = params - theta_pre.values
    return similarity_rows(params, "cosine"), similarity_rows(taus, "cosine"), [ds.cluster_id for ds in datasets]


def write_metrics(path: str | Path, records: Sequence[RoundRecord]) -> Path:
    """Per-client evaluation rows. Deterministic: contains no timings."""
    lines = [",".join(METRICS_COLUMNS)]
    f = FLOAT_FORMAT.format
    for rec in records:
        if not rec.evaluated:
            continue
        for i in range(rec.num_clients):
            lines.append(",".join([str(rec.round), str(i), f(rec.accuracies[i]), f(rec.losses[i]),
                                   f(rec.aggregated_accuracies[i]), f(rec.aggregated_losses[i])]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_timings(path: str | Path, records: Sequence[RoundRecord]) -> Path:
    lines = [",".join(TIMINGS_COLUMNS)]
    for rec in records:
        for i, ct in enumerate(rec.client_times):
            lines.append(f"{rec.round},{i},{ct:.6f},{rec.server_time:.6f}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
