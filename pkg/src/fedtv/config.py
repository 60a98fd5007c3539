"""YAML experiment configs.

Top-level keys mirror :class:`~fedtv.orchestrator.ExperimentConfig`; the
``federation``, ``local`` and ``strategy`` sections mirror their dataclasses
field for field (the federation seed is derived from the master ``seed``).
An optional ``ablation`` section feeds ``fedtv ablate``. Missing keys take the
defaults below; unknown or duplicate keys are errors.

Example::

    seed: 0
    rounds: 20
    pretrain_epochs: 20
    eval_every: 1
    federation:
      num_clients: 8
      num_clusters: 2
      heterogeneity_kind: label_flip
    local:
      learning_rate: 0.05
    strategy: task_vector        # a preset name, or a mapping of the four fields
    ablation:
      seeds: [0, 1, 2, 3, 4]
      client_counts: [4, 8, 16]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .aggregation import GRANULARITIES, PRESETS, SUBSTRATES, WEIGHTING_SOURCES
from .client import LocalTrainConfig
from .data import HETEROGENEITY_KINDS, FederationConfig
from .errors import ConfigError, StructuralError
from .models import ACTIVATIONS, MODEL_KINDS
from .orchestrator import ExperimentConfig
from .task_vector import METRICS

DEFAULT_FEDERATION = FederationConfig(
    num_clients=8, num_clusters=2, samples_per_client=64, feature_dim=8, num_classes=4,
    heterogeneity_kind="label_flip", noise_std=1.0, test_samples_per_client=200,
)
DEFAULT_LOCAL = LocalTrainConfig(epochs=1, learning_rate=0.05, batch_size=16)
DEFAULT_EXPERIMENT = ExperimentConfig(
    federation=DEFAULT_FEDERATION, local=DEFAULT_LOCAL, strategy=PRESETS["task_vector"],
    rounds=20, pretrain_epochs=20, eval_every=1, seed=0,
)


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] | None = None
    client_counts: tuple[int, ...] = (4, 8, 16)


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = DEFAULT_EXPERIMENT
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def seeds(self) -> tuple[int, ...]:
        return self.ablation.seeds if self.ablation.seeds else (self.experiment.seed,)


def desk_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """The default clustered desk-scale experiment, with top-level overrides."""
    return dataclasses.replace(DEFAULT_EXPERIMENT, seed=seed, **overrides)


# field -> (kind, constraint, message); kinds: int, float, str, choice tuple, 'names', 'ints'
_Positive = (lambda v: v >= 1, "must be >= 1")
_NonNeg = (lambda v: v >= 0, "must be >= 0")
_PosReal = (lambda v: v > 0, "must be > 0")

_TOP = {
    "seed": ("int", *_NonNeg),
    "rounds": ("int", *_Positive),
    "pretrain_epochs": ("int", *_NonNeg),
    "eval_every": ("int", *_Positive),
}
_FEDERATION = {
    "num_clients": ("int", *_Positive),
    "num_clusters": ("int", *_Positive),
    "samples_per_client": ("int", *_Positive),
    "test_samples_per_client": ("int", *_Positive),
    "feature_dim": ("int", *_Positive),
    "num_classes": ("int", lambda v: v >= 2, "must be >= 2"),
    "heterogeneity_kind": (HETEROGENEITY_KINDS, None, None),
    "noise_std": ("float", *_NonNeg),
}
_LOCAL = {
    "epochs": ("int", *_Positive),
    "learning_rate": ("float", *_PosReal),
    "batch_size": ("int", *_Positive),
    "proximal_mu": ("float", *_NonNeg),
    "model_kind": (MODEL_KINDS, None, None),
    "hidden_dim": ("int", *_Positive),
    "activation": (ACTIVATIONS, None, None),
    "trainable_layers": ("names", None, None),
}
_STRATEGY = {
    "weighting_source": (WEIGHTING_SOURCES, None, None),
    "substrate": (SUBSTRATES, None, None),
    "granularity": (GRANULARITIES, None, None),
    "metric": (METRICS, None, None),
}
_ABLATION = {
    "seeds": ("ints", lambda v: all(s >= 0 for s in v) and len(v) > 0, "must be a nonempty list of seeds >= 0"),
    "client_counts": ("ints", lambda v: all(k >= 1 for k in v) and len(v) > 0, "must be a nonempty list of counts >= 1"),
}
_SECTIONS = {"federation": _FEDERATION, "local": _LOCAL, "strategy": _STRATEGY, "ablation": _ABLATION}


class _LineMap:
    """Line numbers of every key path in a YAML document (1-based)."""

    def __init__(self, text: str):
        self.lines: dict[str, int] = {}
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, prefix: str) -> None:
        if not isinstance(node, yaml.MappingNode):
            return
        seen = set()
        for key_node, value_node in node.value:
            key = str(key_node.value)
            path = f"{prefix}.{key}" if prefix else key
            line = key_node.start_mark.line + 1
            if key in seen:
                raise ConfigError("duplicate key", field=path, line=line)
            seen.add(key)
            self.lines[path] = line
            self._walk(value_node, path)

    def get(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rpartition(".")[0]
        return None


def _check_value(path: str, value: Any, spec, lines: _LineMap) -> Any:
    kind, check, message = spec
    line = lines.get(path)
    if isinstance(kind, tuple):
        if value not in kind:
            raise ConfigError(f"must be one of {list(kind)}, got {value!r}", field=path, line=line)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"must be an integer, got {value!r}", field=path, line=line)
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"must be a number, got {value!r}", field=path, line=line)
        value = float(value)
    elif kind == "names":
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError("must be a list of layer names or null", field=path, line=line)
        return tuple(value)
    elif kind == "ints":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError("must be a list of integers", field=path, line=line)
        value = tuple(value)
    if check is not None and not check(value):
        raise ConfigError(f"{message}, got {value!r}", field=path, line=line)
    return value


def _section(raw: Any, name: str, schema: dict, lines: _LineMap) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("must be a mapping", field=name, line=lines.get(name))
    out = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in schema:
            raise ConfigError(f"unknown key (allowed: {sorted(schema)})", field=path, line=lines.get(path))
        out[key] = _check_value(path, value, schema[key], lines)
    return out


def parse_config(text: str) -> RunConfig:
    try:
        lines = _LineMap(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {exc}", line=None if mark is None else mark.line + 1) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")

    top: dict[str, Any] = {}
    sections: dict[str, dict] = {}
    strategy_preset = None
    for key, value in raw.items():
        if key in _TOP:
            top[key] = _check_value(key, value, _TOP[key], lines)
        elif key == "strategy" and isinstance(value, str):
            if value not in PRESETS:
                raise ConfigError(f"unknown strategy preset {value!r} (presets: {sorted(PRESETS)})",
                                  field="strategy", line=lines.get("strategy"))
            strategy_preset = PRESETS[value]
        elif key in _SECTIONS:
            sections[key] = _section(value, key, _SECTIONS[key], lines)
        else:
            allowed = sorted(list(_TOP) + list(_SECTIONS))
            raise ConfigError(f"unknown key (allowed: {allowed})", field=str(key), line=lines.get(str(key)))

    base = DEFAULT_EXPERIMENT
    try:
        federation = dataclasses.replace(base.federation, **sections.get("federation", {}))
        federation.validate()
    except StructuralError as exc:
        raise ConfigError(str(exc), field="federation", line=lines.get("federation")) from None
    try:
        local = dataclasses.replace(base.local, **sections.get("local", {}))
        local.validate()
    except StructuralError as exc:
        raise ConfigError(str(exc), field="local", line=lines.get("local")) from None
    strategy = strategy_preset or dataclasses.replace(base.strategy, **sections.get("strategy", {}))

    if local.trainable_layers is not None:
        arch = local.architecture(federation.feature_dim, federation.num_classes)
        unknown = [n for n in local.trainable_layers if n not in arch.partition.names]
        if unknown:
            raise ConfigError(f"unknown layers {unknown}; model has {list(arch.partition.names)}",
                              field="local.trainable_layers", line=lines.get("local.trainable_layers"))

    experiment = dataclasses.replace(base, federation=federation, local=local, strategy=strategy, **top)
    ablation = AblationConfig(**sections.get("ablation", {}))
    return RunConfig(experiment, ablation)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text)


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config as plain data (same layout as the YAML file)."""
    fed = dataclasses.asdict(cfg.federation)
    fed.pop("seed")
    local = dataclasses.asdict(cfg.local)
    if local["trainable_layers"] is not None:
        local["trainable_layers"] = list(local["trainable_layers"])
    return {
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "pretrain_epochs": cfg.pretrain_epochs,
        "eval_every": cfg.eval_every,
        "federation": fed,
        "local": local,
        "strategy": dataclasses.asdict(cfg.strategy),
    }


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = experiment_to_dict(cfg.experiment)
    out["ablation"] = {
        "seeds": list(cfg.seeds()),
        "client_counts": list(cfg.ablation.client_counts),
    }
    return out
