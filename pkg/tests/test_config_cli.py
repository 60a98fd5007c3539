from __future__ import annotations

import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from fedtv.cli import ablation_settings, build_report, convergence_round, main
from fedtv.config import DEFAULT_EXPERIMENT, RunConfig, parse_config
from fedtv.errors import ConfigError
from fedtv.params import load_checkpoint
from fedtv.task_vector import read_matrix_csv

TINY = """\
seed: 3
rounds: 3
pretrain_epochs: 2
federation:
  num_clients: 2
  num_clusters: 1
  samples_per_client: 16
  test_samples_per_client: 20
  feature_dim: 3
  num_classes: 2
local:
  learning_rate: 0.1
  batch_size: 8
strategy: task_vector
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


# --- parsing -------------------------------------------------------------------------

def test_empty_config_gives_defaults():
    assert parse_config("").experiment == DEFAULT_EXPERIMENT


def test_full_config_parses():
    cfg = parse_config(TINY + "ablation:\n  seeds: [0, 1]\n  client_counts: [2, 4]\n")
    exp = cfg.experiment
    assert (exp.seed, exp.rounds, exp.federation.num_clients, exp.local.batch_size) == (3, 3, 2, 8)
    assert exp.strategy.label == "task_vector/task_vector/global/cosine"
    assert cfg.seeds() == (0, 1) and cfg.ablation.client_counts == (2, 4)


def test_strategy_mapping():
    cfg = parse_config("strategy:\n  weighting_source: parameter\n  granularity: layer_wise\n  metric: l2\n")
    s = cfg.experiment.strategy
    assert (s.weighting_source, s.substrate, s.granularity, s.metric) == ("parameter", "task_vector", "layer_wise", "l2")


@pytest.mark.parametrize("text, field, line", [
    ("federation:\n  num_clients: 0\n", "federation.num_clients", 2),
    ("rounds: 5\nfederation:\n  num_clusterz: 2\n", "federation.num_clusterz", 3),
    ("seed: 1\nrounds: -1\n", "rounds", 2),
    ("local:\n  learning_rate: fast\n", "local.learning_rate", 2),
    ("strategy:\n  metric: dot\n", "strategy.metric", 2),
    ("strategy: fancy\n", "strategy", 1),
    ("colour: red\n", "colour", 1),
    ("seed: 1\nseed: 2\n", "seed", 2),
    ("federation:\n  num_clients: 2\n  num_clusters: 3\n", "federation", 1),
    ("local:\n  trainable_layers: [W, Q]\n", "local.trainable_layers", 2),
])
def test_invalid_configs_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field and info.value.line == line
    assert f"field '{field}'" in str(info.value) and f"line {line}" in str(info.value)


def test_yaml_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("federation: [1, 2\n")


# --- CLI ----------------------------------------------------------------------------

def test_run_writes_artifacts_and_manifest(tmp_path):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 1 + 3 * 2
    assert sorted(p.name for p in (out / "weights").iterdir()) == [f"round_000{t}.csv" for t in (1, 2, 3)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["num_clients"], manifest["rounds"], manifest["seed"]) == (2, 3, 3)
    assert not (out / "RUN_INCOMPLETE").exists()
    model, mask = load_checkpoint(out / "checkpoints" / "client_000.bin")
    assert model.dim == 3 * 2 + 2 and mask is None
    _, w = read_matrix_csv(out / "weights" / "round_0003.csv")
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_run_is_byte_identical(tmp_path):
    cfg = write(tmp_path, TINY)
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    for ckpt in ("client_001.bin", "aggregated_000.bin"):
        assert (tmp_path / "a" / "checkpoints" / ckpt).read_bytes() == (tmp_path / "b" / "checkpoints" / ckpt).read_bytes()


def test_seed_override_changes_results(tmp_path):
    cfg = write(tmp_path, TINY)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--quiet"])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--quiet", "--seed", "4"])
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 4
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_report_round_trips_run_settings(tmp_path, capsys):
    cfg = write(tmp_path, TINY.replace("strategy: task_vector", "strategy: uniform"))
    out = tmp_path / "run"
    main(["run", "--config", str(cfg), "--out", str(out), "--quiet"])
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "clients K=2  rounds T=3  strategy=uniform/parameter/global  seed=3" in text
    assert "final mean accuracy" in text
    r = int(text.split("convergence round (99% of final mean accuracy): ")[1].split()[0])
    assert 1 <= r <= 3


def test_report_on_empty_directory_fails(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 3
    assert "manifest.json" in capsys.readouterr().err


def test_invalid_config_exits_2_with_field(tmp_path, capsys):
    cfg = write(tmp_path, "federation:\n  num_clients: 0\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "federation.num_clients" in err and "line 2" in err
    assert not (out / "manifest.json").exists()


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_negative_seed_override_exits_2(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "-1"]) == 2


def test_console_entry_point_exit_code(tmp_path):
    cfg = write(tmp_path, "rounds: 0\n")
    proc = subprocess.run([sys.executable, "-m", "fedtv.cli", "run", "--config", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "rounds" in proc.stderr


def test_simgrid_outputs(tmp_path):
    text = TINY.replace("num_clients: 2", "num_clients: 4").replace("num_clusters: 1", "num_clusters: 2")
    cfg = write(tmp_path, text)
    out = tmp_path / "grid"
    assert main(["simgrid", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    for name in ("similarity_parameter.csv", "similarity_task_vector.csv"):
        header, m = read_matrix_csv(out / name)
        assert m.shape == (4, 4) and np.array_equal(np.diag(m), np.ones(4)) and header["metric"] == "cosine"
    assert (out / "clusters.csv").read_text().splitlines()[1:] == ["0,0", "1,0", "2,1", "3,1"]


@pytest.mark.parametrize("axis, names", [
    ("metric", ["l2", "pearson", "cosine"]),
    ("strategy", ["param/param", "param/vector", "vector/vector"]),
    ("clients", ["K=2", "K=3"]),
])
def test_ablate_rows(tmp_path, axis, names):
    cfg = write(tmp_path, TINY + "ablation:\n  seeds: [0, 1]\n  client_counts: [2, 3]\n")
    out = tmp_path / axis
    assert main(["ablate", "--config", str(cfg), "--out", str(out), "--axis", axis, "--quiet"]) == 0
    lines = (out / f"ablation_{axis}.csv").read_text().splitlines()
    assert lines[0] == "setting,mean_accuracy,seed_0,seed_1"
    assert [line.split(",")[0] for line in lines[1:]] == names


def test_ablation_clients_caps_cluster_count():
    cfg = parse_config("federation:\n  num_clusters: 2\nablation:\n  client_counts: [1, 4]\n")
    settings = ablation_settings(cfg, "clients")
    assert [s.federation.num_clusters for _, s in settings] == [1, 2]


def test_convergence_round():
    assert convergence_round([1, 2, 3, 4], [0.2, 0.5, 0.9, 0.9]) == 3
    assert convergence_round([1], [0.5]) == 1


def test_report_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_report(tmp_path)


def test_run_config_default_seeds():
    assert RunConfig().seeds() == (0,)
