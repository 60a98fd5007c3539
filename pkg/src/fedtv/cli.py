"""Command line: ``fedtv {run,simgrid,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import PARAM_WEIGHT_PARAM_AGG, PARAM_WEIGHT_VECTOR_AGG, PERSONALIZED, export_weights_csv
from .config import RunConfig, load_config, run_config_to_dict
from .errors import ConfigError, FedTVError
from .orchestrator import ExperimentConfig, run_experiment, similarity_grid, write_metrics, write_timings
from .params import save_checkpoint
from .task_vector import export_similarity_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"
INCOMPLETE_MARKER = "RUN_INCOMPLETE"
FLOAT = "{:.6f}"

ABLATION_AXES = ("metric", "strategy", "clients")


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed override must be >= 0", field="seed")
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seed=args.seed))
    return cfg


def _write_manifest(out: Path, payload: dict) -> Path:
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST)
    return out / MANIFEST


def _begin(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).unlink(missing_ok=True)
    (out / INCOMPLETE_MARKER).write_text("run started; no manifest means the artifacts here are partial\n")


def _finish(out: Path, args, cfg: RunConfig, command: str, artifacts: list[Path], extra: dict | None = None) -> None:
    missing = [p for p in artifacts if not p.exists()]
    if missing:
        raise FedTVError(f"artifacts missing at end of run: {missing}")
    exp = cfg.experiment
    payload = {
        "tool": "fedtv",
        "version": __version__,
        "command": command,
        "config_path": str(Path(args.config).resolve()),
        "seed": exp.seed,
        "output_dir": str(out.resolve()),
        "num_clients": exp.federation.num_clients,
        "rounds": exp.rounds,
        "strategy": exp.strategy.label,
        "resolved_config": run_config_to_dict(cfg),
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
    }
    if extra:
        payload.update(extra)
    (out / INCOMPLETE_MARKER).unlink(missing_ok=True)
    _write_manifest(out, payload)


def cmd_run(args) -> int:
    cfg = _load(args)
    exp = cfg.experiment
    out = Path(args.out)
    _begin(out)
    result = run_experiment(exp)
    artifacts = [write_metrics(out / "metrics.csv", result.records), write_timings(out / "timings.csv", result.records)]
    names = result.theta_pre.partition.names
    for rec in result.records:
        artifacts += export_weights_csv(out / "weights", rec.round, rec.weights, names)
    mask = exp.local.mask_for(exp.local.architecture(exp.federation.feature_dim, exp.federation.num_classes))
    for i, (model, bar) in enumerate(zip(result.models, result.aggregated)):
        artifacts += save_checkpoint(out / "checkpoints" / f"client_{i:03d}.bin", model, mask)
        artifacts += save_checkpoint(out / "checkpoints" / f"aggregated_{i:03d}.bin", bar, mask)
    artifacts += save_checkpoint(out / "checkpoints" / "pretrained.bin", result.theta_pre, mask)
    _finish(out, args, cfg, "run", artifacts, {"final_mean_accuracy": round(result.final_mean_accuracy, 6)})
    if not args.quiet:
        print(f"final mean accuracy {FLOAT.format(result.final_mean_accuracy)} over {len(result.models)} clients; artifacts in {out}")
    return EXIT_OK


def cmd_simgrid(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _begin(out)
    param_sim, tv_sim, clusters = similarity_grid(cfg.experiment)
    artifacts = [
        export_similarity_csv(out / "similarity_parameter.csv", param_sim, metric="cosine", round=1, kind="parameter"),
        export_similarity_csv(out / "similarity_task_vector.csv", tv_sim, metric="cosine", round=1, kind="task_vector"),
    ]
    (out / "clusters.csv").write_text("client_id,cluster_id\n" + "".join(f"{i},{c}\n" for i, c in enumerate(clusters)))
    artifacts.append(out / "clusters.csv")
    _finish(out, args, cfg, "simgrid", artifacts)
    if not args.quiet:
        cl = np.array(clusters)
        same = (cl[:, None] == cl[None, :]) & ~np.eye(cl.size, dtype=bool)
        cross = cl[:, None] != cl[None, :]
        for name, m in (("parameter", param_sim), ("task vector", tv_sim)):
            within = FLOAT.format(m[same].mean()) if same.any() else "n/a"
            across = FLOAT.format(m[cross].mean()) if cross.any() else "n/a"
            print(f"{name:>12} cosine: within-cluster {within}  cross-cluster {across}  min {FLOAT.format(m.min())}")
    return EXIT_OK


def ablation_settings(cfg: RunConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    exp = cfg.experiment
    if axis == "metric":
        return [(m, dataclasses.replace(exp, strategy=dataclasses.replace(exp.strategy, metric=m)))
                for m in ("l2", "pearson", "cosine")]
    if axis == "strategy":
        grid = [("param/param", PARAM_WEIGHT_PARAM_AGG), ("param/vector", PARAM_WEIGHT_VECTOR_AGG),
                ("vector/vector", PERSONALIZED)]
        return [(name, dataclasses.replace(exp, strategy=dataclasses.replace(spec, metric=exp.strategy.metric)))
                for name, spec in grid]
    if axis == "clients":
        out = []
        for k in cfg.ablation.client_counts:
            fed = dataclasses.replace(exp.federation, num_clients=k,
                                      num_clusters=min(exp.federation.num_clusters, k))
            out.append((f"K={k}", dataclasses.replace(exp, federation=fed)))
        return out
    raise ValueError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _begin(out)
    seeds = cfg.seeds()
    rows = []
    for name, exp in ablation_settings(cfg, args.axis):
        accs = [run_experiment(dataclasses.replace(exp, seed=s)).final_mean_accuracy for s in seeds]
        rows.append((name, float(np.mean(accs)), accs))
        if not args.quiet:
            print(f"{name:>14}  mean accuracy {FLOAT.format(np.mean(accs))}")
    lines = ["setting,mean_accuracy," + ",".join(f"seed_{s}" for s in seeds)]
    lines += [",".join([name, FLOAT.format(mean)] + [FLOAT.format(a) for a in accs]) for name, mean, accs in rows]
    table = out / f"ablation_{args.axis}.csv"
    table.write_text("\n".join(lines) + "\n")
    _finish(out, args, cfg, f"ablate:{args.axis}", [table], {"axis": args.axis, "seeds": list(seeds)})
    return EXIT_OK


def _read_csv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def convergence_round(rounds: list[int], means: list[float], fraction: float = 0.99) -> int:
    """First round whose mean accuracy reaches ``fraction`` of the final value."""
    target = fraction * means[-1]
    for r, m in zip(rounds, means):
        if m >= target:
            return r
    return rounds[-1]


def build_report(out: Path) -> str:
    manifest_path = out / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {out}; not a completed run directory")
    manifest = json.loads(manifest_path.read_text())
    lines = [
        f"run directory: {out}",
        f"command: {manifest['command']}  version: {manifest['version']}",
        f"clients K={manifest['num_clients']}  rounds T={manifest['rounds']}  strategy={manifest['strategy']}  seed={manifest['seed']}",
    ]
    if manifest["command"] != "run":
        lines.append("artifacts: " + ", ".join(manifest["artifacts"]))
        return "\n".join(lines)

    rows = _read_csv(out / "metrics.csv")
    by_round: dict[int, list[tuple[int, float]]] = {}
    for row in rows:
        by_round.setdefault(int(row["round"]), []).append((int(row["client_id"]), float(row["accuracy"])))
    rounds = sorted(by_round)
    means = [float(np.mean([a for _, a in by_round[r]])) for r in rounds]
    final = sorted(by_round[rounds[-1]])
    lines.append(f"final mean accuracy: {FLOAT.format(means[-1])}")
    lines.append("per-client accuracy: " + "  ".join(f"{cid}:{FLOAT.format(a)}" for cid, a in final))
    lines.append(f"convergence round (99% of final mean accuracy): {convergence_round(rounds, means)} of {manifest['rounds']}")
    timing_rows = _read_csv(out / "timings.csv")
    client_total = sum(float(r["client_time"]) for r in timing_rows)
    server_total = sum({int(r["round"]): float(r["server_time"]) for r in timing_rows}.values())
    lines.append(f"time: server aggregation total {FLOAT.format(server_total)} s, client updates total {FLOAT.format(client_total)} s")
    return "\n".join(lines)


def cmd_report(args) -> int:
    print(build_report(Path(args.out)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtv", description="Personalized task-vector federated fine-tuning simulator.")
    p.add_argument("--version", action="version", version=f"fedtv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="YAML experiment config")
            sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")

    common(sub.add_parser("run", help="run one experiment and write metrics, weights, checkpoints"))
    common(sub.add_parser("simgrid", help="parameter vs task-vector cosine matrices after one fine-tuning pass"))
    ab = sub.add_parser("ablate", help="sweep one axis with shared seeds")
    common(ab)
    ab.add_argument("--axis", required=True, choices=ABLATION_AXES)
    common(sub.add_parser("report", help="summarize a finished run directory"), needs_config=False)
    return p


COMMANDS = {"run": cmd_run, "simgrid": cmd_simgrid, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedTVError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
