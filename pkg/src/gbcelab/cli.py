"""Command-line entry point: ``gbcelab <subcommand> [--config FILE] [key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .data import DataFormatError, kcore_filter_users, leave_one_out_split, load_interactions
from .diagnostics import overconfidence_report, probability_at_rank, probability_mass, rank_probability_csv
from .evaluation import evaluate, paired_t_test
from .losses import LossSpec
from .sampling import sampling_rate
from .theory import PriorDistribution, numeric_minimizer, oracle_grid, synthetic_convergence_experiment
from .trainer import load_model, train

log = logging.getLogger("gbcelab")

SUBCOMMANDS = ("prepare-data", "train", "evaluate", "diagnose", "verify-theory", "sweep")
THEORY_COLUMNS = ["p", "alpha", "beta", "closed_form", "numeric_min", "empirical_sigma", "abs_error",
                  "empirical_abs_error"]


class ArtifactError(RuntimeError):
    pass


def build_split(cfg: dict):
    ds = cfg["dataset"]
    if not ds["path"]:
        raise DataFormatError("dataset.path is not set")
    interactions = load_interactions(ds["path"], ds["format"])
    if ds["kcore"]:
        interactions = kcore_filter_users(interactions, int(ds["kcore"]))
    split = leave_one_out_split(interactions, int(cfg["split"]["n_validation_users"]),
                                int(cfg["split"]["seed"]))
    return interactions, split


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, default=float), encoding="utf-8")


def _out(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    return out


def _require(paths: List[Path]) -> None:
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ArtifactError(f"artifacts not written: {missing}")


def cmd_prepare_data(cfg: dict, args) -> List[Path]:
    interactions, split = build_split(cfg)
    out = _out(cfg)
    split.save_manifest(out / "split.json")
    _write_json(out / "dataset_stats.json", interactions.stats())
    return [out / "config.json", out / "split.json", out / "dataset_stats.json"]


def train_run(cfg: dict) -> dict:
    """Train one configuration and evaluate its best checkpoint on the test targets."""
    _, split = build_split(cfg)
    out = _out(cfg)
    spec = cfgmod.loss_spec(cfg)
    result = train(split, cfgmod.model_config(cfg), spec, cfgmod.train_config(cfg), run_dir=out)
    report = evaluate(result.model, split, "test", exclude_seen=cfg["eval"]["exclude_seen"],
                      loss_kind=spec.kind, k_max=int(cfg["eval"]["k_max"]))
    report.to_json(out / "test_report.json")
    summary = {"k": spec.k, "t": spec.t, "kind": spec.kind,
               "test_ndcg10": float(report.metric("NDCG@10").mean()),
               "test_recall10": float(report.metric("Recall@10").mean()),
               "best_epoch": result.record.best_epoch,
               "best_val_ndcg10": result.record.best_val_ndcg10,
               "total_clamped": result.record.total_clamped,
               "total_positives": result.record.total_positives,
               "clamp_rate": result.record.clamp_rate,
               "epochs_trained": len(result.record.epochs),
               "stop_reason": result.record.stop_reason,
               "output_dir": str(out)}
    _write_json(out / "result.json", summary)
    return summary


def cmd_train(cfg: dict, args) -> List[Path]:
    summary = train_run(cfg)
    out = Path(summary["output_dir"])
    print(json.dumps(summary))
    files = ["config.json", "best.bin", "train_record.csv", "test_report.json", "result.json"]
    return [out / f for f in files]


def _checkpoint(cfg: dict, args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg["output_dir"]) / "best.bin"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_evaluate(cfg: dict, args) -> List[Path]:
    _, split = build_split(cfg)
    ckpt = _checkpoint(cfg, args)
    model, header = load_model(ckpt)
    out = _out(cfg)
    kind = header.get("loss", {}).get("kind", cfg["loss"]["kind"])
    report = evaluate(model, split, args.stage, exclude_seen=cfg["eval"]["exclude_seen"],
                      loss_kind=kind, k_max=int(cfg["eval"]["k_max"]))
    report.meta["checkpoint"] = str(ckpt)
    report.meta["cutoffs"] = {f"NDCG@{c}": float(report.metric(f"NDCG@{c}").mean())
                              for c in cfg["eval"]["cutoffs"]}
    report.meta["cutoffs"].update({f"Recall@{c}": float(report.metric(f"Recall@{c}").mean())
                                   for c in cfg["eval"]["cutoffs"]})
    if args.baseline:
        base_model, base_header = load_model(args.baseline)
        base = evaluate(base_model, split, args.stage, users=report.users,
                        exclude_seen=cfg["eval"]["exclude_seen"],
                        loss_kind=base_header.get("loss", {}).get("kind", "bce"),
                        k_max=int(cfg["eval"]["k_max"]))
        report.meta["paired_t_test_ndcg10"] = dict(
            paired_t_test(report.metric("NDCG@10"), base.metric("NDCG@10")), baseline=str(args.baseline))
    report.to_json(out / "rank_report.json")
    report.to_csv(out / "rank_report.csv")
    print(report.to_json())
    return [out / "rank_report.json", out / "rank_report.csv"]


def cmd_diagnose(cfg: dict, args) -> List[Path]:
    _, split = build_split(cfg)
    ckpt = _checkpoint(cfg, args)
    model, header = load_model(ckpt)
    out = _out(cfg)
    lh = header.get("loss", cfg["loss"])
    spec = LossSpec(kind=lh["kind"], k=int(lh["k"]), t=float(lh["t"]))
    alpha = sampling_rate(spec.k, split.n_items) if spec.sampled else math.nan
    beta = spec.beta(split.n_items) if spec.sampled else math.nan
    k_max = int(cfg["eval"]["k_max"])
    if args.user is not None:
        user = str(args.user)
        if user not in split.test_targets:
            raise KeyError(f"unknown user {user!r}")
        probs = probability_at_rank(model, split, user, k_max, spec.kind)
        path = out / f"rank_probability_user_{user}.csv"
        rank_probability_csv(path, probs)
        summary = {"user": user, "probability_mass": probability_mass(model, split, user, spec.kind),
                   "loss": lh, "checkpoint": str(ckpt)}
        _write_json(out / f"mass_user_{user}.json", summary)
        print(json.dumps(summary))
        return [path, out / f"mass_user_{user}.json"]
    report = overconfidence_report(model, split, spec.kind, alpha, beta, k_max=k_max)
    report.to_csv(out / "overconfidence.csv")
    summary = {"mean_probability_mass": report.mean_mass,
               "precision_at_10": float(report.precision_at_k[min(9, k_max - 1)]),
               "mean_probability_at_10": float(report.mean_probability_at_k[min(9, k_max - 1)]),
               "alpha": alpha, "beta": beta, "loss": lh, "checkpoint": str(ckpt),
               "users": len(report.users)}
    _write_json(out / "overconfidence.json", summary)
    print(json.dumps(summary))
    return [out / "overconfidence.csv", out / "overconfidence.json"]


SYNTHETIC_PRIOR = (0.5, 0.3, 0.2)


def theory_rows(synthetic_steps: int = 200_000, seeds=(0,)) -> List[dict]:
    """Oracle grid rows plus synthetic-training rows carrying an empirical sigma."""
    rows = [dict(r, empirical_sigma="", empirical_abs_error="") for r in oracle_grid()]
    if synthetic_steps > 0:
        prior = PriorDistribution(np.array(SYNTHETIC_PRIOR))
        for loss, t in (("gbce", 1.0), ("bce", 0.0)):
            for seed in seeds:
                res = synthetic_convergence_experiment(prior, k=1, t=t, steps=synthetic_steps,
                                                       seed=seed, loss=loss)
                for p, sig, target in zip(prior.p, res.sigma, res.target):
                    num = numeric_minimizer(float(p), res.alpha, res.beta)
                    rows.append({"p": float(p), "alpha": res.alpha, "beta": res.beta,
                                 "closed_form": float(target), "numeric_min": num,
                                 "abs_error": abs(float(target) - num), "empirical_sigma": float(sig),
                                 "empirical_abs_error": abs(float(sig) - float(target))})
    return rows


def cmd_verify_theory(cfg: dict, args) -> List[Path]:
    out = _out(cfg)
    rows = theory_rows(args.synthetic_steps, tuple(range(args.seeds)))
    path = out / "theory.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=THEORY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})
    worst = max(r["abs_error"] for r in rows)
    print(json.dumps({"rows": len(rows), "max_abs_error": worst, "csv": str(path)}))
    return [path]


def _sweep_point(cfg: dict) -> dict:
    return train_run(cfg)


def cmd_sweep(cfg: dict, args) -> List[Path]:
    out = _out(cfg)
    ks, ts = [int(k) for k in cfg["sweep"]["k"]], [float(t) for t in cfg["sweep"]["t"]]
    points = []
    for k in ks:
        for t in ts:
            sub = json.loads(json.dumps(cfg))
            sub["loss"].update(kind="gbce", k=k, t=t)
            sub["output_dir"] = str(out / f"k{k}_t{t:g}")
            points.append(sub)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, points))
    else:
        results = [_sweep_point(p) for p in points]
    matrix = np.full((len(ks), len(ts)), np.nan)
    for r in results:
        matrix[ks.index(r["k"]), ts.index(r["t"])] = r["test_ndcg10"]
    with open(out / "sweep_ndcg10.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"t={t:g}" for t in ts])
        for i, k in enumerate(ks):
            w.writerow([k] + [f"{x:.6g}" for x in matrix[i]])
    with open(out / "sweep_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(results[0]))
        w.writeheader()
        w.writerows(results)
    return [out / "sweep_ndcg10.csv", out / "sweep_runs.csv"]


HANDLERS = {"prepare-data": cmd_prepare_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose, "verify-theory": cmd_verify_theory, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbcelab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("overrides", nargs="*", help="dotted overrides, e.g. loss.t=0.9")
        if name in ("evaluate", "diagnose"):
            p.add_argument("--checkpoint", help="defaults to <output_dir>/best.bin")
        if name == "evaluate":
            p.add_argument("--stage", choices=("test", "validation"), default="test")
            p.add_argument("--baseline", help="second checkpoint for a paired t-test on NDCG@10")
        if name == "diagnose":
            p.add_argument("--user", help="single-user rank/probability view")
        if name == "verify-theory":
            p.add_argument("--synthetic-steps", type=int, default=200_000)
            p.add_argument("--seeds", type=int, default=1)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
    return parser


def run_subcommand(name: str, config_path=None, overrides=(), argv_extra=()) -> int:
    argv = [name] + (["--config", str(config_path)] if config_path else []) + list(argv_extra) + list(overrides)
    return main(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.overrides)
        _require(HANDLERS[args.command](cfg, args))
    except (ConfigError, DataFormatError, FileNotFoundError, KeyError, ArtifactError, ValueError) as exc:
        print(f"gbcelab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
