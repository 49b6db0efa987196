"""Fold-level experiment runs and their on-disk artifacts.

Layout of a run directory::

    config.txt            resolved configuration (re-runnable as-is)
    splits.json           test bag ids per fold
    metrics.json          per-fold reports plus mean / population std
    fold_<i>/
        pretrained.bin    baseline parameters (only when an init mode needs them)
        pretrained_metrics.json
        params.bin        final student parameters (recycle weights + queries included)
        history.csv       per-epoch losses, lr, decayed ratio, running train AUC
        maskplans.csv     final-epoch mask plan of every training bag (MHIM only)
        predictions.csv   bag_id, label, score on the test fold
        metrics.json
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import mining
from .aggregators import model_from_hyper
from .config import ConfigError, ExperimentConfig, parse_config
from .data import Bag, generate, kfold, load_dataset, load_planted
from .metrics import aggregate, optimal_threshold_metrics, to_json
from .params_io import atomic_write_text, load_params, save_params
from .recycle import GlobalQueries, GlobalRecycle
from .training import (
    NumericAbort,
    SiameseState,
    TrainConfig,
    fit,
    history_csv,
    infer,
    mine,
    pretrain_baseline,
    stream,
)

log = logging.getLogger(__name__)


def load_bags(cfg: ExperimentConfig) -> tuple[list[Bag], dict[str, np.ndarray]]:
    if cfg.manifest:
        return load_dataset(cfg.manifest), load_planted(cfg.manifest)
    data = generate(cfg.synthetic_spec(), cfg.seed)
    return data.bags, data.planted


def student_bundle(state: SiameseState) -> tuple[dict, dict]:
    hyper = state.student.hyper()
    if state.grn is not None:
        hyper.update(grn_heads=state.grn.heads, grn_momentum=state.grn.queries.momentum)
    return state.student_params(), hyper


def load_student(path):
    params, hyper = load_params(path)
    model = model_from_hyper(hyper, {k: v for k, v in params.items() if not k.startswith("grn.")})
    grn = None
    if "grn.queries" in params:
        grn = GlobalRecycle({k: v for k, v in params.items() if k.startswith("grn.w")},
                            GlobalQueries(params["grn.queries"], hyper["grn_momentum"]),
                            hyper["grn_heads"])
    return model, grn


def predictions_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bag_id", "label", "score"])
    for bag_id, label, score in rows:
        w.writerow([bag_id, label, repr(float(score))])
    return buf.getvalue()


def evaluate_model(model, grn, bags: list[Bag]):
    scores = [infer(model, grn, b).score for b in bags]
    labels = [int(b.label > 0) for b in bags]
    return optimal_threshold_metrics(scores, labels), list(zip([b.id for b in bags], labels, scores))


def _plans_csv(plans) -> str:
    buf = io.StringIO()
    mining.write_plans_csv(buf, plans)
    return buf.getvalue().replace("\r\n", "\n")


def run_fold(cfg: ExperimentConfig, tcfg: TrainConfig, train: list[Bag], test: list[Bag],
             fold_dir: Path) -> dict:
    pretrained = None
    result = {}
    if cfg.needs_pretrain:
        pretrained = pretrain_baseline(train, tcfg, fold_dir / "pretrained.bin")
        base = model_from_hyper(load_params(fold_dir / "pretrained.bin")[1], pretrained)
        rep, _ = evaluate_model(base, None, test)
        atomic_write_text(fold_dir / "pretrained_metrics.json", to_json(rep))
        result["pretrained"] = rep
    state, history, plans = fit(train, tcfg, pretrained=pretrained, keep_plans=True)
    params, hyper = student_bundle(state)
    save_params(fold_dir / "params.bin", params, hyper)
    atomic_write_text(fold_dir / "history.csv", history_csv(history))
    if plans:
        atomic_write_text(fold_dir / "maskplans.csv", _plans_csv(plans))
    rep, rows = evaluate_model(state.student, state.grn, test)
    atomic_write_text(fold_dir / "predictions.csv", predictions_csv(rows))
    atomic_write_text(fold_dir / "metrics.json", to_json(rep))
    result["student"] = rep
    result["state"] = state
    return result


def run(cfg: ExperimentConfig, out_dir, keep_states: bool = False) -> dict:
    """Split, (pre)train and evaluate every fold; returns the aggregate report."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.txt", cfg.to_text())
    bags, _ = load_bags(cfg)
    split = kfold(bags, cfg.folds, cfg.seed)
    by_id = {b.id: b for b in bags}
    atomic_write_text(out / "splits.json", json.dumps({"k": split.k, "seed": split.seed,
                                                      "test": split.test}, indent=2) + "\n")
    tcfg = cfg.train_config()
    fold_reports, pre_reports, states = [], [], []
    for i, (tr_ids, te_ids) in enumerate(split):
        log.info("fold %d/%d", i + 1, split.k)
        try:
            res = run_fold(cfg, tcfg, [by_id[b] for b in tr_ids], [by_id[b] for b in te_ids],
                           out / f"fold_{i}")
        except NumericAbort as exc:
            raise NumericAbort(f"fold {i}: {exc}") from exc
        fold_reports.append(res["student"])
        if "pretrained" in res:
            pre_reports.append(res["pretrained"])
        if keep_states:
            states.append(res["state"])
    report = {"framework": cfg.framework, "folds": fold_reports, "aggregate": aggregate(fold_reports)}
    if pre_reports:
        report["pretrained_aggregate"] = aggregate(pre_reports)
    atomic_write_text(out / "metrics.json", to_json(report))
    if keep_states:
        report["states"] = states
    return report


def read_run_config(run_dir) -> ExperimentConfig:
    path = Path(run_dir) / "config.txt"
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no config.txt)")
    return parse_config(path.read_text())


def evaluate_run(run_dir) -> dict:
    """Re-infer every test fold from the saved parameters."""
    run_dir = Path(run_dir)
    cfg = read_run_config(run_dir)
    bags, _ = load_bags(cfg)
    by_id = {b.id: b for b in bags}
    splits = json.loads((run_dir / "splits.json").read_text())
    reports = []
    for i, te_ids in enumerate(splits["test"]):
        model, grn = load_student(run_dir / f"fold_{i}" / "params.bin")
        rep, _ = evaluate_model(model, grn, [by_id[b] for b in te_ids])
        reports.append(rep)
    report = {"framework": cfg.framework, "folds": reports, "aggregate": aggregate(reports)}
    atomic_write_text(run_dir / "eval_metrics.json", to_json(report))
    return report


SCOREMAP_COLUMNS = ["instance_idx", "attention", "instance_probability",
                    "mask_role_at_final_epoch", "planted_label_if_synthetic"]


def _final_roles(run_dir: Path, splits, bag_id: str) -> dict[int, str]:
    for i, te_ids in enumerate(splits["test"]):
        path = run_dir / f"fold_{i}" / "maskplans.csv"
        if bag_id in te_ids or not path.exists():
            continue
        with open(path, newline="") as fh:
            roles = {int(r["instance_idx"]): r["role"] for r in csv.DictReader(fh)
                     if r["bag_id"] == bag_id}
        if roles:
            return roles
    return {}


def export_scoremap(run_dir, bag_id: str, out_path=None) -> str:
    """Per-instance attention / probability CSV from the fold that held ``bag_id`` out."""
    run_dir = Path(run_dir)
    cfg = read_run_config(run_dir)
    bags, planted = load_bags(cfg)
    by_id = {b.id: b for b in bags}
    if bag_id not in by_id:
        raise KeyError(f"unknown bag {bag_id!r}")
    splits = json.loads((run_dir / "splits.json").read_text())
    fold = next(i for i, t in enumerate(splits["test"]) if bag_id in t)
    model, grn = load_student(run_dir / f"fold_{fold}" / "params.bin")
    res = infer(model, grn, by_id[bag_id])
    roles = _final_roles(run_dir, splits, bag_id)
    lab = planted.get(bag_id)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCOREMAP_COLUMNS)
    for i in range(by_id[bag_id].n):
        w.writerow([i, repr(float(res.attention[i])), repr(float(res.instance_scores[i])),
                    roles.get(i, ""), "" if lab is None else int(lab[i])])
    text = buf.getvalue()
    atomic_write_text(out_path or run_dir / f"scoremap_{bag_id}.csv", text)
    return text


def mining_enrichment(state: SiameseState, bags: list[Bag], planted: dict[str, np.ndarray],
                      beta_h: float, seed: int = 0) -> float:
    """Mean planted-positive fraction of the masked-high set minus its expectation under
    uniform random selection of the same size, over positive bags.

    Diagnostic only: planted labels never reach the trainer.
    """
    rng = stream(seed, "mining", 99)
    diffs = []
    for bag in bags:
        lab = planted.get(bag.id)
        if bag.label != 1 or lab is None or not lab.any():
            continue
        plan, _ = mine(state, bag.features, rng, beta_h)
        hi = plan.masked_high_idx
        if hi.size == 0:
            continue
        diffs.append(lab[hi].mean() - lab.mean())
    return float(np.mean(diffs)) if diffs else float("nan")


def _grid_name(combo: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in combo.items())


def _sweep_one(args):
    cfg, out = args
    report = run(cfg, out)
    return out, report["aggregate"]


def sweep(cfg: ExperimentConfig, grid: dict[str, list[str]], out_dir, workers: int = 1) -> dict:
    """Cartesian product over ``grid``; one run directory per combination."""
    out = Path(out_dir)
    keys = list(grid)
    jobs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        combo = dict(zip(keys, values))
        sub = cfg.with_overrides(combo).validate()
        jobs.append((sub, str(out / _grid_name(combo))))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    summary = {Path(p).name: agg for p, agg in results}
    atomic_write_text(out / "sweep.json", to_json(summary))
    return summary
