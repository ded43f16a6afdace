"""Grid runner: data, three-level fits, effect estimates and metrics per cell.

A cell is one (grid value, policy, replicate).  Cells are independent and
fully seeded, so they may run in worker processes; rows are collected and
written in grid order, which keeps the results file byte-stable.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .auxiliary import AuxConfig, fit_outcome, fit_propensity
from .config import POLICY_LEVELS, ExperimentConfig
from .confounder import ConfounderConfig, StructuralConfig, fit
from .data import MultiSourceDataset, PopulationData, SplitSpec, load_manifest, split_target
from .estimator import Models, estimate_ate, naive_ate
from .metrics import ate_error, mean_se, sqrt_pehe
from .seeding import derive_seed, rng_for
from .synth import (DiscrepancySpec, TwinsSimSpec, make_multisource, default_params,
                    twins_simulate, twins_standin_table)

log = logging.getLogger(__name__)

NA = "NA"
BASE_COLUMNS = ["mode", "delta_or_sources", "policy", "replicate", "sqrt_pehe", "ate_error"]
TAIL_COLUMNS = ["wall_ms", "naive_ate_error", "status"]


def confounder_config(cfg: ExperimentConfig, outcome_kind) -> ConfounderConfig:
    return ConfounderConfig(
        structural=StructuralConfig(d_z=cfg.d_z, outcome_kind=outcome_kind),
        n_samples=cfg.n_samples, restarts=cfg.restarts, max_iter=cfg.max_iter, lr=cfg.lr,
        tol=cfg.tol, window=cfg.window, gamma=cfg.gamma, gamma_grid=tuple(cfg.gamma_grid),
        anchor_budget=cfg.anchor_budget, q_anchor_budget=cfg.q_anchor_budget,
        z_kernel=cfg.z_kernel, z_lengthscale=cfg.z_lengthscale)


def aux_config(cfg: ExperimentConfig) -> AuxConfig:
    return AuxConfig(gamma=cfg.aux_gamma, anchor_budget=cfg.aux_anchor_budget,
                     lr=cfg.lr, max_iter=cfg.aux_max_iter, tol=cfg.tol, window=cfg.window)


def fit_models(train: MultiSourceDataset, val: Optional[PopulationData], cfg: ExperimentConfig,
               policy: str, seed: int) -> Models:
    """Fit the three levels under ``policy`` (a harness policy name)."""
    p1, p2, p3 = POLICY_LEVELS[policy]
    kind = train.schema.outcome_kind
    aux = aux_config(cfg)
    return Models(
        confounder=fit(train, confounder_config(cfg, kind), p1, val, seed=seed),
        outcome=fit_outcome(train, aux, p2, seed),
        propensity=fit_propensity(train, aux, p3, seed),
    )


def _ts(factors, m: int) -> List[float]:
    """Target-source factor values, zero-padded when the fit was target-only."""
    vals = list(factors.target_source()) if factors.n_pops > 1 else []
    return [float(v) for v in vals] + [0.0] * (m - len(vals))


@dataclass
class CellResult:
    sqrt_pehe: float
    ate_error: float
    naive_ate_error: float
    lam: List[float]
    delta: List[float]
    eta: List[float]


def evaluate_split(train: MultiSourceDataset, val: PopulationData, test: PopulationData,
                   cfg: ExperimentConfig, policy: str, seed: int) -> CellResult:
    models = fit_models(train, val, cfg, policy, seed)
    est = estimate_ate(test.x, models, S=cfg.n_mc, seed=seed, marginalize_w=cfg.marginalize_w)
    m = train.m
    if test.y0_true is None:
        pehe = ate = naive = float("nan")
    else:
        y0, y1 = test.truth_pair()
        pehe, ate = sqrt_pehe(y0, y1, est.ite), ate_error(y0, y1, est.ite)
        try:
            naive = abs(naive_ate(test) - float(np.mean(y1 - y0)))
        except ValueError:
            naive = float("nan")
    return CellResult(pehe, ate, naive, _ts(models.confounder.factors, m),
                      _ts(models.outcome.factors, m), _ts(models.propensity.factors, m))


# ---------------------------------------------------------------- data per cell


def replicate_seed(cfg: ExperimentConfig, replicate: int) -> int:
    return derive_seed(cfg.seed, "replicate", replicate)


def _split_spec(cfg: ExperimentConfig, n: int, seed: int) -> SplitSpec:
    n_test = cfg.n_test if cfg.n_test > 0 else n - cfg.n_train - cfg.n_val
    return SplitSpec(cfg.n_train, cfg.n_val, n_test, seed=seed)


def synthetic_dataset(cfg: ExperimentConfig, grid_value, rs: int) -> MultiSourceDataset:
    if cfg.mode == "synthetic-multisrc":
        deltas = tuple(cfg.source_deltas[:int(grid_value)])
    else:
        deltas = (float(grid_value),)
    params = default_params(rs, cfg.d_x, cfg.d_z, cfg.n_per_pop)
    return make_multisource(params, None, DiscrepancySpec(deltas), rs, n_target=cfg.n_target)


def _twins_records(cfg: ExperimentConfig):
    if not cfg.twins_csv:
        return twins_standin_table()
    import pandas as pd
    return {k: v.to_numpy() for k, v in pd.read_csv(cfg.twins_csv).items()}


def twins_folds(n_target: int, cfg: ExperimentConfig, rs: int):
    """(train, val, test) target index sets for each fold.

    Target rows are shuffled and cut into ``twins_folds`` blocks; fold k
    trains on block k, validates on block k+1 and tests on the rest.
    """
    k, b = cfg.twins_folds, cfg.twins_fold_size
    if k < 3 or k * b > n_target:
        raise ValueError(f"{k} folds of {b} rows need at least {k * b} target rows")
    perm = rng_for(rs, "twins_folds").permutation(n_target)[:k * b]
    blocks = [np.sort(perm[i * b:(i + 1) * b]) for i in range(k)]
    for i in range(k):
        rest = np.sort(np.concatenate([blocks[j] for j in range(k) if j not in (i, (i + 1) % k)]))
        yield blocks[i], blocks[(i + 1) % k], rest


def run_cell(cfg: ExperimentConfig, grid_value, policy: str, replicate: int) -> CellResult:
    rs = replicate_seed(cfg, replicate)
    if cfg.mode == "twins-sim":
        records = _twins_records(cfg)
        data = twins_simulate(records, TwinsSimSpec(b_t=cfg.twins_b_t, delta_s=float(grid_value)), rs)
        out = []
        for tr, va, te in twins_folds(data.target.n, cfg, rs):
            train = MultiSourceDataset(data.target.subset(tr), data.sources)
            out.append(evaluate_split(train, data.target.subset(va), data.target.subset(te),
                                      cfg, policy, rs))
        # average the folds first
        return CellResult(
            float(np.mean([o.sqrt_pehe for o in out])), float(np.mean([o.ate_error for o in out])),
            float(np.mean([o.naive_ate_error for o in out])),
            list(np.mean([o.lam for o in out], axis=0)), list(np.mean([o.delta for o in out], axis=0)),
            list(np.mean([o.eta for o in out], axis=0)))
    if cfg.mode == "custom-csv":
        data = load_manifest(cfg.manifest)
    else:
        data = synthetic_dataset(cfg, grid_value, rs)
    parts = split_target(data, _split_spec(cfg, data.target.n, rs))
    return evaluate_split(parts["train"], parts["val"].target, parts["test"].target, cfg, policy, rs)


# ---------------------------------------------------------------- grid


def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return NA if not math.isfinite(v) else repr(v)
    return str(v)


def n_source_columns(cfg: ExperimentConfig) -> int:
    if cfg.mode == "synthetic-multisrc":
        return max(cfg.source_counts)
    if cfg.mode == "custom-csv":
        return load_manifest(cfg.manifest).m
    return 1


def result_columns(m: int) -> List[str]:
    factor_cols = [f"{name}_ts{k}" for name in ("lambda", "delta", "eta") for k in range(1, m + 1)]
    return BASE_COLUMNS + factor_cols + TAIL_COLUMNS


def _cell_task(args):
    cfg, g, policy, r, m = args
    row: Dict[str, str] = {
        "mode": cfg.mode, "delta_or_sources": NA if g is None else _fmt(g),
        "policy": policy, "replicate": str(r),
    }
    t0 = time.perf_counter()
    try:
        res = run_cell(cfg, g, policy, r)
    except Exception as exc:  # one failed cell must not abort the grid
        log.warning("cell (%s, %s, %d) failed: %r", g, policy, r, exc)
        for c in result_columns(m)[4:]:
            row[c] = NA
        row["status"] = f"failed:{type(exc).__name__}"
        return row
    ms = (time.perf_counter() - t0) * 1e3
    row.update(sqrt_pehe=_fmt(res.sqrt_pehe), ate_error=_fmt(res.ate_error))
    for name, vals in (("lambda", res.lam), ("delta", res.delta), ("eta", res.eta)):
        for k in range(1, m + 1):
            row[f"{name}_ts{k}"] = _fmt(float(vals[k - 1])) if k <= len(vals) else NA
    row["wall_ms"] = _fmt(round(ms, 1)) if cfg.record_wall_ms else NA
    row["naive_ate_error"] = _fmt(res.naive_ate_error)
    row["status"] = "ok"
    return row


def cells(cfg: ExperimentConfig):
    for g in cfg.grid:
        for policy in cfg.policies:
            for r in range(cfg.replicates):
                yield g, policy, r


def run_experiment(cfg: ExperimentConfig, results_path: Optional[str] = None) -> List[Dict[str, str]]:
    """Run every cell and write the results CSV (flushed row by row).

    Returns the rows as string dicts in grid order.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = results_path or os.path.join(cfg.out_dir, "results.csv")
    m = n_source_columns(cfg)
    cols = result_columns(m)
    tasks = [(cfg, g, p, r, m) for g, p, r in cells(cfg)]
    rows: List[Dict[str, str]] = []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        wr.writeheader()
        fh.flush()
        if cfg.jobs > 1:
            with cf.ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
                it = ex.map(_cell_task, tasks)
                for row in it:
                    rows.append(row)
                    wr.writerow(row)
                    fh.flush()
        else:
            for t in tasks:
                row = _cell_task(t)
                rows.append(row)
                wr.writerow(row)
                fh.flush()
    if cfg.plotdata:
        emit_plotdata(rows, cfg.out_dir)
    return rows


def read_results(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- plot data


def _num(s: str) -> float:
    return float("nan") if s in (NA, "", None) else float(s)


def _summary(values: Sequence[float]):
    v = [x for x in values if math.isfinite(x)]
    if not v:
        return NA, NA
    mean, se = mean_se(v)
    return _fmt(mean), NA if se is None else _fmt(se)


def _grid_key(s: str):
    return (0, float(s)) if s != NA else (1, 0.0)


def _write_table(path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    width = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(h.ljust(w) for h, w in zip(header, width)).rstrip() + "\n")
        for r in rows:
            fh.write("  " + " ".join(c.ljust(w) for c, w in zip(r, width)).rstrip() + "\n")


def emit_plotdata(results: Sequence[Dict[str, str]], out_dir) -> List[str]:
    """Write whitespace-delimited summary views next to the results file.

    ``<metric>_vs_<axis>.dat`` has columns (axis, policy, mean, se) sorted by
    (policy, axis); ``factors_vs_<axis>.dat`` lists every fitted factor column.
    Missing values are written as ``NA``.
    """
    if not results:
        raise ValueError("no results to summarise")
    os.makedirs(out_dir, exist_ok=True)
    mode = results[0]["mode"]
    axis = "sources" if mode == "synthetic-multisrc" else "delta"
    policies = sorted({r["policy"] for r in results})
    grid = sorted({r["delta_or_sources"] for r in results}, key=_grid_key)
    written = []

    def group(p, g):
        return [r for r in results if r["policy"] == p and r["delta_or_sources"] == g]

    metrics = ["sqrt_pehe", "ate_error"]
    for metric in metrics:
        rows = []
        for p in policies:
            for g in grid:
                mean, se = _summary([_num(r[metric]) for r in group(p, g)])
                rows.append([g, p, mean, se])
        if metric == "ate_error" and mode == "twins-sim":
            for g in grid:
                # the naive estimate does not depend on the policy; use one policy's rows
                mean, se = _summary([_num(r["naive_ate_error"]) for r in group(policies[0], g)])
                rows.append([g, "naive", mean, se])
            rows.sort(key=lambda r: (r[1], _grid_key(r[0])))
        path = os.path.join(out_dir, f"{metric}_vs_{axis}.dat")
        _write_table(path, [axis, "policy", "mean", "se"], rows)
        written.append(path)

    fcols = [c for c in results[0] if c.split("_ts")[0] in ("lambda", "delta", "eta") and "_ts" in c]
    rows = []
    for p in policies:
        for g in grid:
            row = [g, p]
            for c in fcols:
                row += list(_summary([_num(r.get(c, NA)) for r in group(p, g)]))
            rows.append(row)
    header = [axis, "policy"] + [f"{c}{s}" for c in fcols for s in ("", "_se")]
    path = os.path.join(out_dir, f"factors_vs_{axis}.dat")
    _write_table(path, header, rows)
    written.append(path)
    return written
