"""Command line entry point: ``adatrans gen|fit|estimate|experiment|metrics``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import harness
from .config import MODES, POLICIES, load_config
from .data import MultiSourceDataset, load_manifest, save_dataset
from .estimator import DEFAULT_S, estimate_ate, summary_line, write_ite_csv
from .metrics import MetricResult, ate_error, sqrt_pehe
from .persist import load_models, save_models
from .seeding import rng_for
from .synth import (DiscrepancySpec, TwinsSimSpec, make_multisource, default_params,
                    synth_manifest_items, target_vectors, twins_simulate)


def _overrides(args) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag in ("seed", "out", "policy", "mode", "replicates"):
        v = getattr(args, flag, None)
        if v is not None:
            key = {"out": "out_dir", "policy": "policies"}.get(flag, flag)
            out[key] = str(v)
    return out


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=out_help)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = cfg.out_dir if args.out is None else args.out
    if args.twins:
        records = harness._twins_records(cfg)
        data = twins_simulate(records, TwinsSimSpec(b_t=cfg.twins_b_t, delta_s=cfg.deltas[0]), cfg.seed)
        extra = {"generator": "twins-sim", "seed": cfg.seed, "delta_s": repr(cfg.deltas[0])}
    else:
        deltas = tuple(cfg.deltas) if args.deltas is None else \
            tuple(float(v) for v in args.deltas.split(",") if v.strip())
        params = default_params(cfg.seed, cfg.d_x, cfg.d_z, cfg.n_per_pop)
        data = make_multisource(params, None, DiscrepancySpec(deltas), cfg.seed, n_target=cfg.n_target)
        extra = synth_manifest_items(params, target_vectors(), DiscrepancySpec(deltas), cfg.seed)
    path = save_dataset(data, out, extra)
    print(f"wrote {path} (target {data.target.n} rows, {data.m} sources)")
    return 0


def _split_val(data: MultiSourceDataset, n_val: int, seed: int):
    if n_val <= 0:
        return data, None
    n = data.target.n
    if n_val >= n:
        raise SystemExit(f"--n-val {n_val} leaves no target training rows")
    perm = rng_for(seed, "fit_val").permutation(n)
    val = data.target.subset(np.sort(perm[:n_val]))
    train = MultiSourceDataset(data.target.subset(np.sort(perm[n_val:])), data.sources)
    return train, val


def cmd_fit(args) -> int:
    ov = _overrides(args)
    ov.pop("out_dir", None)
    cfg = load_config(args.config, ov)
    data = load_manifest(args.data)
    train, val = _split_val(data, args.n_val, cfg.seed)
    models = harness.fit_models(train, val, cfg, cfg.policies[0], cfg.seed)
    out = args.out or "models.npz"
    save_models(models, out)
    m = data.m
    print(f"wrote {out}")
    for name, fac in (("lambda", models.confounder.factors), ("delta", models.outcome.factors),
                      ("eta", models.propensity.factors)):
        vals = harness._ts(fac, m)
        print(name, " ".join(f"{v:.4f}" for v in vals) if vals else "-")
    return 0


def _read_x(path) -> np.ndarray:
    if path.endswith(".txt") or os.path.basename(path) == "manifest.txt":
        return load_manifest(path).target.x
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    return np.array([[float(r[i]) for i in cols] for r in body], dtype=float)


def cmd_estimate(args) -> int:
    models = load_models(args.models)
    x = _read_x(args.x)
    est = estimate_ate(x, models, S=args.samples, seed=args.seed or 0,
                       marginalize_w=args.marginalize_w)
    out = args.out or "ite.csv"
    write_ite_csv(est, out)
    print(summary_line(est))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    rows = harness.run_experiment(cfg)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed; results in {os.path.join(cfg.out_dir, 'results.csv')}")
    return 0 if failed == 0 else 3


def cmd_metrics(args) -> int:
    if args.results:
        rows = harness.read_results(args.results)
        groups: Dict[tuple, List[dict]] = {}
        for r in rows:
            groups.setdefault((r["delta_or_sources"], r["policy"]), []).append(r)
        for (g, p), rs in groups.items():
            ok = [r for r in rs if r["status"] == "ok" and r["sqrt_pehe"] != harness.NA]
            if not ok:
                print(f"{g} {p}: no successful cells")
                continue
            res = MetricResult(tuple(float(r["sqrt_pehe"]) for r in ok),
                               tuple(float(r["ate_error"]) for r in ok))
            print(f"{g} {p}: {res}")
        if args.out:
            harness.emit_plotdata(rows, args.out)
        return 0
    if not (args.ite and args.data):
        raise SystemExit("metrics needs --results, or both --ite and --data")
    target = load_manifest(args.data).target
    with open(args.ite, newline="", encoding="utf-8") as fh:
        ite = np.array([float(r["ite"]) for r in csv.DictReader(fh)])
    if not target.has_truth:
        raise SystemExit("target population carries no ground-truth outcomes")
    y0, y1 = target.truth_pair()
    print(f"sqrt_pehe {sqrt_pehe(y0, y1, ite):.6g}  ate_error {ate_error(y0, y1, ite):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adatrans", description="Multi-source causal effect estimation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic or Twins-sim dataset")
    _common(p, "output directory for the CSVs and manifest")
    p.add_argument("--deltas", help="comma-separated source shifts (synthetic)")
    p.add_argument("--twins", action="store_true", help="simulate from the Twins table")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit the three model levels on a dataset")
    _common(p, "model archive path (.npz)")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--n-val", type=int, default=0, help="target rows held out for model selection")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", help="estimate individual effects with fitted models")
    p.add_argument("--models", required=True)
    p.add_argument("--x", required=True, help="manifest (target rows) or CSV with x* columns")
    p.add_argument("--samples", type=int, default=DEFAULT_S)
    p.add_argument("--marginalize-w", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="ITE CSV path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", help="run a replicated experiment grid")
    _common(p, "output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--policy", help="policy or comma-separated list")
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("metrics", help="summarise a results CSV or score an ITE file")
    p.add_argument("--results", help="results CSV from an experiment")
    p.add_argument("--ite", help="ITE CSV from estimate")
    p.add_argument("--data", help="manifest whose target holds the true outcomes")
    p.add_argument("--out", help="directory for regenerated plot data")
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
