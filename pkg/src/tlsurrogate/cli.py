"""Command-line entry point: gen-data, train, eval, predict, optimize-voyage, assimilate.

Settings come from an optional JSON config file with sections ``dataset``,
``oracle``, ``train``, ``model``, ``predict`` and ``assimilate``; command-line
flags override it.

Exit codes: 0 success, 2 configuration error, 3 IO error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import assimilate as assim
from . import datagen, geo, model as model_mod, train as train_mod, voyage
from .errors import FailureEscalation, FormatError, VersionMismatch

log = logging.getLogger("tlsurrogate")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ helpers
def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _build(cls, section: dict, **overrides):
    values = dict(section or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _bathy_source(args, model=None):
    if getattr(args, "bathy_grid", None):
        return datagen.read_grid(args.bathy_grid)
    desc = (model.metadata.get("bathymetry") if model is not None else None) or {"kind": "analytic"}
    if desc.get("kind") == "grid":
        raise ConfigError("model was trained on a gridded bathymetry; pass --bathy-grid")
    return datagen.bathy_from_dict(desc)


def _point(text: str, with_depth=True) -> geo.GeoPoint:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad point {text!r}") from exc
    if len(parts) != (3 if with_depth else 2):
        raise ConfigError(f"point {text!r} needs {'lat,lon,depth' if with_depth else 'lat,lon'}")
    return geo.GeoPoint(*parts)


def _axis(text: str):
    try:
        lo, hi, n = text.split(",")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ConfigError(f"axis {text!r} must be lo,hi,count") from exc


# ------------------------------------------------------------------ commands
def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    spec = _build(datagen.DatasetSpec, cfg.get("dataset"), seed=args.seed, n_sources=args.n_sources,
                  receivers_per_source=args.receivers)
    oracle = _build(datagen.OracleConfig, cfg.get("oracle"), seed=args.seed)
    bathy = datagen.read_grid(args.bathy_grid) if args.bathy_grid else datagen.AnalyticBathymetry()
    splits, manifest = datagen.generate_dataset(spec, bathy, oracle, out)
    counts = manifest["row_counts"]
    print(f"rows: {counts['total']} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train(args, cfg):
    out = _out_dir(args)
    splits, manifest = datagen.load_splits(args.data)
    tcfg = _build(train_mod.TrainConfig, cfg.get("train"), seed=args.seed, max_epochs=args.epochs,
                  batch_size=args.batch_size)
    mcfg = _build(model_mod.ModelConfig, cfg.get("model"), ablation=args.ablation)
    result = train_mod.train(splits["train"], splits["val"], tcfg, mcfg, log_path=out / "train_log.jsonl",
                             progress=lambda r: log.info("epoch %d val_neg_elbo %.4f val_mse %.4f",
                                                         r["epoch"], r["val_neg_elbo"], r["val_mse"]))
    result.model.metadata.update({
        "bathymetry": manifest.get("bathymetry"),
        "train_sha256": manifest.get("file_sha256", {}).get("train.csv"),
        "best_epoch": result.best_epoch,
    })
    model_mod.save(result.model, out / "model.json")
    print(f"best epoch {result.best_epoch}, val neg-ELBO {result.best_val:.4f}")
    return 0


def cmd_eval(args, cfg):
    out = _out_dir(args)
    model = model_mod.load(args.model)
    splits, _ = datagen.load_splits(args.data)
    metrics = train_mod.validate(model, splits[args.split])
    doc = {"split": args.split, "ablation": model.config.ablation, **metrics.to_dict()}
    _write_json(out / "metrics.json", doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_predict(args, cfg):
    out = _out_dir(args)
    model = model_mod.load(args.model)
    bathy = _bathy_source(args, model)
    pcfg = cfg.get("predict", {})
    source = _point(args.source or pcfg.get("source", ""))
    f_hz = float(args.freq if args.freq is not None else pcfg.get("freq_hz", 400.0))
    lats = _axis(args.lat or pcfg.get("lat", ""))
    lons = _axis(args.lon or pcfg.get("lon", ""))
    depths = np.array([float(d) for d in (args.depths or pcfg.get("depths", "10")).split(",")])
    LA, LO, DE = np.meshgrid(lats, lons, depths, indexing="ij")
    n = LA.size
    geometry = np.column_stack([np.full(n, source.lat), np.full(n, source.lon), np.full(n, source.depth),
                                LA.ravel(), LO.ravel(), DE.ravel(), np.full(n, f_hz)])
    t0 = time.perf_counter()
    profiles = datagen.sample_profiles(geometry[:, 0], geometry[:, 1], geometry[:, 3], geometry[:, 4], bathy)
    mean, var, _ = model_mod.predict_arrays(model, geometry, profiles, clamp=True)
    elapsed = time.perf_counter() - t0
    table = np.column_stack([geometry[:, 3], geometry[:, 4], geometry[:, 5], geometry[:, 6], mean, np.sqrt(var)])
    np.savetxt(out / "field.csv", table, fmt="%.6f", delimiter=",",
               header="lat,lon,depth,freq,tl_mean,tl_sigma", comments="")
    log.info("predicted %d points in %.3f s", n, elapsed)
    print(f"{n} points in {elapsed:.3f} s")
    return 0


def cmd_optimize_voyage(args, cfg):
    out = _out_dir(args)
    model = model_mod.load(args.model)
    route, receptor = voyage.read_route(args.route)
    tl = voyage.SurrogateTL(model, _bathy_source(args, model))
    plan = voyage.optimize_route(tl, route, receptor.position)
    plan.write(out / "voyage_plan.json", out / "rl_series.csv")
    print(f"{len(plan.legs)} legs, total SEL {plan.total_sel_db:.2f} dB, time {plan.total_time_s:.0f} s")
    return 0


def cmd_assimilate(args, cfg):
    out = _out_dir(args)
    model = model_mod.load(args.model)
    bathy = _bathy_source(args, model)
    acfg = cfg.get("assimilate", {})
    observations = assim.read_observations(args.observations)
    radius = float(args.radius_km if args.radius_km is not None else acfg.get("radius_km", 5.0))
    n_q = int(args.n_queries if args.n_queries is not None else acfg.get("n_queries", 100))
    rng = np.random.default_rng(args.seed)
    obs = observations[0]
    qg = assim.disk_queries(obs.position, obs.source, obs.f_hz, radius, n_q, rng)
    qb = datagen.sample_profiles(qg[:, 0], qg[:, 1], qg[:, 3], qg[:, 4], bathy)
    covariance = acfg.get("covariance", "prior")
    _, report = assim.assimilate(model, observations, bathy, covariance, queries=(qg, qb))
    assim.write_sidecar(out / "assimilation.json", args.model, observations, covariance)
    summary = report.summary()
    _write_json(out / "assimilation_report.json", summary)
    table = np.column_stack([qg[:, 3], qg[:, 4], qg[:, 5], report.prior_mean, report.prior_sigma,
                             report.posterior_mean, report.posterior_sigma])
    np.savetxt(out / "assimilation_queries.csv", table, fmt="%.6f", delimiter=",",
               header="lat,lon,depth,prior_mean,prior_sigma,post_mean,post_sigma", comments="")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=".", help="existing output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--ablation", choices=model_mod.ABLATIONS, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tlsurrogate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-sources", type=int)
    p.add_argument("--receivers", type=int, help="receivers per source")
    p.add_argument("--bathy-grid", help="gridded bathymetry file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a surrogate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="held-out metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="TL field on a lat/lon/depth grid")
    p.add_argument("--model", required=True)
    p.add_argument("--source", help="lat,lon,depth")
    p.add_argument("--freq", type=float)
    p.add_argument("--lat", help="lo,hi,count")
    p.add_argument("--lon", help="lo,hi,count")
    p.add_argument("--depths", help="comma-separated receiver depths")
    p.add_argument("--bathy-grid")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("optimize-voyage", parents=[common], help="per-leg speeds minimizing SEL")
    p.add_argument("--model", required=True)
    p.add_argument("--route", required=True)
    p.add_argument("--bathy-grid")
    p.set_defaults(func=cmd_optimize_voyage)

    p = sub.add_parser("assimilate", parents=[common], help="condition on hydrophone observations")
    p.add_argument("--model", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--radius-km", type=float)
    p.add_argument("--n-queries", type=int)
    p.add_argument("--bathy-grid")
    p.set_defaults(func=cmd_assimilate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = _load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.ablation is None:
            args.ablation = cfg.get("model", {}).get("ablation")
        return args.func(args, cfg)
    except FailureEscalation as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, VersionMismatch, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
