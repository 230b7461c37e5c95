"""Command-line entry point: ``overlapic {simulate,sweep,predict,optimize-pilot,replay}``.

Results go to stdout as JSON (and to ``--out`` as CSV/JSON files where
relevant).  Failures exit nonzero after printing ``{"error": ..., "message": ...}``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConfigError, OverlapICError
from .harness import (DETECTORS, PROFILES, SCENARIOS, ConfigPoint, ExperimentConfig, emit_outputs,
                      replay_row, run_sweep, run_trial)

# CLI flag -> ExperimentConfig field
_FIELDS = {
    "scenario": "scenario", "n_r": "n_r", "alpha": "alpha", "snr_db": "snr_db", "n_p": "n_p",
    "n_d": "n_d", "bandwidth_ratio": "bandwidth_ratio", "interferer_span": "interferer_span",
    "freq_offset": "freq_offset", "roll_off": "roll_off", "inr_db": "inr_db",
    "detectors": "detectors", "max_iters": "max_iters", "trials": "trials", "seed": "master_seed",
    "out": "output", "workers": "workers", "chunk_size": "chunk_size",
}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or TOML file with ExperimentConfig fields")
    p.add_argument("--profile", choices=sorted(PROFILES), help="preset trials / n_p")
    p.add_argument("--scenario", nargs="+", choices=SCENARIOS)
    p.add_argument("--n-r", type=int)
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--snr-db", type=float, nargs="+")
    p.add_argument("--n-p", type=int)
    p.add_argument("--n-d", type=int, nargs="+")
    p.add_argument("--bandwidth-ratio", type=int)
    p.add_argument("--interferer-span", type=int)
    p.add_argument("--freq-offset", type=float, help="frequency spacing times desired symbol period")
    p.add_argument("--roll-off", type=float)
    p.add_argument("--inr-db", type=float)
    p.add_argument("--detectors", nargs="+", choices=DETECTORS)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--chunk-size", type=int)


def config_from_args(args) -> ExperimentConfig:
    """Profile, then config file, then explicit flags (later sources win)."""
    data = dict(PROFILES[args.profile]) if args.profile else {}
    if args.config:
        data.update(ExperimentConfig.from_file(args.config).to_dict())
        if args.profile:
            data.update(PROFILES[args.profile])
    for flag, name in _FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[name] = v
    return ExperimentConfig.from_dict(data)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _print(obj):
    print(json.dumps(_clean(obj), indent=1))


def cmd_simulate(args):
    cfg = config_from_args(args)
    if len(list(cfg.points())) != 1:
        raise ConfigError("simulate runs a single point: give one scenario, alpha, n_d and SNR")
    return _run_and_emit(cfg)


def cmd_sweep(args):
    return _run_and_emit(config_from_args(args))


def _run_and_emit(cfg):
    table = run_sweep(cfg)
    out = {"config_hash": cfg.config_hash(), "rows": table.rows}
    if cfg.output:
        out["files"] = emit_outputs(table, cfg.output)
    _print(out)
    return 0


def cmd_predict(args):
    alphas = args.alpha or [0.99]
    nds = args.n_d or [3]
    snrs = args.snr_db or [10.0, 20.0, 30.0]
    n_p = args.n_p or 51
    rows = analysis.prediction_table(alphas, nds, n_p, snrs, sigma_i2=args.sigma_i2_source,
                                     draws=args.draws, seed=args.seed or 0)
    if args.out:
        path = Path(args.out)
        if path.suffix.lower() != ".csv":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "predictions.csv"
        path.write_text(analysis.prediction_csv(rows))
    _print({"rows": rows})
    return 0


def cmd_optimize(args):
    n_p = args.n_p or 51
    snr = (args.snr_db or [20.0])[0]
    nds = args.n_d or [1, 3, 7, 9, 15]
    res = []
    for a in args.alpha or [0.99]:
        tm = analysis.optimize_pilot_density(a, snr, n_p, nds, sigma_i2=args.sigma_i2_source,
                                             draws=args.draws, seed=args.seed or 0)
        res.append({"alpha": a, "snr_db": snr, "n_p": n_p, "n_d": tm.n_d.tolist(),
                    "pilot_density": tm.pilot_density.tolist(), "p_e": tm.p_e.tolist(),
                    "tp": tm.tp.tolist(), "n_d_opt": tm.n_d_opt, "density_opt": tm.density_opt,
                    "tp_max": tm.tp_max, "unimodal": tm.unimodal,
                    "interior_maximum": tm.interior_maximum})
    _print({"results": res})
    return 0


def cmd_replay(args):
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = ExperimentConfig.from_dict(manifest["config"])
    else:
        cfg = config_from_args(args)
    scen = (args.scenario or list(cfg.scenario))[0]
    alpha = (args.alpha or list(cfg.alpha))[0]
    nd = (args.n_d or list(cfg.n_d))[0]
    snr = (args.snr_db or list(cfg.snr_db))[0]
    if args.trial is not None:
        rec = run_trial(cfg, ConfigPoint(scen, float(alpha), int(nd), float(snr)), args.trial)
        _print({"trial": rec})
    else:
        det = args.detector or cfg.detectors[0]
        _print({"row": replay_row(cfg, scen, det, alpha, nd, snr)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="overlapic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, hlp in (("simulate", cmd_simulate, "run one configuration point"),
                          ("sweep", cmd_sweep, "run the full configuration grid")):
        sp = sub.add_parser(name, help=hlp)
        _add_config_flags(sp)
        sp.set_defaults(func=fn)
    for name, fn, hlp in (("predict", cmd_predict, "closed-form and model predictions (no link simulation)"),
                          ("optimize-pilot", cmd_optimize, "throughput-optimal pilot density")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--alpha", type=float, nargs="+")
        sp.add_argument("--n-d", type=int, nargs="+")
        sp.add_argument("--n-p", type=int)
        sp.add_argument("--snr-db", type=float, nargs="+")
        sp.add_argument("--sigma-i2-source", default="floor",
                        choices=["floor", "measured", "none"])
        sp.add_argument("--draws", type=int, default=400_000)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("replay", help="recompute one table row (or one trial) from its seed")
    _add_config_flags(sp)
    sp.add_argument("--manifest", help="manifest.json written by sweep/simulate")
    sp.add_argument("--detector", choices=DETECTORS)
    sp.add_argument("--trial", type=int, help="replay a single trial instead of the whole row")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OverlapICError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 2 if isinstance(exc, (ConfigError, ValueError)) else 1


if __name__ == "__main__":
    sys.exit(main())
