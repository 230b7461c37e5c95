"""Seeded Monte Carlo sweeps over the full receive chain, plus metric export.

Every trial draws its randomness from ``SeedSequence([master_seed, trial])``
and trials are processed in fixed-size chunks whose boundaries depend only
on the trial index.  Results are therefore bit-identical regardless of how
many worker processes are used, and any single trial can be replayed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .channel import FadingParams, FrameLayout, cscg, evolve_channel, generate_frame, qpsk_symbols
from .detector import (SMAP_MAX_ND, PilotGrid, build_intervals, cancel, flatten_intervals, imap_detect,
                       iterative_detect, nearest_pilot_detect, odd_detect, smap_detect)
from .errors import ConfigError, IoFailure
from .estimator import COND_LIMIT, estimate_frame
from .waveform import AlignmentConfig, PulseShape, compute_eic

SCENARIOS = ("interference-free", "interference-present")
DETECTORS = ("S-MAP", "I-MAP", "ODD", "nearest-pilot", "iterative")

PROFILES = {
    "paper": {"trials": 10_000, "n_p": 51},
    "desk": {"trials": 1_000, "n_p": 21},
}

TABLE_COLUMNS = (
    "scenario", "detector", "alpha", "n_d", "snr_db", "cmse", "cmse_ci_halfwidth", "ser",
    "ser_ci_halfwidth", "sinr_after_db", "residual_power", "tp", "iterations_mean",
    "trials", "completed", "failed", "seed",
)


def _as_tuple(v) -> tuple:
    if isinstance(v, (str, bytes)) or not isinstance(v, Iterable):
        return (v,)
    return tuple(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: the Cartesian product of scenarios, alphas, n_d values and SNRs."""

    scenario: tuple = ("interference-present",)
    n_r: int = 2
    alpha: tuple = (0.99,)
    snr_db: tuple = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
    n_p: int = 51
    n_d: tuple = (3,)
    bandwidth_ratio: int = 2
    interferer_span: Optional[int] = None
    freq_offset: float = 1.0
    roll_off: float = 0.25
    inr_db: float = 0.0
    detectors: tuple = ("S-MAP", "I-MAP", "ODD")
    max_iters: int = 10
    trials: int = 10_000
    master_seed: int = 0
    output: Optional[str] = None
    workers: int = 1
    chunk_size: int = 100

    def __post_init__(self):
        for name in ("scenario", "alpha", "snr_db", "n_d", "detectors"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        object.__setattr__(self, "n_d", tuple(int(n) for n in self.n_d))
        self.validate()

    def validate(self):
        if not self.detectors:
            raise ConfigError("detector set is empty")
        bad = [d for d in self.detectors if d not in DETECTORS]
        if bad:
            raise ConfigError(f"unknown detector(s) {bad}; choose from {list(DETECTORS)}")
        bad = [s for s in self.scenario if s not in SCENARIOS]
        if bad or not self.scenario:
            raise ConfigError(f"scenario must be drawn from {list(SCENARIOS)}")
        if not self.alpha or any(not 0.0 < a <= 1.0 for a in self.alpha):
            raise ConfigError("alpha values must lie in (0, 1]")
        if not self.snr_db:
            raise ConfigError("SNR grid is empty")
        if not self.n_d or any(n < 1 for n in self.n_d):
            raise ConfigError("n_d values must be >= 1")
        if self.n_p < 2 or self.n_r < 1 or self.trials < 1 or self.chunk_size < 1:
            raise ConfigError("need n_p >= 2, n_r >= 1, trials >= 1, chunk_size >= 1")
        if self.max_iters < 1 or self.workers < 1:
            raise ConfigError("max_iters and workers must be >= 1")
        try:
            self.alignment
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def alignment(self) -> AlignmentConfig:
        return AlignmentConfig(bandwidth_ratio=self.bandwidth_ratio,
                               interferer_span=self.interferer_span,
                               freq_offset=self.freq_offset)

    @property
    def L(self) -> int:
        return self.alignment.L

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[profile], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in ("output", "workers"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def points(self):
        for s in self.scenario:
            for a in self.alpha:
                for nd in self.n_d:
                    for snr in self.snr_db:
                        yield ConfigPoint(s, a, nd, snr)


@dataclass(frozen=True)
class ConfigPoint:
    scenario: str
    alpha: float
    n_d: int
    snr_db: float


@lru_cache(maxsize=32)
def _eic(roll_off: float, M: int, L: Optional[int], freq_offset: float):
    cfg = AlignmentConfig(bandwidth_ratio=M, interferer_span=L, freq_offset=freq_offset)
    p_d = PulseShape("rrc", roll_off, 1.0)
    p_i = PulseShape("rrc", roll_off, 1.0 / M)
    return compute_eic(p_d, p_i, cfg).c


def config_eic(cfg: ExperimentConfig) -> np.ndarray:
    """EIC vector for the configured pulses and alignment (computed once, cached)."""
    return _eic(cfg.roll_off, cfg.bandwidth_ratio, cfg.interferer_span, cfg.freq_offset)


def interference_power_scale(c: np.ndarray, inr_db: float) -> float:
    """Gain making the per-antenna interference power ``E|B_k c|^2`` equal ``10^(INR/10)``."""
    return math.sqrt(10.0 ** (inr_db / 10.0)) / float(np.linalg.norm(c))


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(trial)]))


def generate_trial(cfg: ExperimentConfig, point: ConfigPoint, trial: int):
    """Draw one frame: ``(y, x, B, c, h)`` with ``B = 0`` when interference-free."""
    rng = trial_rng(cfg.master_seed, trial)
    layout = FrameLayout(cfg.n_p, point.n_d)
    K, R = layout.frame_length, cfg.n_r
    fading = FadingParams(point.alpha, R, point.snr_db)
    h = evolve_channel(fading, K, rng).h
    x = generate_frame(layout, rng)
    c = config_eic(cfg)
    M, L = cfg.bandwidth_ratio, cfg.L
    h_i = np.exp(2j * np.pi * rng.random(R))
    b = qpsk_symbols(rng, M * (K - 1) + L + 1)
    w = cscg(rng, (K, R), fading.sigma2)
    if point.scenario == "interference-free":
        B = np.zeros((K, R, L), dtype=complex)
    else:
        ps = interference_power_scale(c, cfg.inr_db)
        cols = M * np.arange(K)[:, None] + 1 + np.arange(L)[None, :]
        B = ps * h_i[None, :, None] * b[cols][:, None, :]
    y = h * x[:, None] + B @ c + w
    return y, x, B, c, h


def _ser(x_hat, x_true):
    return np.mean(x_hat != x_true, axis=-1)


def _simulate_chunk(cfg: ExperimentConfig, point: ConfigPoint, trials: Sequence[int]) -> list:
    """Run a batch of trials through estimation and every configured detector."""
    layout = FrameLayout(cfg.n_p, point.n_d)
    sigma2 = 1.0 / 10.0 ** (point.snr_db / 10.0)
    alpha = point.alpha
    frames = [generate_trial(cfg, point, t) for t in trials]
    y = np.stack([f[0] for f in frames])
    x = np.stack([f[1] for f in frames])
    B = np.stack([f[2] for f in frames])
    c = frames[0][3]
    h = np.stack([f[4] for f in frames])
    pos, dpos = layout.pilot_positions, layout.data_positions
    interf = point.scenario == "interference-present"
    B_est = B if interf else None

    xp = np.broadcast_to(layout.pilot_symbols, x.shape[:-1] + (layout.n_p,))
    est = estimate_frame(y[:, pos], xp, None if B_est is None else B_est[:, pos],
                         layout.alpha_p(alpha), sigma2, check=False)
    cond = est.workspace.cond
    pd = est.workspace.positive_definite
    err_h = np.abs(h[:, pos] - est.h_tilde) ** 2
    cmse = err_h.mean(axis=(-2, -1))
    if interf:
        resid = np.mean(np.abs(np.einsum("tkrl,l->tkr", B, c)
                               - np.einsum("tkrl,tl->tkr", B, est.c_tilde)) ** 2, axis=(-2, -1))
    else:
        resid = np.zeros(len(trials))
    failed = ~pd | ~(cond <= COND_LIMIT) | ~np.isfinite(cmse) | ~np.isfinite(resid)

    x_true = x[:, dpos]
    sers = {}
    iv = build_intervals(y, B_est, est.c_tilde, est.h_tilde, layout, alpha, sigma2)
    y_clean = cancel(y, B_est, est.c_tilde)
    grid = PilotGrid(y_clean[:, pos], y_clean[:, dpos], layout, alpha, sigma2)
    iter_out = None
    for det in cfg.detectors:
        if det == "S-MAP":
            if point.n_d > SMAP_MAX_ND:
                sers[det] = np.full(len(trials), np.nan)   # beyond the enumeration budget
            else:
                sers[det] = _ser(flatten_intervals(smap_detect(iv).x_hat), x_true)
        elif det == "I-MAP":
            sers[det] = _ser(flatten_intervals(imap_detect(iv).x_hat), x_true)
        elif det == "ODD":
            sers[det] = _ser(odd_detect(grid).x_hat, x_true)
        elif det == "nearest-pilot":
            sers[det] = _ser(nearest_pilot_detect(grid).x_hat, x_true)
        elif det == "iterative":
            iter_out = iterative_detect(y, B_est, layout, alpha, sigma2,
                                        max_iters=cfg.max_iters, check=False)
            sers[det] = _ser(iter_out.x_hat, x_true)

    records = []
    for j, t in enumerate(trials):
        rec = {
            "trial": int(t), "failed": bool(failed[j]), "cond": float(cond[j]),
            "cmse": float(cmse[j]), "residual_power": float(resid[j]),
            "n_data": int(dpos.size), "ser": {d: float(v[j]) for d, v in sers.items()},
        }
        if iter_out is not None:
            hist = iter_out.history + [iter_out.history[-1]] * (cfg.max_iters + 1 - len(iter_out.history))
            chist = iter_out.channel_history
            cm = [float(np.mean(np.abs(h[j, pos] - (chist[0][j] if i == 0 else chist[i][j, pos])) ** 2))
                  for i in range(len(chist))]
            cm += [cm[-1]] * (cfg.max_iters + 1 - len(cm))
            rec["iter_ser"] = [float(np.mean(hh[j] != x_true[j])) for hh in hist]
            rec["iter_cmse"] = cm
            rec["iterations_used"] = int(iter_out.iterations_used[j])
            rec["converged"] = bool(iter_out.converged[j])
            ch = [int(cnt[j]) for cnt in iter_out.changes]
            rec["changes"] = ch
        records.append(rec)
    return records


def _chunks(trials: Sequence[int], size: int):
    """Group trial indices by ``trial // size`` so chunk contents never depend on scheduling."""
    groups: dict[int, list] = {}
    for t in sorted(set(int(t) for t in trials)):
        groups.setdefault(t // size, []).append(t)
    return [groups[k] for k in sorted(groups)]


def _full_chunk(t: int, size: int, total: int):
    start = (t // size) * size
    return list(range(start, min(start + size, max(total, t + 1))))


def run_trials(cfg: ExperimentConfig, point: ConfigPoint, trials: Sequence[int]) -> list:
    """Per-trial records for the given indices, sorted by trial index.

    Each requested trial is computed inside its canonical chunk, so the
    numbers match a full sweep to the last bit.
    """
    wanted = sorted(set(int(t) for t in trials))
    needed = sorted({u for t in wanted for u in _full_chunk(t, cfg.chunk_size, cfg.trials)})
    jobs = _chunks(needed, cfg.chunk_size)
    out = _map_chunks(cfg, point, jobs)
    keep = set(wanted)
    return [r for r in out if r["trial"] in keep]


def run_trial(cfg: ExperimentConfig, point: ConfigPoint, trial: int) -> dict:
    return run_trials(cfg, point, [trial])[0]


def _chunk_job(args):
    cfg, point, chunk = args
    return _simulate_chunk(cfg, point, chunk)


def _map_chunks(cfg, point, jobs) -> list:
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            parts = list(ex.map(_chunk_job, [(cfg, point, j) for j in jobs]))
    else:
        parts = [_simulate_chunk(cfg, point, j) for j in jobs]
    recs = [r for p in parts for r in p]
    recs.sort(key=lambda r: r["trial"])
    return recs


# --- aggregation ---------------------------------------------------------------------


def _ci(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float("nan")
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def overhead(n_d: int, n_p: int) -> float:
    return n_d * (n_p - 1) / ((n_d + 1) * (n_p - 1) + 1)


@dataclass
class PointResult:
    point: ConfigPoint
    records: list

    @property
    def ok(self) -> list:
        return [r for r in self.records if not r["failed"]]


@dataclass
class MetricTable:
    rows: list
    config: ExperimentConfig
    points: list = field(default_factory=list)   # PointResult per grid point

    def select(self, **match) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def one(self, **match) -> dict:
        rows = self.select(**match)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {match}")
        return rows[0]

    def to_csv(self, columns=TABLE_COLUMNS) -> str:
        return _csv(self.rows, columns)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def aggregate_point(cfg: ExperimentConfig, pr: PointResult) -> list:
    """Rows (one per detector) for one grid point, from per-trial records."""
    p = pr.point
    ok = pr.ok
    n_ok = len(ok)
    sigma2 = 1.0 / 10.0 ** (p.snr_db / 10.0)
    cm = [r["cmse"] for r in ok]
    res = [r["residual_power"] for r in ok]
    mean_res = float(np.mean(res)) if ok else float("nan")
    sinr = 1.0 / (sigma2 + mean_res) if ok else float("nan")
    base = {
        "scenario": p.scenario, "alpha": p.alpha, "n_d": p.n_d, "snr_db": p.snr_db,
        "cmse": float(np.mean(cm)) if ok else float("nan"), "cmse_ci_halfwidth": _ci(cm),
        "sinr_after_db": 10.0 * math.log10(sinr) if ok else float("nan"),
        "residual_power": mean_res, "trials": len(pr.records), "completed": n_ok,
        "failed": len(pr.records) - n_ok, "seed": cfg.master_seed,
    }
    rows = []
    for det in cfg.detectors:
        s = [r["ser"][det] for r in ok]
        ser = float(np.mean(s)) if ok else float("nan")
        row = dict(base, detector=det, ser=ser, ser_ci_halfwidth=_ci(s),
                   tp=(1.0 - ser) * overhead(p.n_d, cfg.n_p), iterations_mean=float("nan"))
        if det == "iterative" and ok:
            row["iterations_mean"] = float(np.mean([r["iterations_used"] for r in ok]))
        rows.append(row)
    return rows


def run_point(cfg: ExperimentConfig, point: ConfigPoint) -> PointResult:
    return PointResult(point, run_trials(cfg, point, range(cfg.trials)))


def run_sweep(cfg: ExperimentConfig) -> MetricTable:
    rows, results = [], []
    for p in cfg.points():
        pr = run_point(cfg, p)
        results.append(pr)
        rows.extend(aggregate_point(cfg, pr))
    return MetricTable(rows, cfg, results)


def replay_row(cfg: ExperimentConfig, scenario: str, detector: str, alpha: float, n_d: int,
               snr_db: float) -> dict:
    """Recompute one table row from its configuration and seed."""
    if detector not in cfg.detectors:
        raise ConfigError(f"detector {detector!r} is not part of the configuration")
    pr = run_point(cfg, ConfigPoint(scenario, float(alpha), int(n_d), float(snr_db)))
    rows = aggregate_point(cfg, pr)
    return next(r for r in rows if r["detector"] == detector)


# --- figure-style views and export ---------------------------------------------------------


VIEW_COLUMNS = {
    "cmse_vs_snr": ("scenario", "alpha", "n_d", "snr_db", "cmse", "cmse_ci_halfwidth", "trials", "completed", "seed"),
    "sinr_vs_snr": ("scenario", "alpha", "n_d", "snr_db", "sinr_after_db", "residual_power", "trials", "completed", "seed"),
    "ser_vs_snr": ("scenario", "detector", "alpha", "n_d", "snr_db", "ser", "ser_ci_halfwidth", "trials", "completed", "seed"),
    "ser_vs_iteration": ("scenario", "alpha", "n_d", "snr_db", "iteration", "ser", "cmse", "trials", "seed"),
    "tp_vs_pilot_density": ("scenario", "detector", "alpha", "snr_db", "n_d", "pilot_density", "ser", "tp", "trials", "seed"),
}


def build_views(table: MetricTable) -> dict:
    cfg = table.config
    views = {k: [] for k in VIEW_COLUMNS}
    seen = set()
    for r in table.rows:
        key = (r["scenario"], r["alpha"], r["n_d"], r["snr_db"])
        if key not in seen:
            seen.add(key)
            views["cmse_vs_snr"].append(r)
            views["sinr_vs_snr"].append(r)
        views["ser_vs_snr"].append(r)
    for pr in table.points:
        ok = pr.ok
        if not ok or "iter_ser" not in ok[0]:
            continue
        p = pr.point
        for it in range(cfg.max_iters + 1):
            views["ser_vs_iteration"].append({
                "scenario": p.scenario, "alpha": p.alpha, "n_d": p.n_d, "snr_db": p.snr_db,
                "iteration": it, "ser": float(np.mean([r["iter_ser"][it] for r in ok])),
                "cmse": float(np.mean([r["iter_cmse"][it] for r in ok])),
                "trials": len(pr.records), "seed": cfg.master_seed,
            })
    tp = sorted(table.rows, key=lambda r: (r["scenario"], r["detector"], r["alpha"], r["snr_db"], r["n_d"]))
    for r in tp:
        views["tp_vs_pilot_density"].append(dict(r, pilot_density=1.0 / (r["n_d"] + 1)))
    return views


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit_outputs(table: MetricTable, out_dir, formats=("csv", "json")) -> dict:
    """Write the full table, one file per view in each format, and a manifest.

    Returns a mapping from logical name to written path.
    """
    if not table.rows:
        raise ConfigError("nothing to emit: the metric table is empty")
    out = Path(out_dir)
    views = build_views(table)
    written = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        items = [("metrics", table.rows, TABLE_COLUMNS)] + [
            (name, rows, VIEW_COLUMNS[name]) for name, rows in views.items()]
        for name, rows, cols in items:
            if "csv" in formats:
                p = out / f"{name}.csv"
                p.write_text(_csv(rows, cols))
                written[f"{name}.csv"] = str(p)
            if "json" in formats:
                p = out / f"{name}.json"
                p.write_text(json.dumps([{c: _json_safe(r.get(c)) for c in cols} for r in rows],
                                        indent=1))
                written[f"{name}.json"] = str(p)
        cfg = table.config
        manifest = {
            "config": cfg.to_dict(), "config_hash": cfg.config_hash(),
            "master_seed": cfg.master_seed,
            "trial_seeds": "numpy SeedSequence([master_seed, trial_index])",
            "sinr_averaging": "residual power averaged linearly over trials, SINR = 1/(sigma2 + mean), then dB",
            "ci": "normal approximation, 95%, over per-trial values",
            "files": sorted(written),
        }
        p = out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        written["manifest.json"] = str(p)
    except OSError as exc:
        raise IoFailure(f"cannot write outputs to {out}: {exc}") from exc
    return written
