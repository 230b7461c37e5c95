"""Closed-form and semi-analytic performance predictions.

Covers the residual-interference floor and the SINR ceiling it implies,
the split of channel-estimation error into noise and fading parts, the
per-position equivalent SNR of the I-MAP combiner, a Monte Carlo SER
model, and throughput versus pilot density.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erfc

from .channel import cscg
from .errors import InsufficientSamples
from .estimator import pilot_weights


# --- floors ------------------------------------------------------------------------


@dataclass(frozen=True)
class FloorPrediction:
    alpha: float
    n_d: int
    n_p: int
    alpha_p: float
    sigma2_i_floor: float
    sinr_limit: float

    @property
    def sinr_limit_db(self) -> float:
        return 10.0 * math.log10(self.sinr_limit) if self.sinr_limit > 0 else -math.inf


def predict_floors(alpha: float, n_d: int, n_p: int, sigma_h2: float = 1.0) -> FloorPrediction:
    """Residual-interference floor ``a_p^2 (1 - a_p^2) / n_p`` and its reciprocal SINR limit."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if n_p < 2 or n_d < 0:
        raise ValueError("need n_p >= 2 and n_d >= 0")
    ap = alpha ** (n_d + 1)
    floor = sigma_h2 * ap ** 2 * (1.0 - ap ** 2) / n_p
    limit = math.inf if floor == 0.0 else 1.0 / floor
    return FloorPrediction(alpha, n_d, n_p, ap, floor, limit)


# --- channel-estimation error split -----------------------------------------------------


@dataclass(frozen=True)
class ErrorDecomposition:
    """Error multipliers for pilot ``n`` (0-based).

    ``h_n - h~_n = sum_m xi_g[m] w_m + xi_c0 h_0 + sum_k xi_c[k] Delta_k`` with
    ``w_m ~ CN(0, sigma2 I)`` the pilot noise, ``h_0`` the channel one pilot
    spacing before the first pilot and ``Delta_k ~ CN(0, sigma_h2 I)`` the
    unit-variance innovation entering at pilot ``k``.
    """

    n: int
    xi_g: np.ndarray
    xi_c0: float
    xi_c: np.ndarray
    sigma2: float
    sigma_h2: float

    @property
    def power_g(self) -> float:
        return float(np.sum(np.abs(self.xi_g) ** 2))

    @property
    def power_c(self) -> float:
        return float(self.xi_c0 ** 2 + np.sum(self.xi_c ** 2))

    @property
    def cee(self) -> float:
        """Predicted per-antenna mean squared estimation error at pilot ``n``."""
        return self.sigma2 * self.power_g + self.sigma_h2 * self.power_c


def estimator_weights(pilots, alpha_p: float, rho: float, n: int, sigma_h2: float = 1.0):
    """Real weights ``g_m`` with ``h~_n = sum_m g_m x_m* y_m`` in the interference-free case."""
    pilots = np.asarray(pilots, dtype=complex)
    N = pilots.size
    omega, beta_mag, s2, nbr = pilot_weights(N, alpha_p, rho, sigma_h2)
    col = omega[:, n] / s2[:, n]
    a = 1.0 + np.sum(np.abs(pilots) ** 2 * omega[:, n] ** 2 / s2[:, n])
    g = col.copy()
    # y_{i+j} enters through beta_{i,n} x_i* = |beta| |x_i|^2 x_{i+j}*
    others = np.arange(N) != n
    np.subtract.at(g, nbr[others, n], col[others] * beta_mag[others, n] * np.abs(pilots[others]) ** 2)
    return g / a


def cee_decomposition(pilots, alpha_p: float, rho: float, n: int,
                      sigma_h2: float = 1.0) -> ErrorDecomposition:
    """Split the interference-free estimation error at pilot ``n`` (0-based) into noise and fading parts.

    The multipliers come straight from the estimator's linear weights, so
    the predicted error power is exact for the Gauss-Markov model.
    """
    pilots = np.asarray(pilots, dtype=complex)
    N = pilots.size
    if not 0 <= n < N:
        raise ValueError(f"pilot index {n} outside 0..{N - 1}")
    g = estimator_weights(pilots, alpha_p, rho, n, sigma_h2)
    xi_g = -g * np.conj(pilots)
    # channel part: h_n - sum_m g_m |x_m|^2 h_m with h_m = a^(m+1) h_0 + s sum_{k<=m} a^(m-k) Delta_k
    gm = g * np.abs(pilots) ** 2
    m = np.arange(N)
    xi_c0 = alpha_p ** (n + 1) - float(np.sum(gm * alpha_p ** (m + 1)))
    s = math.sqrt(max(0.0, 1.0 - alpha_p ** 2))
    k = np.arange(N)
    lag = m[None, :] - k[:, None]                    # [k, m] = m - k
    tail = np.where(lag >= 0, alpha_p ** np.maximum(lag, 0).astype(float), 0.0) @ gm
    own = np.where(k <= n, alpha_p ** np.maximum(n - k, 0).astype(float), 0.0)
    xi_c = s * (own - tail)
    return ErrorDecomposition(n, xi_g, float(xi_c0), xi_c, sigma_h2 / rho, sigma_h2)


def predicted_cmse(pilots, alpha_p: float, rho: float, sigma_h2: float = 1.0) -> float:
    """Interference-free estimation MSE averaged over all pilots."""
    N = len(pilots)
    return float(np.mean([cee_decomposition(pilots, alpha_p, rho, n, sigma_h2).cee
                          for n in range(N)]))


# --- equivalent SNR and SER -------------------------------------------------------------


def _conditional_interp(i: int, n_d: int, alpha: float):
    """Weights and residual variance of ``h_i`` given the two framing channels."""
    j = n_d + 1 - i
    if alpha >= 1.0:
        return j / (n_d + 1), i / (n_d + 1), 0.0
    N = n_d + 1
    den = 1.0 - alpha ** (2 * N)
    wh = alpha ** i * (1.0 - alpha ** (2 * j)) / den
    wt = alpha ** j * (1.0 - alpha ** (2 * i)) / den
    v = 1.0 - (wh * alpha ** i + wt * alpha ** j)
    return wh, wt, max(v, 0.0)


def equivalent_snr(h_head, h_tail, i: int, n_d: int, alpha: float, sigma2: float,
                   sigma_i2: float = 0.0, *, form: str = "printed") -> np.ndarray:
    """Equivalent SNR of the I-MAP decision at 1-based position ``i``.

    ``form="printed"`` evaluates the closed form exactly as published,
    including its all-ones-vector terms in the denominator.
    ``form="exact"`` is the post-combiner SINR when ``h_head``/``h_tail``
    are the true framing channels: ``|mu|^2 / (v + sigma2 + sigma_i2)``
    with ``mu = E[h_i | h_head, h_tail]`` and ``v`` its residual variance.
    Both accept batched ``(..., R)`` inputs.
    """
    hh = np.asarray(h_head, dtype=complex)
    ht = np.asarray(h_tail, dtype=complex)
    if not 1 <= i <= n_d:
        raise ValueError(f"position {i} outside 1..{n_d}")
    if sigma_i2 < 0:
        raise ValueError("sigma_i2 must be non-negative")
    j = n_d + 1 - i
    if form == "exact":
        wh, wt, v = _conditional_interp(i, n_d, alpha)
        mu = wh * hh + wt * ht
        return np.sum(np.abs(mu) ** 2, axis=-1) / (v + sigma2 + sigma_i2)
    if form != "printed":
        raise ValueError("form must be 'printed' or 'exact'")
    ai = alpha ** i / (1.0 - alpha ** (2 * i))
    aj = alpha ** j / (1.0 - alpha ** (2 * j))
    num = alpha ** (2 * i) * np.abs(np.sum(np.abs(hh) ** 2, axis=-1) * ai
                                    + np.sum(np.conj(hh) * ht, axis=-1) * aj) ** 2
    den = (sigma2 + sigma_i2 + 1.0 - alpha ** (2 * i)) * np.abs(
        np.sum(np.conj(hh), axis=-1) * ai + np.sum(np.conj(ht), axis=-1) * aj) ** 2
    return num / den


def qpsk_symbol_error(rho):
    """QPSK symbol error rate at SNR ``rho``: ``erfc(s) - erfc(s)^2 / 4`` with ``s = sqrt(rho/2)``."""
    r = np.asarray(rho, dtype=float)
    if np.any(r < 0):
        raise ValueError("rho must be non-negative")
    e = erfc(np.sqrt(r / 2.0))
    out = e - 0.25 * e * e
    return float(out) if out.ndim == 0 else out


@dataclass
class SerModel:
    alpha: float
    n_d: int
    n_p: int
    snr_db: np.ndarray
    p_e_i: np.ndarray            # (S, n_d)
    ci_halfwidth: np.ndarray     # (S, n_d), 95% normal approximation
    sigma_i2: np.ndarray         # (S,)
    rho_e_mean: np.ndarray       # (S, n_d)
    mode: str = "estimated"
    form: str = "exact"

    @property
    def p_e(self) -> np.ndarray:
        return self.p_e_i.mean(axis=-1)


def pilot_error_covariances(n_p: int, alpha_p: float, noise: float, sigma_h2: float = 1.0):
    """Joint LMMSE error covariance of each neighbouring pilot pair, ``(n_p - 1, 2, 2)``."""
    idx = np.arange(n_p)
    Rpp = sigma_h2 * alpha_p ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    P = Rpp - Rpp @ np.linalg.solve(Rpp + noise * np.eye(n_p), Rpp)
    P = 0.5 * (P + P.T)
    return np.stack([P[m:m + 2, m:m + 2] for m in range(n_p - 1)])


def _sqrtm_psd(C):
    w, U = np.linalg.eigh(C)
    return U * np.sqrt(np.clip(w, 0.0, None))


def ser_curve(alpha: float, n_d: int, n_p: int, snr_db: Sequence[float], *,
              sigma_i2="measured", mode: str = "estimated", form: str = "exact", n_r: int = 2,
              draws: int = 200_000, seed: int = 0, rel_ci: float = 0.10,
              measured_trials: int = 500) -> SerModel:
    """Average SER of the I-MAP detector by Monte Carlo over the framing channels.

    ``sigma_i2`` selects the residual-interference variance: ``"measured"``
    (default, simulated through the estimator), ``"floor"`` (the asymptotic
    closed form), ``"none"`` (interference-free) or explicit number(s), one
    per SNR point.  ``mode="estimated"`` draws the framing channels as pilot
    estimates with their LMMSE error folded into the self-noise;
    ``mode="true"`` conditions on the true channels.  Raises
    :class:`InsufficientSamples` if any position's 95% half-width exceeds
    ``rel_ci`` of its estimate.
    """
    snr = np.atleast_1d(np.asarray(snr_db, dtype=float))
    if snr.size == 0:
        raise ValueError("SNR grid is empty")
    if mode not in ("estimated", "true"):
        raise ValueError("mode must be 'estimated' or 'true'")
    s2i = _resolve_sigma_i2(sigma_i2, alpha, n_d, n_p, snr, n_r, seed, measured_trials)
    ap = alpha ** (n_d + 1)
    rng = np.random.default_rng(seed)
    pe = np.empty((snr.size, n_d))
    ci = np.empty_like(pe)
    rho_mean = np.empty_like(pe)
    per = max(1, draws // (n_p - 1))
    # correlated unit draws shared across SNR points (common random numbers)
    z = cscg(rng, (n_p - 1, per, 2, n_r), 1.0)
    R2 = np.array([[1.0, ap], [ap, 1.0]])
    for s_idx, (sd, si2) in enumerate(zip(snr, s2i)):
        sigma2 = 10.0 ** (-sd / 10.0)
        if mode == "estimated":
            P2 = pilot_error_covariances(n_p, ap, sigma2 + si2)
        else:
            P2 = np.zeros((n_p - 1, 2, 2))
        rho_all = []
        for m in range(n_p - 1):
            Lm = _sqrtm_psd(R2 - P2[m])
            t = np.einsum("ab,kbr->kar", Lm, z[m])
            rho_all.append(np.stack([
                _rho_at(t, P2[m], i, n_d, alpha, sigma2, si2, form) for i in range(1, n_d + 1)]))
        rho = np.concatenate(rho_all, axis=-1)        # (n_d, draws)
        fe = qpsk_symbol_error(rho)
        rho_mean[s_idx] = rho.mean(axis=-1)
        pe[s_idx] = fe.mean(axis=-1)
        ci[s_idx] = 1.96 * fe.std(axis=-1, ddof=1) / math.sqrt(fe.shape[-1])
    bad = ci > rel_ci * pe
    if np.any(bad & (pe > 0)):
        s, i = np.argwhere(bad & (pe > 0))[0]
        raise InsufficientSamples(
            f"position {i + 1} at {snr[s]:g} dB: CI half-width {ci[s, i]:.3g} exceeds "
            f"{rel_ci:.0%} of {pe[s, i]:.3g}; increase draws")
    return SerModel(alpha, n_d, n_p, snr, pe, ci, np.asarray(s2i, dtype=float), rho_mean, mode, form)


def _rho_at(t, P2, i, n_d, alpha, sigma2, si2, form):
    """Equivalent SNR at position ``i`` for framing-channel draws ``t`` ``(K, 2, R)``."""
    wh, wt, v = _conditional_interp(i, n_d, alpha)
    hh, ht = t[:, 0], t[:, 1]
    if form == "printed":
        rho = equivalent_snr(hh, ht, i, n_d, alpha, sigma2, si2, form="printed")
    else:
        w = np.array([wh, wt])
        extra = float(w @ P2 @ w)
        mu = wh * hh + wt * ht
        rho = np.sum(np.abs(mu) ** 2, axis=-1) / (v + extra + sigma2 + si2)
    return rho


def _resolve_sigma_i2(src, alpha, n_d, n_p, snr, n_r, seed, trials):
    if isinstance(src, str):
        if src == "floor":
            return np.full(snr.size, predict_floors(alpha, n_d, n_p).sigma2_i_floor)
        if src == "none":
            return np.zeros(snr.size)
        if src == "measured":
            return np.array([measure_residual_power(alpha, n_d, n_p, s, trials=trials,
                                                    n_r=n_r, seed=seed) for s in snr])
        raise ValueError("sigma_i2 must be 'floor', 'measured', 'none' or numeric")
    v = np.broadcast_to(np.asarray(src, dtype=float), snr.shape).copy()
    if np.any(v < 0):
        raise ValueError("sigma_i2 must be non-negative")
    return v


def measure_residual_power(alpha: float, n_d: int, n_p: int, snr_db: float, *,
                           trials: int = 500, n_r: int = 2, seed: int = 0, **cfg_overrides) -> float:
    """Mean per-antenna residual interference power after cancellation, by simulation."""
    from .harness import ConfigPoint, ExperimentConfig, run_trials

    cfg = ExperimentConfig(n_r=n_r, alpha=(alpha,), snr_db=(snr_db,), n_p=n_p, n_d=(n_d,),
                           detectors=("I-MAP",), trials=trials, master_seed=seed, **cfg_overrides)
    recs = run_trials(cfg, ConfigPoint("interference-present", float(alpha), int(n_d), float(snr_db)),
                      range(trials))
    ok = [r["residual_power"] for r in recs if not r["failed"]]
    if not ok:
        raise InsufficientSamples("every residual-power trial failed")
    return float(np.mean(ok))


# --- throughput -----------------------------------------------------------------------


def overhead_factor(n_d: int, n_p: int) -> float:
    return n_d * (n_p - 1) / ((n_d + 1) * (n_p - 1) + 1)


def throughput(p_e, n_d: int, n_p: int):
    """Correctly detected data symbols per transmitted symbol."""
    p = np.asarray(p_e, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("P_e must lie in [0, 1]")
    out = (1.0 - p) * overhead_factor(n_d, n_p)
    return float(out) if out.ndim == 0 else out


@dataclass
class ThroughputModel:
    alpha: float
    snr_db: float
    n_p: int
    n_d: np.ndarray
    p_e: np.ndarray
    tp: np.ndarray
    n_d_opt: int
    n_d_search: int
    n_d_exhaustive: int
    unimodal: bool
    evaluations: int = 0

    @property
    def density_opt(self) -> float:
        return 1.0 / (self.n_d_opt + 1)

    @property
    def pilot_density(self) -> np.ndarray:
        return 1.0 / (self.n_d + 1.0)

    @property
    def tp_max(self) -> float:
        return float(self.tp[list(self.n_d).index(self.n_d_opt)])

    @property
    def interior_maximum(self) -> bool:
        k = int(np.argmax(self.tp))
        return 0 < k < len(self.tp) - 1


def _is_unimodal(v) -> bool:
    d = np.sign(np.diff(v))
    d = d[d != 0]
    return bool(np.all(np.diff(d) <= 0))


def discrete_peak_search(f: Callable[[int], float], n: int) -> int:
    """Index of the maximum of a unimodal sequence ``f(0..n-1)`` by bisection on its slope.

    Ties on a plateau resolve to the lower index.
    """
    lo, hi = 0, n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if f(mid) < f(mid + 1):
            lo = mid + 1
        else:
            hi = mid
    return lo


def optimize_pilot_density(alpha: float, snr_db: float, n_p: int, n_d_range: Sequence[int], *,
                           p_e_fn: Optional[Callable[[int], float]] = None,
                           **ser_kwargs) -> ThroughputModel:
    """Throughput-maximising ``n_d`` from a candidate list.

    Bisection over the sorted candidates finds the peak of a unimodal
    profile; the full profile is also scanned and wins whenever it is not
    unimodal.  ``p_e_fn(n_d)`` overrides the SER model (default:
    :func:`ser_curve` at ``snr_db``).
    """
    grid = np.array(sorted(set(int(n) for n in n_d_range)))
    if grid.size == 0:
        raise ValueError("n_d range is empty")
    if p_e_fn is None:
        def p_e_fn(nd):
            return float(ser_curve(alpha, int(nd), n_p, [snr_db], **ser_kwargs).p_e[0])
    cache: dict[int, float] = {}

    def pe(k):
        if k not in cache:
            cache[k] = p_e_fn(int(grid[k]))
        return cache[k]

    def tp_at(k):
        return throughput(pe(k), int(grid[k]), n_p)

    k_search = discrete_peak_search(tp_at, grid.size)
    evaluations = len(cache)
    p = np.array([pe(k) for k in range(grid.size)])
    tp = np.array([tp_at(k) for k in range(grid.size)])
    k_ex = int(np.argmax(tp))
    uni = _is_unimodal(tp)
    k_opt = k_search if uni and tp[k_search] >= tp[k_ex] else k_ex
    return ThroughputModel(alpha, snr_db, n_p, grid, p, tp, int(grid[k_opt]), int(grid[k_search]),
                           int(grid[k_ex]), uni, evaluations)


# --- export ------------------------------------------------------------------------------


PREDICTION_COLUMNS = ("alpha", "n_d", "n_p", "snr_db", "sigma2_i_floor", "sinr_limit_db",
                      "p_e_model", "tp_model", "n_d_opt")


def prediction_table(alphas: Sequence[float], n_d_values: Sequence[int], n_p: int,
                     snr_db: Sequence[float], **ser_kwargs) -> list:
    """Rows of closed-form floors, modelled SER/throughput and the best ``n_d`` per (alpha, SNR)."""
    rows = []
    for a in alphas:
        for s in snr_db:
            pes = {int(nd): float(ser_curve(a, int(nd), n_p, [s], **ser_kwargs).p_e[0])
                   for nd in n_d_values}
            tm = optimize_pilot_density(a, s, n_p, list(pes), p_e_fn=pes.__getitem__)
            for nd in sorted(pes):
                fl = predict_floors(a, nd, n_p)
                rows.append({
                    "alpha": float(a), "n_d": nd, "n_p": n_p, "snr_db": float(s),
                    "sigma2_i_floor": fl.sigma2_i_floor, "sinr_limit_db": fl.sinr_limit_db,
                    "p_e_model": pes[nd], "tp_model": throughput(pes[nd], nd, n_p),
                    "n_d_opt": tm.n_d_opt,
                })
    return rows


def prediction_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=PREDICTION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()
                    if k in PREDICTION_COLUMNS})
    return buf.getvalue()
