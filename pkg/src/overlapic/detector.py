"""Phase 2: symbol detection between pilots.

Three detectors work on an interval of ``n_d`` data symbols framed by two
channel estimates ``h_head`` and ``h_tail``:

* S-MAP scores every candidate sequence with the channel marginalised out
  and picks the best one.
* I-MAP combines the two neighbouring estimates with fixed weights and
  decides each symbol on its own.
* ODD interpolates the data-position channels from every pilot of the
  frame by linear MMSE and applies a zero-forcing decision.

:func:`iterative_detect` then feeds detected symbols back as extra pilots.
Arrays may carry leading batch dimensions throughout.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq

from .channel import QPSK, FrameLayout, nearest_qpsk_index
from .errors import (BudgetExceeded, DegenerateAlpha, RecursionBreakdown,
                     SingularInterpolation, ZeroCorrelator)
from .estimator import estimate_frame

SMAP_MAX_ND = 10


@dataclass
class DetectionInterval:
    """Data block between two pilots, with interference already subtracted.

    ``h_head``/``h_tail`` are ``(..., R)``, ``y`` is ``(..., n_d, R)``.
    """

    h_head: np.ndarray
    h_tail: np.ndarray
    y: np.ndarray
    alpha: float
    sigma2: float
    sigma_h2: float = 1.0
    constellation: np.ndarray = field(default_factory=lambda: QPSK.copy())

    def __post_init__(self):
        self.h_head = np.asarray(self.h_head, dtype=complex)
        self.h_tail = np.asarray(self.h_tail, dtype=complex)
        self.y = np.asarray(self.y, dtype=complex)
        if self.y.ndim < 2 or self.y.shape[-2] < 1:
            raise ValueError("an interval needs at least one data symbol")
        if not (np.all(np.isfinite(self.h_head)) and np.all(np.isfinite(self.h_tail))):
            raise ValueError("head/tail channel estimates must be finite")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def n_d(self) -> int:
        return self.y.shape[-2]


@dataclass
class DetectedFrame:
    x_hat: np.ndarray
    indices: np.ndarray
    method: str
    iterations_used: int | np.ndarray = 0
    flags: dict = field(default_factory=dict)


def _decide(z, method, constellation=QPSK, **extra):
    idx = nearest_qpsk_index(z)
    flags = {"zero_correlator": int(np.count_nonzero(z == 0))}
    flags.update(extra)
    return DetectedFrame(constellation[idx], idx, method, 0, flags)


# --- S-MAP ----------------------------------------------------------------------


@dataclass(frozen=True)
class SMapWorkspace:
    tau1: float
    tau2: float
    S: np.ndarray       # (n_d,) scalar S_i; the N_r x N_r matrices are S_i * I
    Gamma: np.ndarray   # (n_d, n_d) lower triangular Gamma_{i,j}


@lru_cache(maxsize=128)
def smap_workspace(n_d: int, alpha: float, sigma2: float, sigma_h2: float = 1.0) -> SMapWorkspace:
    """Run the ``S_i`` recursion once per ``(n_d, alpha, sigma2)``.

    For a unit-modulus alphabet every ``S_i`` is a multiple of the identity
    and does not depend on the candidate, so scalars suffice.
    """
    if alpha >= 1.0:
        raise DegenerateAlpha("the S recursion needs alpha < 1")
    tau1 = 1.0 / ((1.0 - alpha ** 2) * sigma_h2)
    tau2 = alpha * tau1
    diag = 1.0 / sigma2 + (1.0 + alpha ** 2) * tau1
    S = np.empty(n_d)
    inv = diag
    for i in range(n_d):
        if i:
            inv = diag - tau2 ** 2 * S[i - 1]
        if not inv > 0.0:
            raise RecursionBreakdown(f"S_{i + 1}^-1 = {inv:g} is not positive definite")
        S[i] = 1.0 / inv
    G = np.zeros((n_d, n_d))
    for i in range(n_d):
        G[i, i] = 1.0
        for j in range(i - 1, -1, -1):
            G[i, j] = G[i, j + 1] * tau2 * S[j]
    S.setflags(write=False)
    G.setflags(write=False)
    return SMapWorkspace(tau1, tau2, S, G)


def _candidate_indices(n_d: int, m: int = 4) -> np.ndarray:
    return np.array(list(itertools.product(range(m), repeat=n_d)), dtype=np.int64).reshape(-1, n_d)


def _as_candidate_symbols(candidate, constellation):
    c = np.asarray(candidate)
    if np.issubdtype(c.dtype, np.integer):
        return constellation[c]
    c = c.astype(complex)
    if not np.all(np.min(np.abs(c[..., None] - constellation), axis=-1) < 1e-9):
        raise ValueError("candidate entries must be constellation points")
    return c


def _interp_limit(iv: DetectionInterval):
    """Linear interpolation between head and tail: the alpha -> 1 channel mean."""
    n_d = iv.n_d
    i = np.arange(1, n_d + 1)[:, None]
    return ((n_d + 1 - i) * iv.h_head[..., None, :] + i * iv.h_tail[..., None, :]) / (n_d + 1)


def smap_score(interval: DetectionInterval, candidate) -> np.ndarray:
    """Score ``F(x) = sum_i S_i ||b~_i(x)||^2`` of one or more candidate sequences.

    ``candidate`` is ``(n_d,)`` or ``(K, n_d)``, given either as symbols or
    as constellation indices.  Differences of ``F`` are log-posterior
    differences of ``x`` given ``(h_head, h_tail, y)``.

    For ``alpha = 1`` the score is replaced by its limit, the matched-filter
    metric ``2 Re sum_i x_i* u_i^H y_i / sigma2`` with ``u_i`` the linear
    interpolation between head and tail.
    """
    iv = interval
    x = _as_candidate_symbols(candidate, iv.constellation)
    single = x.ndim == 1
    x = np.atleast_2d(x)                                   # (K, n_d)
    if x.shape[-1] != iv.n_d:
        raise ValueError(f"candidate length {x.shape[-1]} != n_d {iv.n_d}")
    if iv.alpha >= 1.0:
        u = _interp_limit(iv)
        corr = np.einsum("...ir,...ir->...i", np.conj(u), iv.y)
        out = 2.0 * np.real(np.einsum("ki,...i->...k", np.conj(x), corr)) / iv.sigma2
        return out[..., 0] if single else out
    ws = smap_workspace(iv.n_d, float(iv.alpha), float(iv.sigma2), float(iv.sigma_h2))
    # b_i = x_i* y_i / sigma2 + tau2 (h_head [i=1] + h_tail [i=n_d])
    b = np.conj(x)[:, :, None] * iv.y[..., None, :, :] / iv.sigma2      # (..., K, n_d, R)
    b[..., 0, :] += ws.tau2 * iv.h_head[..., None, :]
    b[..., -1, :] += ws.tau2 * iv.h_tail[..., None, :]
    bt = np.einsum("ij,...kjr->...kir", ws.Gamma, b)
    out = np.einsum("i,...kir->...k", ws.S, np.abs(bt) ** 2)
    return out[..., 0] if single else out


def smap_all_scores(interval: DetectionInterval) -> np.ndarray:
    """Scores of all ``4**n_d`` candidates in lexicographic index order, ``(..., 4**n_d)``.

    Uses the forward recursion ``b~_i = b_i + tau2 S_{i-1} b~_{i-1}`` so
    each candidate prefix is processed once.
    """
    iv = interval
    if iv.alpha >= 1.0 or iv.n_d == 1:
        return smap_score(iv, _candidate_indices(iv.n_d, iv.constellation.size))
    ws = smap_workspace(iv.n_d, float(iv.alpha), float(iv.sigma2), float(iv.sigma_h2))
    m = iv.constellation.size
    # z[..., i, s, :] = conj(symbol s) y_i / sigma2
    z = np.conj(iv.constellation)[:, None] * iv.y[..., :, None, :] / iv.sigma2
    bt = z[..., 0, :, :] + ws.tau2 * iv.h_head[..., None, :]           # (..., m, R)
    score = ws.S[0] * np.sum(np.abs(bt) ** 2, axis=-1)
    for i in range(1, iv.n_d):
        zi = z[..., i, :, :]
        if i == iv.n_d - 1:
            zi = zi + ws.tau2 * iv.h_tail[..., None, :]
        carry = ws.tau2 * ws.S[i - 1] * bt
        bt = carry[..., :, None, :] + zi[..., None, :, :]             # (..., K, m, R)
        score = score[..., :, None] + ws.S[i] * np.sum(np.abs(bt) ** 2, axis=-1)
        bt = bt.reshape(bt.shape[:-3] + (-1, bt.shape[-1]))
        score = score.reshape(score.shape[:-2] + (-1,))
    return score


def smap_detect(interval: DetectionInterval, budget: int = SMAP_MAX_ND,
                max_elements: int = 1 << 22) -> DetectedFrame:
    """Exhaustive series MAP over the interval; ties go to the lexicographically first.

    Batched intervals are scored in slices so that at most ``max_elements``
    candidate scores are held at once.
    """
    iv = interval
    if iv.n_d > budget:
        raise BudgetExceeded(
            f"S-MAP enumerates 4^{iv.n_d} sequences (cap n_d <= {budget}); use I-MAP instead")
    m = iv.constellation.size
    K = m ** iv.n_d
    batch = iv.y.shape[:-2]
    R = iv.y.shape[-1]
    hh = np.broadcast_to(iv.h_head, batch + (R,)).reshape(-1, R)
    ht = np.broadcast_to(iv.h_tail, batch + (R,)).reshape(-1, R)
    yy = iv.y.reshape((-1,) + iv.y.shape[-2:])
    step = max(1, max_elements // K)
    best = np.empty(yy.shape[0], dtype=np.int64)
    for s0 in range(0, yy.shape[0], step):
        sl = slice(s0, s0 + step)
        part = DetectionInterval(hh[sl], ht[sl], yy[sl], iv.alpha, iv.sigma2, iv.sigma_h2,
                                 iv.constellation)
        best[sl] = np.argmax(smap_all_scores(part), axis=-1)
    idx = _candidate_indices(iv.n_d, m)[best].reshape(batch + (iv.n_d,))
    return DetectedFrame(iv.constellation[idx], idx, "S-MAP", 0, {})


# --- I-MAP ----------------------------------------------------------------------


def imap_weights(i: int, n_d: int, alpha: float, *, allow_limit: bool = False):
    """Head and tail weights of the I-MAP combiner at 1-based position ``i``.

    At ``alpha = 1`` both weights diverge; with ``allow_limit`` their limiting
    ratio is used instead, which turns the combiner into linear interpolation
    ``((n_d + 1 - i) h_head + i h_tail) / (n_d + 1)``.
    """
    if not 1 <= i <= n_d:
        raise ValueError(f"position {i} outside 1..{n_d}")
    j = n_d + 1 - i
    if alpha >= 1.0:
        if not allow_limit:
            raise DegenerateAlpha("I-MAP weights diverge at alpha = 1")
        return j / (n_d + 1), i / (n_d + 1)
    return alpha ** i / (1.0 - alpha ** (2 * i)), alpha ** j / (1.0 - alpha ** (2 * j))


def imap_combiner(h_head, h_tail, i: int, n_d: int, alpha: float) -> np.ndarray:
    """``breve_h_i``: precision-weighted sum of the two neighbouring pilot channels."""
    wh, wt = imap_weights(i, n_d, alpha)
    return wh * np.asarray(h_head) + wt * np.asarray(h_tail)


def _imap_combined(iv: DetectionInterval):
    w = np.array([imap_weights(i, iv.n_d, iv.alpha, allow_limit=True)
                  for i in range(1, iv.n_d + 1)])
    return w[:, 0, None] * iv.h_head[..., None, :] + w[:, 1, None] * iv.h_tail[..., None, :]


def imap_detect(interval: DetectionInterval, *, strict: bool = False) -> DetectedFrame:
    """Per-symbol decisions from the normalised correlator ``breve_h^H y / |.|``.

    A correlator that is exactly zero falls back to the first constellation
    point and is counted in ``flags['zero_correlator']``; ``strict`` raises
    :class:`ZeroCorrelator` instead.
    """
    hb = _imap_combined(interval)
    z = np.einsum("...ir,...ir->...i", np.conj(hb), interval.y)
    if strict and np.any(z == 0):
        raise ZeroCorrelator("combiner output is exactly zero")
    mag = np.abs(z)
    z = np.divide(z, mag, out=np.zeros_like(z), where=mag > 0)
    return _decide(z, "I-MAP", interval.constellation)


# --- ODD baseline ---------------------------------------------------------------


@dataclass(frozen=True)
class OddInterpolator:
    """LMMSE weights from the pilot observations to every data position.

    ``W[k, n]`` maps the de-rotated pilot sample ``x_n* y_n`` to the channel
    at data position ``k``; ``W_pilot`` gives the smoothed pilot channels.
    """

    W: np.ndarray
    W_pilot: np.ndarray
    layout: FrameLayout
    alpha: float
    sigma2: float


@lru_cache(maxsize=64)
def _odd_weights(n_p: int, n_d: int, alpha: float, sigma2: float, sigma_h2: float):
    layout = FrameLayout(n_p, n_d)
    pp = layout.pilot_positions
    dp = layout.data_positions
    R_pp = sigma_h2 * alpha ** np.abs(pp[:, None] - pp[None, :]).astype(float)
    R_dp = sigma_h2 * alpha ** np.abs(dp[:, None] - pp[None, :]).astype(float)
    A = R_pp + sigma2 * np.eye(n_p)
    try:
        f = cho_factor(A)
        W = cho_solve(f, R_dp.T).T
        Wp = cho_solve(f, R_pp).T
    except LinAlgError:
        # numerically rank-deficient (alpha near 1, negligible noise): minimum-norm solution
        try:
            W = lstsq(A, R_dp.T)[0].T
            Wp = lstsq(A, R_pp)[0].T
        except LinAlgError as exc:
            raise SingularInterpolation(f"pilot correlation solve failed: {exc}") from exc
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(Wp))):
        raise SingularInterpolation("pilot correlation solve produced non-finite weights")
    W.setflags(write=False)
    Wp.setflags(write=False)
    return W, Wp


def odd_interpolator(layout: FrameLayout, alpha: float, sigma2: float,
                     sigma_h2: float = 1.0) -> OddInterpolator:
    W, Wp = _odd_weights(layout.n_p, layout.n_d, float(alpha), float(sigma2), float(sigma_h2))
    return OddInterpolator(W, Wp, layout, alpha, sigma2)


@dataclass
class PilotGrid:
    """Frame-level input to the ODD and nearest-pilot detectors.

    ``y_pilot`` is ``(..., n_p, R)`` and ``y_data`` is ``(..., n_data, R)``,
    both after interference subtraction.
    """

    y_pilot: np.ndarray
    y_data: np.ndarray
    layout: FrameLayout
    alpha: float
    sigma2: float
    sigma_h2: float = 1.0

    def derotated_pilots(self):
        return np.conj(self.layout.pilot_symbols)[:, None] * np.asarray(self.y_pilot)


def _zf(h, y):
    num = np.einsum("...kr,...kr->...k", np.conj(h), y)
    den = np.sum(np.abs(h) ** 2, axis=-1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def odd_detect(grid: PilotGrid) -> DetectedFrame:
    """Interpolate data channels by LMMSE from all pilots, then zero-force."""
    interp = odd_interpolator(grid.layout, grid.alpha, grid.sigma2, grid.sigma_h2)
    h_int = np.einsum("kn,...nr->...kr", interp.W, grid.derotated_pilots())
    return _decide(_zf(h_int, grid.y_data), "ODD")


def nearest_pilot_detect(grid: PilotGrid) -> DetectedFrame:
    """Reference detector: the smoothed channel of the closest pilot, no interpolation.

    Ties between two equidistant pilots go to the leading one.
    """
    interp = odd_interpolator(grid.layout, grid.alpha, grid.sigma2, grid.sigma_h2)
    h_p = np.einsum("mn,...nr->...mr", interp.W_pilot, grid.derotated_pilots())
    lay = grid.layout
    off = lay.data_positions % (lay.n_d + 1)
    nearest = lay.data_positions // (lay.n_d + 1) + (off > (lay.n_d + 1) / 2)
    return _decide(_zf(h_p[..., nearest, :], grid.y_data), "nearest-pilot")


# --- frame plumbing and the iterative loop ------------------------------------------


def build_intervals(y, B, c_tilde, h_tilde, layout: FrameLayout, alpha: float,
                    sigma2: float, sigma_h2: float = 1.0) -> DetectionInterval:
    """All ``n_p - 1`` intervals of a frame as one batched :class:`DetectionInterval`.

    ``y`` ``(..., K, R)`` and ``B`` ``(..., K, R, L)`` cover the whole frame,
    ``h_tilde`` ``(..., n_p, R)`` holds the pilot channel estimates.
    """
    y_clean = cancel(y, B, c_tilde)
    yd = y_clean[..., layout.data_positions, :]
    yd = yd.reshape(yd.shape[:-2] + (layout.n_p - 1, layout.n_d, yd.shape[-1]))
    h_tilde = np.asarray(h_tilde)
    return DetectionInterval(h_tilde[..., :-1, :], h_tilde[..., 1:, :], yd, alpha, sigma2, sigma_h2)


def cancel(y, B, c_tilde):
    """``y_k - B_k c~`` (``B=None`` or ``c_tilde=None`` means nothing to cancel)."""
    y = np.asarray(y, dtype=complex)
    if B is None or c_tilde is None:
        return y
    return y - np.einsum("...krl,...l->...kr", B, c_tilde)


def flatten_intervals(x_int: np.ndarray) -> np.ndarray:
    """``(..., n_p - 1, n_d)`` per-interval decisions to ``(..., n_data)`` frame order."""
    return x_int.reshape(x_int.shape[:-2] + (-1,))


@dataclass
class IterativeResult:
    x_hat: np.ndarray               # (..., n_data) detected data symbols at exit
    iterations_used: np.ndarray     # (...,) while-loop passes until no change
    converged: np.ndarray           # (...,) bool
    history: list                   # x_hat at iteration 0, 1, ...
    changes: list                   # per pass: number of data symbols that changed
    channel_history: list           # h estimates over the whole frame per pass (pass 0: pilots only)
    eic_history: list

    @property
    def detected(self) -> DetectedFrame:
        idx = nearest_qpsk_index(self.x_hat)
        return DetectedFrame(self.x_hat, idx, "iterative", self.iterations_used,
                             {"non_convergence": int(np.count_nonzero(~self.converged))})


def _neighbour_detect(y_clean, h_frame, layout: FrameLayout, alpha: float):
    """Single-symbol I-MAP at every data position, using the frame estimates at n-1 and n+1."""
    dp = layout.data_positions
    scale = 0.5 if alpha >= 1.0 else alpha / (1.0 - alpha ** 2)
    h_hat = scale * (h_frame[..., dp - 1, :] + h_frame[..., dp + 1, :])
    z = np.einsum("...kr,...kr->...k", np.conj(h_hat), y_clean[..., dp, :])
    return QPSK[nearest_qpsk_index(z)]


def iterative_detect(y, B, layout: FrameLayout, alpha: float, sigma2: float, *,
                     max_iters: int = 10, check: bool = True) -> IterativeResult:
    """Alternate whole-frame estimation and single-gap I-MAP until decisions settle.

    Pass 0 runs the pilot-only estimator and interval I-MAP.  Every further
    pass treats the whole frame as pilots (correlation ``alpha`` between
    neighbours), re-estimates EICs and channels, and re-detects each data
    symbol from its two neighbours.  A trial stops at the first pass that
    reproduces the previous decisions; trials still changing after
    ``max_iters`` passes are reported as not converged.
    """
    pos = layout.pilot_positions
    y = np.asarray(y, dtype=complex)
    Bp = None if B is None else B[..., pos, :, :]
    est0 = estimate_frame(y[..., pos, :], np.broadcast_to(layout.pilot_symbols, y.shape[:-2] + (layout.n_p,)),
                          Bp, layout.alpha_p(alpha), sigma2, check=check)
    iv = build_intervals(y, B, est0.c_tilde, est0.h_tilde, layout, alpha, sigma2)
    x_d = flatten_intervals(imap_detect(iv).x_hat)
    batch = y.shape[:-2]
    history, changes = [x_d], []
    ch_hist, eic_hist = [est0.h_tilde], [est0.c_tilde]
    done = np.zeros(batch, dtype=bool)
    used = np.zeros(batch, dtype=int)
    x_full = np.empty(batch + (layout.frame_length,), dtype=complex)
    x_full[..., pos] = layout.pilot_symbols
    for it in range(1, max_iters + 1):
        x_full[..., layout.data_positions] = x_d
        est = estimate_frame(y, x_full, B, alpha, sigma2, check=check)
        y_clean = cancel(y, B, est.c_tilde)
        x_new = _neighbour_detect(y_clean, est.h_tilde, layout, alpha)
        # converged trials are fixed points, so recomputing them changes nothing
        x_new = np.where(done[..., None], x_d, x_new)
        n_changed = np.count_nonzero(x_new != x_d, axis=-1)
        changes.append(n_changed)
        used = np.where(done, used, it)
        done = done | (n_changed == 0)
        x_d = x_new
        history.append(x_d)
        ch_hist.append(est.h_tilde)
        eic_hist.append(est.c_tilde)
        if np.all(done):
            break
    return IterativeResult(x_d, used, done, history, changes, ch_hist, eic_hist)
