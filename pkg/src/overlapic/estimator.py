"""Phase 1: joint ML-MAP estimation of the EICs and of the pilot channels.

For every pilot ``n`` the log-likelihood ``log p(h_n, Y | c)`` over all pilot
observations is a quadratic in ``(h_n, c)``.  Profiling out ``h_n`` leaves
``(c - c_n)^H D_n (c - c_n)``, so each pilot yields its own EIC estimate
``c_n``.  These are averaged, the interference ``B_k c`` is subtracted, and
the pilot channels are re-estimated with the averaged ``c``.

All array functions accept leading batch dimensions: ``y`` is ``(..., N, R)``,
``x`` is ``(..., N)`` and ``B`` is ``(..., N, R, L)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import IllConditioned, StationarityViolation

COND_LIMIT = 1e12


@dataclass(frozen=True)
class ConditionalParams:
    omega: float
    beta: complex
    sigma2: float
    sign: int


def conditional_params(n: int, i: int, alpha_p: float, rho: float, pilots,
                       sigma_h2: float = 1.0) -> ConditionalParams:
    """Parameters of ``p(y_i | y_{i+j}, h_n)`` for pilot indices ``i``, ``n`` (1-based).

    Direct transcription of the conditional-Gaussian formulas, kept
    deliberately unoptimised; :func:`pilot_weights` is the vectorised form.
    """
    pilots = np.asarray(pilots)
    sigma2 = sigma_h2 / rho
    if i == n:
        return ConditionalParams(1.0, 0j, sigma2, 0)
    sign = 1 if i < n else -1
    d = abs(n - i)
    g = 1.0 - alpha_p ** (2 * (d - 1))
    omega = alpha_p ** d / (1.0 + rho * g)
    beta = (pilots[i - 1] * np.conj(pilots[i - 1 + sign]) * rho * alpha_p * g / (1.0 + rho * g))
    s2 = sigma2 * (1.0 + rho * (1.0 - alpha_p ** (2 * d)) - rho ** 2 * alpha_p ** 2 * g ** 2 / (1.0 + rho * g))
    return ConditionalParams(float(omega), complex(beta), float(s2), sign)


@lru_cache(maxsize=64)
def _pilot_weights_cached(N: int, alpha_p: float, rho: float, sigma_h2: float):
    idx = np.arange(N)
    i, n = idx[:, None], idx[None, :]
    d = np.abs(n - i)
    sign = np.sign(n - i)
    with np.errstate(over="ignore"):
        u = rho * (1.0 - alpha_p ** (2.0 * np.maximum(d - 1, 0)))
    omega = np.where(d == 0, 1.0, alpha_p ** d / (1.0 + u))
    beta_mag = np.where(d == 0, 0.0, alpha_p * u / (1.0 + u))
    sigma2 = sigma_h2 / rho
    # algebraically equal to the textbook form but free of the rho^2 cancellation
    s2 = np.where(d == 0, sigma2,
                  sigma2 * (1.0 + alpha_p ** 2 * u / (1.0 + u)) + sigma_h2 * (1.0 - alpha_p ** 2))
    nbr = i + sign
    for a in (omega, beta_mag, s2, nbr):
        a.setflags(write=False)
    return omega, beta_mag, s2, nbr


def pilot_weights(N: int, alpha_p: float, rho: float, sigma_h2: float = 1.0):
    """``(omega, |beta|, sigma2, neighbour)`` as ``N x N`` arrays indexed ``[i, n]``.

    ``neighbour[i, n]`` is ``i + j_{i,n}`` (0-based), i.e. the adjacent pilot
    on the side of ``n``; it equals ``i`` when ``i == n``.
    """
    return _pilot_weights_cached(int(N), float(alpha_p), float(rho), float(sigma_h2))


@dataclass
class EstimatorWorkspace:
    omega: np.ndarray      # (N, N)  [i, n]
    beta_mag: np.ndarray   # (N, N)  |beta_{i,n}|
    phase_up: np.ndarray   # (..., N)  x_i conj(x_{i+1}), the phase of beta_{i,n} for i < n
    phase_dn: np.ndarray   # (..., N)  x_i conj(x_{i-1}), for i > n
    sigma2_in: np.ndarray  # (N, N)
    a: np.ndarray          # (..., N)  A_n = a_n I
    V: np.ndarray          # (..., N, R, L)  sum_i x*_{i,n} Sigma^-1 B_{i,n}
    v: np.ndarray          # (..., N, R)     sum_i x*_{i,n} Sigma^-1 y_{i,n}
    D: Optional[np.ndarray]  # (..., N, L, L)
    rhs: Optional[np.ndarray]
    d_eigs: Optional[np.ndarray]

    @property
    def beta(self) -> np.ndarray:
        """Complex ``beta_{i,n}`` as ``(..., N, N)`` (materialised on demand)."""
        N = self.omega.shape[0]
        idx = np.arange(N)
        lo = idx[:, None] < idx[None, :]
        return (np.where(lo, self.beta_mag, 0.0) * self.phase_up[..., :, None]
                + np.where(~lo, self.beta_mag, 0.0) * self.phase_dn[..., :, None])

    @property
    def cond(self) -> np.ndarray:
        """Per-frame worst condition number of ``D_n`` over pilots."""
        if self.d_eigs is None:
            return np.zeros(self.a.shape[:-1])
        e = self.d_eigs
        with np.errstate(divide="ignore"):
            c = np.where(e[..., 0] > 0, e[..., -1] / e[..., 0], np.inf)
        return c.max(axis=-1)

    @property
    def positive_definite(self) -> np.ndarray:
        if self.d_eigs is None:
            return np.ones(self.a.shape[:-1], dtype=bool)
        return (self.d_eigs[..., 0] > 0).all(axis=-1)


@dataclass
class EicEstimate:
    c_tilde: np.ndarray     # (..., L)
    per_pilot: np.ndarray   # (..., N, L)
    residual_power_estimate: Optional[np.ndarray] = None


@dataclass
class ChannelEstimateSet:
    h_tilde: np.ndarray     # (..., N, R)


@dataclass
class EstimationOutput:
    eic: Optional[EicEstimate]
    channels: ChannelEstimateSet
    workspace: EstimatorWorkspace

    @property
    def c_tilde(self):
        return None if self.eic is None else self.eic.c_tilde

    @property
    def h_tilde(self):
        return self.channels.h_tilde


def _weighted(W, F, n_axis):
    Fm = np.moveaxis(F, n_axis, 0)
    shape = Fm.shape
    out = W.T @ Fm.reshape(shape[0], -1)
    return np.moveaxis(out.reshape((W.shape[1],) + shape[1:]), 0, n_axis)


def _shift(a, step, axis):
    """``a`` moved by ``step`` along ``axis`` with zero fill: out[i] = a[i + step]."""
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(step, None), slice(None, -step)
    else:
        src[axis], dst[axis] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


@lru_cache(maxsize=64)
def _base_weights(N: int, alpha_p: float, rho: float, sigma_h2: float):
    """Real ``N x N`` weight matrices shared by every frame with the same parameters."""
    omega, beta_mag, s2, _ = pilot_weights(N, alpha_p, rho, sigma_h2)
    idx = np.arange(N)
    lo = idx[:, None] < idx[None, :]
    hi = idx[:, None] > idx[None, :]
    b_lo, b_hi = np.where(lo, beta_mag, 0.0), np.where(hi, beta_mag, 0.0)
    inv = 1.0 / s2
    return {
        "w0": omega * inv, "wu": omega * b_lo * inv, "wd": omega * b_hi * inv,
        "a": omega ** 2 * inv, "i0": inv, "iu": b_lo * inv, "id": b_hi * inv,
        "qu": b_lo ** 2 * inv, "qd": b_hi ** 2 * inv,
    }


def build_workspace(y, x, B, alpha_p: float, sigma2: float, sigma_h2: float = 1.0
                    ) -> EstimatorWorkspace:
    """Assemble ``A_n``, ``D_n`` and the right-hand side of the ``c_n`` system.

    Every transformed matrix ``B_{i,n}`` is ``B_i`` minus ``beta_{i,n}`` times
    its neighbour ``B_{i+1}`` (for ``i < n``) or ``B_{i-1}`` (for ``i > n``).
    The symbol-dependent phase of ``beta`` only depends on ``i``, so it is
    folded into per-pilot products and every sum over ``i`` becomes a
    product with a fixed real weight matrix.  With ``B=None`` (no
    interference) only the channel parts are built.
    """
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    N = y.shape[-2]
    rho = sigma_h2 / sigma2
    omega, beta_mag, s2, _ = pilot_weights(N, alpha_p, rho, sigma_h2)
    w = _base_weights(N, float(alpha_p), float(rho), float(sigma_h2))
    xc = np.conj(x)
    x_up, x_dn = _shift(x, 1, -1), _shift(x, -1, -1)
    p_up, p_dn = x * np.conj(x_up), x * np.conj(x_dn)
    ax2 = np.abs(x) ** 2
    a = 1.0 + _weighted(w["a"], ax2, -1)

    y_up, y_dn = _shift(y, 1, -2), _shift(y, -1, -2)
    # sum_i w0 x_i* y_i - wu |x_i|^2 x_{i+1}* y_{i+1} - wd |x_i|^2 x_{i-1}* y_{i-1}
    f_up, f_dn = ax2 * np.conj(x_up), ax2 * np.conj(x_dn)
    v = _weighted(w["w0"], xc[..., None] * y, -2) - _weighted(w["wu"], f_up[..., None] * y_up, -2) \
        - _weighted(w["wd"], f_dn[..., None] * y_dn, -2)
    if B is None:
        V = np.zeros(v.shape + (0,), dtype=complex)
        return EstimatorWorkspace(omega, beta_mag, p_up, p_dn, s2, a, V, v, None, None, None)

    B = np.asarray(B, dtype=complex)
    B_up, B_dn = _shift(B, 1, -3), _shift(B, -1, -3)
    V = _weighted(w["w0"], xc[..., None, None] * B, -3) \
        - _weighted(w["wu"], f_up[..., None, None] * B_up, -3) \
        - _weighted(w["wd"], f_dn[..., None, None] * B_dn, -3)

    Bh = np.conj(B)
    G = np.einsum("...irl,...irm->...ilm", Bh, B)
    cross = (_weighted(w["iu"], p_up[..., None, None] * np.einsum("...irl,...irm->...ilm", Bh, B_up), -3)
             + _weighted(w["id"], p_dn[..., None, None] * np.einsum("...irl,...irm->...ilm", Bh, B_dn), -3))
    P = (_weighted(w["i0"], G, -3) - cross - np.conj(np.swapaxes(cross, -1, -2))
         + _weighted(w["qu"], (np.abs(p_up) ** 2)[..., None, None] * _shift(G, 1, -3), -3)
         + _weighted(w["qd"], (np.abs(p_dn) ** 2)[..., None, None] * _shift(G, -1, -3), -3))

    g = np.einsum("...irl,...ir->...il", Bh, y)
    q = (_weighted(w["i0"], g, -2)
         - _weighted(w["iu"], p_up[..., None] * np.einsum("...irl,...ir->...il", Bh, y_up), -2)
         - _weighted(w["id"], p_dn[..., None] * np.einsum("...irl,...ir->...il", Bh, y_dn), -2)
         - _weighted(w["iu"], np.conj(p_up)[..., None] * np.einsum("...irl,...ir->...il", np.conj(B_up), y), -2)
         - _weighted(w["id"], np.conj(p_dn)[..., None] * np.einsum("...irl,...ir->...il", np.conj(B_dn), y), -2)
         + _weighted(w["qu"], (np.abs(p_up) ** 2)[..., None] * _shift(g, 1, -2), -2)
         + _weighted(w["qd"], (np.abs(p_dn) ** 2)[..., None] * _shift(g, -1, -2), -2))

    D = P - np.einsum("...nrl,...nrm->...nlm", np.conj(V), V) / a[..., None, None]
    rhs = q - np.einsum("...nrl,...nr->...nl", np.conj(V), v) / a[..., None]
    D = 0.5 * (D + np.conj(np.swapaxes(D, -1, -2)))
    eigs = np.linalg.eigvalsh(D)
    return EstimatorWorkspace(omega, beta_mag, p_up, p_dn, s2, a, V, v, D, rhs, eigs)


def _check_conditioning(ws: EstimatorWorkspace):
    cond = ws.cond
    if np.any(~ws.positive_definite) or np.any(cond > COND_LIMIT):
        raise IllConditioned(
            f"D_n condition number {np.max(cond):.3g} exceeds {COND_LIMIT:.0e} "
            "(degenerate interference geometry?)")


def estimate_eic_per_pilot(y, x, B, alpha_p: float, sigma2: float, n: Optional[int] = None,
                           *, check: bool = True, workspace: Optional[EstimatorWorkspace] = None):
    """Per-pilot EIC estimates ``c_n`` (all pilots, or only 0-based pilot ``n``).

    Returns ``(c_n, workspace)``.  ``c_n`` solves ``D_n c = rhs_n``; no
    explicit inverse is formed.
    """
    ws = workspace if workspace is not None else build_workspace(y, x, B, alpha_p, sigma2)
    if check:
        _check_conditioning(ws)
    if n is None:
        c_n = np.linalg.solve(ws.D, ws.rhs[..., None])[..., 0]
    else:
        c_n = np.linalg.solve(ws.D[..., n, :, :], ws.rhs[..., n, :, None])[..., 0]
    return c_n, ws


def average_eic(per_pilot) -> EicEstimate:
    per_pilot = np.asarray(per_pilot, dtype=complex)
    return EicEstimate(per_pilot.mean(axis=-2), per_pilot)


def cancel_and_estimate_channels(workspace: EstimatorWorkspace, c_tilde=None) -> ChannelEstimateSet:
    """``h_n = A_n^-1 sum_i x*_{i,n} Sigma_{i,n}^-1 (y_{i,n} - B_{i,n} c)``, with ``c = c_tilde``."""
    ws = workspace
    u = ws.v if c_tilde is None else ws.v - np.einsum("...nrl,...l->...nr", ws.V, c_tilde)
    return ChannelEstimateSet(u / ws.a[..., None])


def estimate_frame(y, x, B, alpha_p: float, sigma2: float, *, check: bool = True
                   ) -> EstimationOutput:
    """Full phase-1 pass over pilot observations: EICs, cancellation, channels."""
    ws = build_workspace(y, x, B, alpha_p, sigma2)
    if B is None:
        return EstimationOutput(None, cancel_and_estimate_channels(ws), ws)
    c_n, _ = estimate_eic_per_pilot(y, x, B, alpha_p, sigma2, check=check, workspace=ws)
    eic = average_eic(c_n)
    return EstimationOutput(eic, cancel_and_estimate_channels(ws, eic.c_tilde), ws)


def pilot_view(obs):
    """Pilot-position slices ``(y, x, B)`` of a :class:`FrameObservation`."""
    pos = obs.layout.pilot_positions
    return obs.y[pos], obs.x_true[pos], obs.B[pos]


def residual_power(B, c_true, c_tilde) -> np.ndarray:
    """``(1 / (N R)) sum_n ||B_n (c - c_tilde)||^2`` per frame."""
    e = np.asarray(c_true) - np.asarray(c_tilde)
    r = np.einsum("...nrl,...l->...nr", B, e)
    return np.mean(np.abs(r) ** 2, axis=(-2, -1))


# --- reference implementation and likelihood audit -------------------------------


def estimate_reference(y, x, B, alpha_p: float, sigma2: float, sigma_h2: float = 1.0):
    """Loop-based single-frame phase 1 with explicit ``Sigma_{i,n}`` and ``A_n`` matrices.

    Slow; exists so the vectorised path can be checked against a
    straightforward transcription.  Returns ``(c_tilde, per_pilot, h_tilde)``.
    """
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    B = np.asarray(B, dtype=complex)
    N, R = y.shape
    L = B.shape[-1]
    rho = sigma_h2 / sigma2
    I = np.eye(R)
    per_pilot = np.empty((N, L), dtype=complex)
    parts = []
    for n in range(N):
        A = I.astype(complex)
        V = np.zeros((R, L), dtype=complex)
        v = np.zeros(R, dtype=complex)
        P = np.zeros((L, L), dtype=complex)
        q = np.zeros(L, dtype=complex)
        for i in range(N):
            cp = conditional_params(n + 1, i + 1, alpha_p, rho, x, sigma_h2)
            Sinv = I / cp.sigma2
            j = i + cp.sign
            x_in = cp.omega * x[i]
            y_in = y[i] - cp.beta * y[j]
            B_in = B[i] - cp.beta * B[j]
            A = A + abs(x_in) ** 2 * Sinv
            V += np.conj(x_in) * Sinv @ B_in
            v += np.conj(x_in) * Sinv @ y_in
            P += B_in.conj().T @ Sinv @ B_in
            q += B_in.conj().T @ Sinv @ y_in
        Af = cho_factor(A)
        D = P - V.conj().T @ cho_solve(Af, V)
        rhs = q - V.conj().T @ cho_solve(Af, v)
        per_pilot[n] = cho_solve(cho_factor(D), rhs)
        parts.append((Af, V, v))
    c_tilde = per_pilot.mean(axis=0)
    h_tilde = np.array([cho_solve(Af, v - V @ c_tilde) for Af, V, v in parts])
    return c_tilde, per_pilot, h_tilde


def pilot_log_likelihood(h_n, c, y, x, B, alpha_p: float, sigma2: float, n: int,
                         sigma_h2: float = 1.0) -> float:
    """``log p(h_n, Y | c)`` up to a constant, from the raw conditional means.

    Uses ``mu_{i,n} = B_i c + a^{|i-n|} h_n x_i + beta (y_j - B_j c - a^{|j-n|} h_n x_j)``
    rather than the transformed ``(x_{i,n}, y_{i,n}, B_{i,n})`` quantities used
    by the estimator.  ``n`` is 0-based.
    """
    y = np.asarray(y)
    N = y.shape[0]
    rho = sigma_h2 / sigma2
    total = -np.real(np.vdot(h_n, h_n)) / sigma_h2
    for i in range(N):
        cp = conditional_params(n + 1, i + 1, alpha_p, rho, x, sigma_h2)
        j = i + cp.sign
        mu = B[i] @ c + alpha_p ** abs(i - n) * h_n * x[i]
        if i != n:
            mu = mu + cp.beta * (y[j] - B[j] @ c - alpha_p ** abs(j - n) * h_n * x[j])
        r = y[i] - mu
        total -= np.real(np.vdot(r, r)) / cp.sigma2
    return float(total)


@dataclass
class StationarityReport:
    gradient_norm: float
    gradient_scale: float
    perturbation_drops: np.ndarray

    @property
    def relative_gradient(self) -> float:
        return self.gradient_norm / self.gradient_scale

    @property
    def ok(self) -> bool:
        return self.relative_gradient < 1e-6 and bool(np.all(self.perturbation_drops > 0))


def _pack(h, c):
    return np.concatenate([h.real, h.imag, c.real, c.imag])


def _unpack(theta, R, L):
    h = theta[:R] + 1j * theta[R:2 * R]
    c = theta[2 * R:2 * R + L] + 1j * theta[2 * R + L:]
    return h, c


def verify_stationarity_of_estimator(y, x, B, alpha_p: float, sigma2: float, n: int,
                                     h_tilde, c_tilde, *, step: float = 1e-5,
                                     n_perturb: int = 20, radius: float = 1e-3,
                                     seed: int = 0, raise_on_fail: bool = True
                                     ) -> StationarityReport:
    """First-order optimality audit of ``(h_n, c_n)`` on the raw likelihood.

    Central finite differences over ``(Re h, Im h, Re c, Im c)``.  The
    gradient scale is the gradient norm at the origin, so the test is
    insensitive to the overall size of the likelihood.
    """
    B = np.asarray(B)
    R, L = B.shape[1], B.shape[2]

    def f(theta):
        h, c = _unpack(theta, R, L)
        return pilot_log_likelihood(h, c, y, x, B, alpha_p, sigma2, n)

    def grad(theta):
        g = np.empty_like(theta)
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = step
            g[k] = (f(theta + e) - f(theta - e)) / (2 * step)
        return g

    theta0 = _pack(np.asarray(h_tilde, dtype=complex), np.asarray(c_tilde, dtype=complex))
    g = grad(theta0)
    scale = max(np.linalg.norm(grad(np.zeros_like(theta0))), 1e-300)
    rng = np.random.default_rng(seed)
    base = f(theta0)
    drops = np.empty(n_perturb)
    for k in range(n_perturb):
        d = rng.standard_normal(theta0.size)
        drops[k] = base - f(theta0 + radius * d / np.linalg.norm(d))
    report = StationarityReport(float(np.linalg.norm(g)), float(scale), drops)
    if raise_on_fail and not report.ok:
        raise StationarityViolation(
            f"relative gradient {report.relative_gradient:.3g}, "
            f"min likelihood drop {drops.min():.3g}")
    return report
