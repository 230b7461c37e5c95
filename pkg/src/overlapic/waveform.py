"""Pulse shapes, effective interference coefficients (EICs) and interference synthesis.

The interfering link runs ``M`` times faster than the desired one.  After
down-conversion, matched filtering and sampling at the desired symbol rate,
each desired sample picks up ``L`` interfering symbols, each weighted by a
complex coefficient ``c_l``.  That vector ``c`` is what :func:`compute_eic`
evaluates numerically.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy.integrate import simpson

from .errors import DimensionMismatch, QuadratureNonConvergence, SymbolStreamExhausted

__all__ = [
    "PulseShape",
    "AlignmentConfig",
    "EicVector",
    "InterferenceSource",
    "eval_pulse",
    "compute_eic",
    "build_interference_matrix",
    "synthesize_interference",
]


@dataclass(frozen=True)
class PulseShape:
    kind: Literal["rrc", "rect"] = "rrc"
    roll_off: float = 0.25
    symbol_period: float = 1.0
    span: int = 8

    def __post_init__(self):
        if self.kind not in ("rrc", "rect"):
            raise ValueError(f"unknown pulse kind {self.kind!r}")
        if not 0.0 <= self.roll_off <= 1.0:
            raise ValueError("roll_off must lie in [0, 1]")
        if self.span < 1:
            raise ValueError("span must be >= 1")
        if self.symbol_period <= 0:
            raise ValueError("symbol_period must be positive")

    @property
    def support(self) -> float:
        """One-sided half-width of the (truncated) pulse support, in seconds."""
        if self.kind == "rect":
            return 0.5 * self.symbol_period
        return self.span * self.symbol_period


@dataclass(frozen=True)
class AlignmentConfig:
    """Relative placement of the desired and interfering waveforms.

    ``time_offset`` defaults to ``-(L + 1) / 2 * T_i`` so that the ``L``
    interfering symbols indexed ``1..L`` straddle the desired sampling
    instant symmetrically.
    """

    bandwidth_ratio: int = 2
    interferer_span: Optional[int] = None
    freq_offset: float = 1.0
    time_offset: Optional[float] = None
    sample_offset: float = 0.0
    phase_desired: float = 0.0
    phase_interf: float = 0.0
    desired_period: float = 1.0

    def __post_init__(self):
        M = self.bandwidth_ratio
        if int(M) != M or M < 1:
            raise ValueError("bandwidth ratio must be a positive integer")
        if self.interferer_span is None:
            object.__setattr__(self, "interferer_span", 2 * M)
        L = self.interferer_span
        if L < M or L % M:
            raise ValueError("interferer_span L must be a positive multiple of M")
        if self.time_offset is None:
            object.__setattr__(self, "time_offset", -0.5 * (L + 1) * self.interf_period)

    @property
    def L(self) -> int:
        return self.interferer_span

    @property
    def interf_period(self) -> float:
        return self.desired_period / self.bandwidth_ratio


@dataclass(frozen=True)
class EicVector:
    c: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        c = np.asarray(self.c, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("EIC entries must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    def __len__(self):
        return self.c.size

    def to_json(self) -> str:
        return json.dumps({"c": [[float(v.real), float(v.imag)] for v in self.c],
                           "config_hash": self.config_hash})

    @classmethod
    def from_json(cls, text: str) -> "EicVector":
        data = json.loads(text)
        c = np.array([complex(re, im) for re, im in data["c"]])
        return cls(c, data.get("config_hash", ""))


@dataclass(frozen=True)
class InterferenceSource:
    """Known interferer: LOS gains ``h_i`` and its QPSK symbol stream."""

    h_i: np.ndarray
    symbols: np.ndarray
    power_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "h_i", np.asarray(self.h_i, dtype=complex).reshape(-1))
        b = np.asarray(self.symbols, dtype=complex).reshape(-1)
        if b.size and not np.allclose(np.abs(b), 1.0):
            raise ValueError("interfering symbols must be unit modulus")
        object.__setattr__(self, "symbols", b)


def _rrc_raw(t: np.ndarray, beta: float, T: float) -> np.ndarray:
    x = t / T
    out = np.empty_like(x)
    if beta == 0.0:
        return np.sinc(x)
    at_zero = np.isclose(x, 0.0, atol=1e-12)
    at_sing = np.isclose(np.abs(x), 1.0 / (4.0 * beta), atol=1e-12)
    reg = ~(at_zero | at_sing)
    xr = x[reg]
    num = np.sin(np.pi * xr * (1 - beta)) + 4 * beta * xr * np.cos(np.pi * xr * (1 + beta))
    den = np.pi * xr * (1 - (4 * beta * xr) ** 2)
    out[reg] = num / den
    out[at_zero] = 1 - beta + 4 * beta / np.pi
    out[at_sing] = beta / np.sqrt(2) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return out


def eval_pulse(shape: PulseShape, t):
    """Evaluate the unity-gain pulse ``p(t)`` (peak value 1 at ``t = 0``).

    Returns a float for scalar ``t`` and an array otherwise.  Values outside
    the truncated support are exactly zero.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    T = shape.symbol_period
    # support edges are inclusive up to rounding so quadrature endpoints keep their weight
    edge = shape.support * (1 + 1e-12)
    if shape.kind == "rect":
        out = np.where(np.abs(t) <= edge, 1.0, 0.0)
    else:
        out = _rrc_raw(t, shape.roll_off, T) / _rrc_raw(np.zeros(1), shape.roll_off, T)[0]
        out[np.abs(t) > edge] = 0.0
    return float(out[0]) if scalar else out


def _config_hash(p_d: PulseShape, p_i: PulseShape, cfg: AlignmentConfig) -> str:
    blob = json.dumps([repr(p_d), repr(p_i), repr(cfg)])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _eic_integrals(p_d, p_i, cfg, step, k):
    Td, Ti = cfg.desired_period, cfg.interf_period
    M, L = cfg.bandwidth_ratio, cfg.L
    t_d = k * Td + cfg.sample_offset
    phase = cfg.phase_interf + cfg.phase_desired
    out = np.empty(L, dtype=complex)
    for idx, l in enumerate(range(1, L + 1)):
        centre_i = (M * k + l) * Ti + cfg.time_offset
        lo = max(t_d - p_d.support, centre_i - p_i.support)
        hi = min(t_d + p_d.support, centre_i + p_i.support)
        if hi <= lo:
            out[idx] = 0.0
            continue
        n = max(2, int(np.ceil((hi - lo) / step)))
        n += n % 2  # Simpson needs an even interval count
        tau = np.linspace(lo, hi, n + 1)
        f = (eval_pulse(p_d, t_d - tau) * eval_pulse(p_i, tau - centre_i)
             * np.exp(1j * (-2 * np.pi * cfg.freq_offset * tau + phase)))
        out[idx] = simpson(f.real, x=tau) + 1j * simpson(f.imag, x=tau)
    return out


def compute_eic(p_d: PulseShape, p_i: PulseShape, cfg: AlignmentConfig, *,
                k: int = 0, tol: float = 1e-8, max_halvings: int = 8) -> EicVector:
    """Numerically integrate the EIC vector ``c`` for desired symbol ``k``.

    The integrand is ``p_d(kT_d + eps_d - tau) p_i(tau - k_i T_i - t_i)
    exp(j(2 pi (f_i - f_d) tau + theta_i + theta_d))`` with ``f_i - f_d =
    -freq_offset`` and ``k_i = M k + l``.  Composite Simpson over the overlap
    of the two supports, starting at ``T_d / 512`` and halving the step until
    no ``|c_l|`` moves by more than ``tol``.

    For an integer ``freq_offset * T_d`` the result does not depend on ``k``;
    otherwise it rotates by ``exp(-j 2 pi freq_offset T_d k)``.
    """
    step = cfg.desired_period / 512
    prev = _eic_integrals(p_d, p_i, cfg, step, k)
    for _ in range(max_halvings):
        step /= 2
        cur = _eic_integrals(p_d, p_i, cfg, step, k)
        if np.max(np.abs(np.abs(cur) - np.abs(prev))) < tol:
            return EicVector(cur, _config_hash(p_d, p_i, cfg))
        prev = cur
    raise QuadratureNonConvergence(
        f"EIC quadrature did not settle below {tol:g} after {max_halvings} halvings")


def build_interference_matrix(src: InterferenceSource, k: int, L: int, M: int) -> np.ndarray:
    """``B_k``: column ``l`` is ``h_i * b_{Mk+l} * power_scale`` (1-based ``l``).

    ``src.symbols[j]`` holds ``b_j``, so a frame of ``K`` symbols needs a
    buffer of at least ``M (K - 1) + L + 1`` entries.
    """
    last = M * k + L
    if last >= src.symbols.size:
        raise SymbolStreamExhausted(
            f"need interfering symbol index {last}, buffer holds {src.symbols.size}")
    b = src.symbols[M * k + 1: last + 1]
    return src.power_scale * np.outer(src.h_i, b)


def synthesize_interference(B_k: np.ndarray, c) -> np.ndarray:
    """Interference term ``B_k @ c`` of one received sample."""
    c = c.c if isinstance(c, EicVector) else np.asarray(c)
    B_k = np.asarray(B_k)
    if B_k.shape[-1] != c.shape[-1]:
        raise DimensionMismatch(f"B_k has {B_k.shape[-1]} columns but c has length {c.shape[-1]}")
    return B_k @ c
