"""Gauss-Markov fading, pilot/data frame layout and received-signal synthesis."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .errors import DimensionMismatch

QPSK = np.array([1.0, 1j, -1.0, -1j])


def qpsk_symbols(rng: np.random.Generator, size) -> np.ndarray:
    return QPSK[rng.integers(0, 4, size=size)]


def nearest_qpsk_index(z) -> np.ndarray:
    """Index into :data:`QPSK` of the closest point to ``z``.

    The decision region of point ``k`` is the phase interval
    ``(k pi/2 - pi/4, k pi/2 + pi/4]``.
    """
    ang = np.angle(z)
    return np.mod(np.ceil((ang - np.pi / 4) / (np.pi / 2)), 4).astype(int)


def cscg(rng: np.random.Generator, size, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with total variance ``var``."""
    s = np.sqrt(var / 2)
    return s * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


@dataclass(frozen=True)
class FadingParams:
    alpha: float
    n_r: int = 2
    snr_db: float = 20.0
    sigma_h2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.n_r < 1:
            raise ValueError("need at least one receive antenna")

    @property
    def rho(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    @property
    def sigma2(self) -> float:
        return self.sigma_h2 / self.rho


@dataclass(frozen=True)
class FrameLayout:
    n_p: int
    n_d: int
    pilot_symbols: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_p < 2:
            raise ValueError("a frame needs at least two pilots")
        if self.n_d < 0:
            raise ValueError("n_d must be non-negative")
        pilots = (np.ones(self.n_p, dtype=complex) if self.pilot_symbols is None
                  else np.asarray(self.pilot_symbols, dtype=complex).reshape(-1))
        if pilots.size != self.n_p or not np.allclose(np.abs(pilots), 1.0):
            raise ValueError("need n_p unit-modulus pilot symbols")
        object.__setattr__(self, "pilot_symbols", pilots)

    @property
    def frame_length(self) -> int:
        return (self.n_p - 1) * (self.n_d + 1) + 1

    @property
    def pilot_positions(self) -> np.ndarray:
        return np.arange(self.n_p) * (self.n_d + 1)

    @property
    def data_positions(self) -> np.ndarray:
        mask = np.ones(self.frame_length, dtype=bool)
        mask[self.pilot_positions] = False
        return np.flatnonzero(mask)

    def alpha_p(self, alpha: float) -> float:
        return alpha ** (self.n_d + 1)


@dataclass
class ChannelTrace:
    h: np.ndarray
    innovations: np.ndarray
    alpha: float
    rng_seed: Optional[int] = None

    @property
    def length(self) -> int:
        return self.h.shape[0]


@dataclass
class FrameObservation:
    y: np.ndarray
    x_true: np.ndarray
    B: np.ndarray
    c_true: np.ndarray
    trace: ChannelTrace
    layout: FrameLayout
    sigma2: float
    noise: np.ndarray = field(repr=False, default=None)

    @property
    def interference_free(self) -> bool:
        return not np.any(self.B)

    def to_json(self) -> str:
        """Debug dump; complex arrays become nested ``[re, im]`` pairs."""
        def enc(a):
            a = np.asarray(a, dtype=complex)
            return np.stack([a.real, a.imag], axis=-1).tolist()
        return json.dumps({
            "y": enc(self.y), "x_true": enc(self.x_true), "B": enc(self.B),
            "c_true": enc(self.c_true), "h": enc(self.trace.h), "alpha": self.trace.alpha,
            "n_p": self.layout.n_p, "n_d": self.layout.n_d,
            "pilot_symbols": enc(self.layout.pilot_symbols), "sigma2": self.sigma2,
        })

    @classmethod
    def from_json(cls, text: str) -> "FrameObservation":
        d = json.loads(text)

        def dec(v):
            a = np.asarray(v, dtype=float)
            return a[..., 0] + 1j * a[..., 1]
        layout = FrameLayout(d["n_p"], d["n_d"], dec(d["pilot_symbols"]))
        h = dec(d["h"])
        trace = ChannelTrace(h, np.zeros_like(h), d["alpha"])
        return cls(dec(d["y"]), dec(d["x_true"]), dec(d["B"]), dec(d["c_true"]), trace,
                   layout, d["sigma2"])


def evolve_channel(params: FadingParams, length: int, rng: np.random.Generator) -> ChannelTrace:
    """Draw ``h_0 ~ CN(0, sigma_h2 I)`` then ``h_{k+1} = a h_k + sqrt(1 - a^2) Delta_k``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    a = params.alpha
    h = np.empty((length, params.n_r), dtype=complex)
    h[0] = cscg(rng, params.n_r, params.sigma_h2)
    innov = cscg(rng, (length - 1, params.n_r), params.sigma_h2)
    g = np.sqrt(1.0 - a * a)
    # first-order AR recursion as an IIR filter: h_k = a h_{k-1} + u_k
    u = np.concatenate([h[:1], g * innov], axis=0)
    h[:] = lfilter([1.0], [1.0, -a], u, axis=0)
    return ChannelTrace(h, innov, a)


def generate_frame(layout: FrameLayout, rng: np.random.Generator) -> np.ndarray:
    x = qpsk_symbols(rng, layout.frame_length).astype(complex)
    x[layout.pilot_positions] = layout.pilot_symbols
    return x


def synthesize_observations(symbols, trace: ChannelTrace, B, c, sigma2: float,
                            rng: np.random.Generator, layout: Optional[FrameLayout] = None
                            ) -> FrameObservation:
    """``y_k = h_k x_k + B_k c + w_k`` with ``w_k ~ CN(0, sigma2 I)``."""
    x = np.asarray(symbols, dtype=complex)
    B = np.asarray(B, dtype=complex)
    c = np.asarray(getattr(c, "c", c), dtype=complex)
    K, n_r = trace.h.shape
    if x.shape != (K,) or B.shape[:2] != (K, n_r) or B.shape[2] != c.size:
        raise DimensionMismatch(
            f"symbols {x.shape}, trace {trace.h.shape}, B {B.shape}, c {c.shape} disagree")
    w = cscg(rng, (K, n_r), sigma2)
    y = trace.h * x[:, None] + B @ c + w
    return FrameObservation(y, x, B, c, trace, layout, sigma2, w)
