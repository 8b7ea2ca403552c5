"""Ranging dApp: MUSIC delay estimation on UL channel snapshots.

Pipeline: sample covariance over M snapshots, optional forward-backward
averaging, eigendecomposition, noise-subspace pseudo-spectrum on a delay grid,
grid argmax with optional three-point parabolic refinement, distance = c * tau.
"""

from __future__ import annotations

import functools
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .agent import SM_CIR
from .codec import IndicationBody
from .ransim import SPEED_OF_LIGHT, CirSnapshot, subcarrier_freqs

log = logging.getLogger(__name__)

REPORT = struct.Struct(">IHI")  # distance_mm, M, peak_q16


class DimensionMismatch(ValueError):
    pass


class EigFailure(RuntimeError):
    pass


@dataclass
class RangingConfig:
    M: int = 20
    model_order: int = 1
    tau_max_s: float = 200e-9
    grid_step_s: float = 0.1e-9
    refine: bool = True
    forward_backward: bool = True
    bandwidth_hz: float = 40e6

    def __post_init__(self):
        if self.model_order < 1:
            raise ValueError("model_order must be >= 1")
        if self.grid_step_s <= 0 or self.tau_max_s <= 0:
            raise ValueError("grid_step_s and tau_max_s must be positive")
        if self.M < self.model_order + 1:
            raise ValueError(f"M={self.M} must be >= model_order + 1 = {self.model_order + 1}")

    def grid(self) -> np.ndarray:
        return delay_grid(self.tau_max_s, self.grid_step_s)


@dataclass(frozen=True)
class RangeEstimate:
    distance_m: float
    delay_s: float
    peak_db: float  # pseudo-spectrum peak, normalized so a flat spectrum sits near 0 dB
    M: int
    snr_db: float


def delay_grid(tau_max_s: float, step_s: float) -> np.ndarray:
    n = int(math.floor(tau_max_s / step_s + 1e-9))
    return np.arange(n + 1) * step_s


def _as_matrix(snapshots) -> np.ndarray:
    if isinstance(snapshots, (list, tuple)) and snapshots and isinstance(snapshots[0], CirSnapshot):
        snapshots = [s.response for s in snapshots]
    X = np.asarray(snapshots, dtype=complex)
    if X.ndim == 1:
        X = X[np.newaxis, :]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 2:
        raise DimensionMismatch(f"need an M x K snapshot matrix with M >= 1, K >= 2; got shape {X.shape}")
    return X


def covariance(snapshots, forward_backward: bool = True) -> np.ndarray:
    """(1/M) sum h h^H, optionally averaged with J conj(R) J."""
    X = _as_matrix(snapshots)
    R = X.T @ X.conj() / X.shape[0]
    if forward_backward:
        R = 0.5 * (R + R[::-1, ::-1].conj())
    return 0.5 * (R + R.conj().T)


@functools.lru_cache(maxsize=8)
def _steering(n_subcarriers: int, spacing_hz: float, tau_max_s: float, step_s: float) -> np.ndarray:
    f = subcarrier_freqs(n_subcarriers, spacing_hz)
    return np.exp(-2j * np.pi * np.outer(f, delay_grid(tau_max_s, step_s)))


def steering_matrix(freqs: np.ndarray, delays: np.ndarray) -> np.ndarray:
    return np.exp(-2j * np.pi * np.outer(freqs, delays))


def eig_sorted(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        w, V = np.linalg.eigh(R)
    except np.linalg.LinAlgError as exc:
        raise EigFailure(str(exc)) from exc
    return w, V  # ascending


def music_spectrum(R: np.ndarray, p: int, steering: np.ndarray) -> np.ndarray:
    """P(tau) = 1 / (a^H En En^H a) for each steering column.

    En spans the K - p smallest eigenvalues. The denominator is evaluated as
    ||a||^2 - ||Es^H a||^2, equal for an orthonormal eigenbasis and cheaper
    when p << K.
    """
    K = R.shape[0]
    if R.shape != (K, K) or steering.shape[0] != K:
        raise DimensionMismatch("covariance and steering sizes disagree")
    if not 1 <= p < K:
        raise ValueError(f"model order {p} must be in [1, K)")
    _, V = eig_sorted(R)
    Es = V[:, K - p:]
    proj = np.abs(Es.conj().T @ steering) ** 2
    norm = np.sum(np.abs(steering) ** 2, axis=0)
    denom = norm - proj.sum(axis=0)
    floor = np.finfo(float).eps * norm
    return 1.0 / np.maximum(denom, floor)


def estimate_snr_db(R: np.ndarray) -> float:
    """Single-path SNR from the largest eigenvalue and the trace."""
    K = R.shape[0]
    w, _ = eig_sorted(R)
    total = float(np.trace(R).real) / K
    signal = (float(w[-1]) - total) / (K - 1)
    noise = total - signal
    if signal <= 0:
        return -math.inf
    if noise <= 0:
        return math.inf
    return 10 * math.log10(signal / noise)


def _parabolic(y: np.ndarray, i: int) -> float:
    if i <= 0 or i >= len(y) - 1:
        return 0.0
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2 * b + c
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def estimate_distance(snapshots, cfg: RangingConfig, spacing_hz: float | None = None) -> RangeEstimate:
    X = _as_matrix(snapshots)
    M, K = X.shape
    if M < cfg.model_order + 1:
        raise ValueError(f"need at least {cfg.model_order + 1} snapshots, got {M}")
    if spacing_hz is None:
        spacing_hz = cfg.bandwidth_hz / K
    R = covariance(X, cfg.forward_backward)
    A = _steering(K, float(spacing_hz), cfg.tau_max_s, cfg.grid_step_s)
    P = music_spectrum(R, cfg.model_order, A)
    logP = 10 * np.log10(P)
    i = int(np.argmax(logP))
    shift = _parabolic(logP, i) if cfg.refine else 0.0
    tau = float(np.clip((i + shift) * cfg.grid_step_s, 0.0, cfg.tau_max_s))
    return RangeEstimate(
        distance_m=SPEED_OF_LIGHT * tau,
        delay_s=tau,
        peak_db=float(logP[i] + 10 * math.log10(K)),
        M=M,
        snr_db=estimate_snr_db(R),
    )


def encode_report(est: RangeEstimate) -> bytes:
    mm = min(max(round(est.distance_m * 1000), 0), 0xFFFFFFFF)
    q16 = min(max(round(est.peak_db * 65536), 0), 0xFFFFFFFF)
    return REPORT.pack(mm, min(est.M, 0xFFFF), q16)


def decode_report(payload: bytes) -> tuple[float, int, float]:
    mm, M, q16 = REPORT.unpack(payload)
    return mm / 1000.0, M, q16 / 65536.0


class RangingDapp:
    """Collects M CIR snapshots, then estimates the range and reports it."""

    def __init__(self, core, cfg: RangingConfig | None = None):
        self.core = core
        self.cfg = cfg or RangingConfig()
        self._batch: list[np.ndarray] = []
        self.estimates: list[RangeEstimate] = []

    def start(self, period_slots: int = 1) -> None:
        accepted = self.core.setup_connection([SM_CIR])
        if SM_CIR not in accepted:
            raise RuntimeError("RAN node does not expose the CIR service model")
        self.core.add_callback(SM_CIR, self.on_indication)
        if not self.core.subscribe(SM_CIR, period_slots):
            raise RuntimeError("CIR subscription refused")

    def on_indication(self, ind: IndicationBody) -> None:
        K = len(ind.payload) // 8
        snap = CirSnapshot.from_payload(ind.payload, self.cfg.bandwidth_hz / K)
        self._batch.append(snap.response)
        if len(self._batch) < self.cfg.M:
            return None
        batch, self._batch = self._batch, []
        est = estimate_distance(np.vstack(batch), self.cfg)
        self.estimates.append(est)
        self.core.schedule_report(encode_report(est), SM_CIR)
        return None
