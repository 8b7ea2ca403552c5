"""Simulated DU: sensing spectra, UL channel snapshots, a type-1 scheduler and a goodput model.

Power levels are in dB relative to one int16 LSB of the I/Q stream, so the
noise floor, carrier and incumbent levels map directly onto what the dApp
receives over E3.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
SUPPORTED_RESOLUTIONS = (384, 768, 1536, 2048)

_IQ_WIRE = np.dtype(">i2")
_CIR_WIRE = np.dtype(">f4")


@dataclass(frozen=True)
class RadioConfig:
    center_freq_hz: float = 3.6192e9
    bandwidth_hz: float = 40e6
    n_prbs: int = 106
    resolution_bins: int = 1536
    noise_floor_db: float = 20.0
    # gNB carrier level above the noise floor on scheduled PRBs
    carrier_db: float = 10.0
    slot_us: int = 500

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be positive")
        if self.n_prbs < 1:
            raise ValueError("n_prbs must be >= 1")
        if self.resolution_bins not in SUPPORTED_RESOLUTIONS:
            raise ValueError(f"resolution_bins must be one of {SUPPORTED_RESOLUTIONS}")
        if self.resolution_bins < self.n_prbs:
            raise ValueError("resolution_bins must be >= n_prbs")
        if self.slot_us < 1:
            raise ValueError("slot_us must be >= 1")
        if not self.center_freq_hz > self.bandwidth_hz / 2:
            raise ValueError("carrier must lie above 0 Hz")

    @property
    def f_lo(self) -> float:
        return self.center_freq_hz - self.bandwidth_hz / 2

    @property
    def bin_width_hz(self) -> float:
        return self.bandwidth_hz / self.resolution_bins


@dataclass(frozen=True)
class IncumbentConfig:
    enabled: bool = False
    center_hz: float = 3.63e9
    width_hz: float = 1e6
    power_db: float = 30.0
    active_from_slot: int = 0
    active_until_slot: int | None = None

    @property
    def band(self) -> tuple[float, float]:
        return self.center_hz - self.width_hz / 2, self.center_hz + self.width_hz / 2

    def active(self, slot: int) -> bool:
        if not self.enabled or slot < self.active_from_slot:
            return False
        return self.active_until_slot is None or slot < self.active_until_slot


def prb_of_bin(k, n_prbs: int, resolution: int):
    """Owner PRB of bin k (works elementwise on arrays)."""
    return (k * n_prbs) // resolution


def bins_of_prb(p: int, n_prbs: int, resolution: int) -> range:
    # smallest k with k*n >= p*R, up to the same bound for p+1
    lo = -((-p * resolution) // n_prbs)
    hi = -((-(p + 1) * resolution) // n_prbs)
    return range(lo, hi)


def bins_overlapping(cfg: RadioConfig, lo_hz: float, hi_hz: float) -> range:
    """Bins whose half-open interval [f_lo + k*d, f_lo + (k+1)*d) meets [lo_hz, hi_hz)."""
    if hi_hz <= lo_hz:
        return range(0)
    # exact rational arithmetic so band edges on a bin boundary resolve the same way every time
    f_lo = Fraction(cfg.center_freq_hz) - Fraction(cfg.bandwidth_hz) / 2
    scale = Fraction(cfg.resolution_bins) / Fraction(cfg.bandwidth_hz)
    start = math.floor((Fraction(lo_hz) - f_lo) * scale)
    stop = math.ceil((Fraction(hi_hz) - f_lo) * scale)
    return range(max(start, 0), min(stop, cfg.resolution_bins))


def prbs_overlapping(cfg: RadioConfig, lo_hz: float, hi_hz: float) -> frozenset[int]:
    bins = bins_overlapping(cfg, lo_hz, hi_hz)
    if not bins:
        return frozenset()
    return frozenset(range(prb_of_bin(bins.start, cfg.n_prbs, cfg.resolution_bins),
                           prb_of_bin(bins.stop - 1, cfg.n_prbs, cfg.resolution_bins) + 1))


def interfered_prbs(cfg: RadioConfig, inc: IncumbentConfig, slot: int | None = None) -> frozenset[int]:
    if not inc.enabled or (slot is not None and not inc.active(slot)):
        return frozenset()
    return prbs_overlapping(cfg, *inc.band)


@dataclass(frozen=True)
class IqSpectrum:
    """One sensing snapshot: R bins of int16 I + int16 Q."""

    slot: int
    iq: np.ndarray  # shape (R, 2), int16

    @property
    def bins(self) -> np.ndarray:
        return self.iq[:, 0].astype(np.float64) + 1j * self.iq[:, 1].astype(np.float64)

    def __len__(self) -> int:
        return self.iq.shape[0]

    def magnitude_db(self) -> np.ndarray:
        mag = np.hypot(self.iq[:, 0].astype(np.float64), self.iq[:, 1].astype(np.float64))
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(mag)

    def to_payload(self) -> bytes:
        return self.iq.astype(_IQ_WIRE, copy=False).tobytes()

    @classmethod
    def from_payload(cls, payload: bytes, slot: int = 0) -> IqSpectrum:
        if len(payload) % 4:
            raise ValueError("I/Q payload must be a multiple of 4 bytes")
        iq = np.frombuffer(payload, dtype=_IQ_WIRE).reshape(-1, 2).astype(np.int16)
        return cls(slot, iq)

    def __eq__(self, other):
        if not isinstance(other, IqSpectrum):
            return NotImplemented
        return self.slot == other.slot and np.array_equal(self.iq, other.iq)

    __hash__ = None


def gen_spectrum(cfg: RadioConfig, inc: IncumbentConfig, slot: int, *, seed: int = 0,
                 usable_run: range | None = None) -> IqSpectrum:
    """Frequency-domain sensing bins for one slot.

    Every bin sits at the noise floor; bins owned by scheduled PRBs add the
    carrier level and bins overlapping an active incumbent add its power.
    Levels add in linear power. Phases are uniform and seeded by (seed, slot).
    """
    R = cfg.resolution_bins
    if usable_run is None:
        usable_run = range(cfg.n_prbs)
    rel = np.ones(R)
    if len(usable_run):
        owners = prb_of_bin(np.arange(R), cfg.n_prbs, R)
        on = (owners >= usable_run.start) & (owners < usable_run.stop)
        rel[on] += 10.0 ** (cfg.carrier_db / 10)
    if inc.active(slot):
        b = bins_overlapping(cfg, *inc.band)
        rel[b.start:b.stop] += 10.0 ** (inc.power_db / 10)
    amp = 10.0 ** (cfg.noise_floor_db / 20) * np.sqrt(rel)
    rng = np.random.default_rng([seed, slot])
    phase = rng.uniform(0.0, 2 * np.pi, R)
    iq = np.empty((R, 2), dtype=np.int16)
    iq[:, 0] = np.clip(np.rint(amp * np.cos(phase)), -32768, 32767)
    iq[:, 1] = np.clip(np.rint(amp * np.sin(phase)), -32768, 32767)
    return IqSpectrum(slot, iq)


@dataclass(frozen=True)
class CirSnapshot:
    """UL channel frequency response on K equally spaced subcarriers."""

    response: np.ndarray  # complex, shape (K,)
    subcarrier_spacing_hz: float
    snr_db: float
    true_delay_s: float = float("nan")

    @property
    def n_subcarriers(self) -> int:
        return self.response.shape[0]

    def to_payload(self) -> bytes:
        out = np.empty((self.n_subcarriers, 2), dtype=_CIR_WIRE)
        out[:, 0] = self.response.real
        out[:, 1] = self.response.imag
        return out.tobytes()

    @classmethod
    def from_payload(cls, payload: bytes, subcarrier_spacing_hz: float, snr_db: float = float("nan")) -> CirSnapshot:
        if len(payload) % 8:
            raise ValueError("CIR payload must hold float32 I/Q pairs")
        raw = np.frombuffer(payload, dtype=_CIR_WIRE).reshape(-1, 2).astype(np.float64)
        return cls(raw[:, 0] + 1j * raw[:, 1], subcarrier_spacing_hz, snr_db)


def subcarrier_freqs(n_subcarriers: int, spacing_hz: float) -> np.ndarray:
    return np.arange(n_subcarriers) * spacing_hz


def gen_cir(cfg: RadioConfig, distance_m: float, snr_db: float, M: int, *, n_subcarriers: int = 1024,
            seed=0, extra_paths: tuple[tuple[float, float], ...] = ()) -> list[CirSnapshot]:
    """M channel snapshots for a line-of-sight UE at `distance_m`.

    The direct path has unit gain and a fixed phase. Each `(delay_s, gain)` in
    `extra_paths` gets an independent uniform phase per snapshot. `snr_db` is the
    per-subcarrier SNR; `math.inf` produces noiseless snapshots.
    """
    if distance_m <= 0:
        raise ValueError("distance_m must be positive")
    if M < 1:
        raise ValueError("M must be >= 1")
    if n_subcarriers < 2:
        raise ValueError("need at least 2 subcarriers")
    spacing = cfg.bandwidth_hz / n_subcarriers
    f = subcarrier_freqs(n_subcarriers, spacing)
    tau = distance_m / SPEED_OF_LIGHT
    direct = np.exp(-2j * np.pi * f * tau)
    rng = np.random.default_rng(seed)
    signal_power = 1.0 + sum(g * g for _, g in extra_paths)
    noiseless = math.isinf(snr_db) and snr_db > 0
    sigma = 0.0 if noiseless else math.sqrt(signal_power / 10 ** (snr_db / 10) / 2)
    out = []
    for _ in range(M):
        h = direct.copy()
        for delay, gain in extra_paths:
            h += gain * np.exp(1j * rng.uniform(0, 2 * np.pi)) * np.exp(-2j * np.pi * f * delay)
        if sigma:
            h += sigma * (rng.standard_normal(n_subcarriers) + 1j * rng.standard_normal(n_subcarriers))
        out.append(CirSnapshot(h, spacing, snr_db, tau))
    return out


@dataclass
class SchedulerState:
    """Type-1 (contiguous) allocation: the UE gets PRBs from 0 up to the first blocked one."""

    n_prbs: int = 106
    mask: frozenset[int] = field(default_factory=frozenset)

    @property
    def usable_run(self) -> range:
        if not self.mask:
            return range(self.n_prbs)
        return range(min(self.mask))


def schedule_slot(state: SchedulerState, cfg: RadioConfig | None = None) -> range:
    n = cfg.n_prbs if cfg is not None else state.n_prbs
    if any(p < 0 or p >= n for p in state.mask):
        raise ValueError("mask entry outside [0, n_prbs)")
    return state.usable_run


@dataclass(frozen=True)
class GoodputModel:
    """Linear per-PRB rate with a block-error penalty when interference hits the allocation.

    Calibration: 106 clean PRBs give 71.3 Mbps. Interfered PRBs lose
    `loss_factor` of their rate, and if any scheduled PRB is interfered the
    whole allocation loses `collateral_penalty` to retransmissions.
    """

    rate_per_prb_mbps: float = 71.3 / 106
    loss_factor: float = 1.0
    collateral_penalty: float = 0.3


def goodput(usable_run: range, interfered=frozenset(), model: GoodputModel = GoodputModel()) -> float:
    scheduled = set(usable_run)
    hit = scheduled & set(interfered)
    clean = len(scheduled) - len(hit)
    rate = model.rate_per_prb_mbps * (clean + (1 - model.loss_factor) * len(hit))
    if hit:
        rate *= 1 - model.collateral_penalty
    return rate


class EntryOutOfRange(ValueError):
    pass


@dataclass
class SimulatedDU:
    """Per-slot DU state driven by the agent reactor.

    Masks staged with `stage_mask` take effect at the next `begin_slot`, so a
    slot is always scheduled entirely under one mask.
    """

    radio: RadioConfig = field(default_factory=RadioConfig)
    incumbent: IncumbentConfig = field(default_factory=IncumbentConfig)
    goodput_model: GoodputModel = field(default_factory=GoodputModel)
    seed: int = 0
    ue_distance_m: float = 5.0
    ul_snr_db: float = 0.0
    # kept small so a MUSIC batch fits the loop budget; gen_cir itself defaults to 1024
    n_subcarriers: int = 128

    def __post_init__(self):
        self.scheduler = SchedulerState(self.radio.n_prbs)
        self._pending: frozenset[int] | None = None
        self.slot = -1
        self.usable_run = self.scheduler.usable_run

    def stage_mask(self, entries) -> None:
        entries = frozenset(entries)
        bad = [p for p in entries if p >= self.radio.n_prbs]
        if bad:
            raise EntryOutOfRange(f"PRB {min(bad)} >= n_prbs={self.radio.n_prbs}")
        self._pending = entries

    def begin_slot(self, slot: int) -> range:
        if self._pending is not None:
            self.scheduler.mask = self._pending
            self._pending = None
        self.slot = slot
        self.usable_run = schedule_slot(self.scheduler, self.radio)
        return self.usable_run

    def interfered(self, slot: int) -> frozenset[int]:
        return interfered_prbs(self.radio, self.incumbent, slot)

    def slot_goodput(self, slot: int) -> float:
        return goodput(self.usable_run, self.interfered(slot), self.goodput_model)

    def spectrum(self, slot: int) -> IqSpectrum:
        return gen_spectrum(self.radio, self.incumbent, slot, seed=self.seed, usable_run=self.usable_run)

    def spectrum_payload(self, slot: int) -> bytes:
        return self.spectrum(slot).to_payload()

    def cir_payload(self, slot: int) -> bytes:
        snap = gen_cir(self.radio, self.ue_distance_m, self.ul_snr_db, 1,
                       n_subcarriers=self.n_subcarriers, seed=[self.seed, slot, 1])[0]
        return snap.to_payload()

    @property
    def cir_spacing_hz(self) -> float:
        return self.radio.bandwidth_hz / self.n_subcarriers
