"""Spectrum-sharing dApp: threshold detection on sensing bins and PRB blacklisting."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .agent import POLICY_THRESHOLD_OVERRIDE, SM_SPECTRUM, decode_threshold_policy
from .codec import IndicationBody, XAppControlBody
from .ransim import IqSpectrum, prb_of_bin

log = logging.getLogger(__name__)

REPORT = struct.Struct(">HI")  # n_blocked, slot


class LengthMismatch(ValueError):
    pass


@dataclass
class SpectrumConfig:
    threshold_db: float = 20.0  # above noise_floor_db
    noise_floor_db: float = 20.0
    n_prbs: int = 106
    resolution: int = 1536
    hysteresis_slots: int = 0

    def __post_init__(self):
        if not np.isfinite(self.threshold_db):
            raise ValueError("threshold_db must be finite")
        if self.resolution < self.n_prbs:
            raise ValueError("resolution must be >= n_prbs")
        if self.hysteresis_slots < 0:
            raise ValueError("hysteresis_slots must be >= 0")


def detect(spectrum: IqSpectrum | np.ndarray, cfg: SpectrumConfig) -> tuple[int, ...]:
    """Sorted PRBs owning at least one bin at or above noise_floor + threshold.

    Bin k belongs to PRB floor(k * n_prbs / R).
    """
    if isinstance(spectrum, IqSpectrum):
        iq = spectrum.iq.astype(np.int32)
        power = iq[:, 0] * iq[:, 0] + iq[:, 1] * iq[:, 1]
    else:
        power = np.abs(np.asarray(spectrum)) ** 2
    if power.shape[0] != cfg.resolution:
        raise LengthMismatch(f"got {power.shape[0]} bins, expected {cfg.resolution}")
    # 20 log10|x| >= T  <=>  |x|^2 >= 10^(T/10); avoids a log per bin
    hot = np.flatnonzero(power >= 10.0 ** ((cfg.noise_floor_db + cfg.threshold_db) / 10.0))
    if hot.size == 0:
        return ()
    return tuple(int(p) for p in np.unique(prb_of_bin(hot, cfg.n_prbs, cfg.resolution)))


def encode_report(n_blocked: int, slot: int) -> bytes:
    return REPORT.pack(n_blocked, slot & 0xFFFFFFFF)


def decode_report(payload: bytes) -> tuple[int, int]:
    return REPORT.unpack(payload)


class SpectrumSharingDapp:
    """Sends a Control whenever the blacklist changes.

    Growth is sent at once since incumbents have priority. A shrink is held
    until the smaller list has been seen for `hysteresis_slots` more ticks.
    """

    def __init__(self, core, cfg: SpectrumConfig | None = None, *, report: bool = True):
        self.core = core
        self.cfg = cfg or SpectrumConfig()
        self.report = report
        self.last_sent: tuple[int, ...] | None = None
        self._shrink_seen = 0
        self.controls_sent = 0
        self.timeline: list[tuple[int, tuple[int, ...]]] = []

    def start(self, period_slots: int = 1) -> None:
        accepted = self.core.setup_connection([SM_SPECTRUM])
        if SM_SPECTRUM not in accepted:
            raise RuntimeError("RAN node does not expose the spectrum service model")
        self.core.add_callback(SM_SPECTRUM, self.on_indication)
        self.core.on_policy(self.on_policy)
        if not self.core.subscribe(SM_SPECTRUM, period_slots):
            raise RuntimeError("spectrum subscription refused")

    def on_policy(self, body: XAppControlBody) -> None:
        if body.policy_key == POLICY_THRESHOLD_OVERRIDE:
            self.cfg.threshold_db = decode_threshold_policy(body.policy_value)
            log.info("threshold set to %.2f dB by xApp policy", self.cfg.threshold_db)

    def _should_send(self, blacklist: tuple[int, ...]) -> bool:
        if blacklist == self.last_sent:
            self._shrink_seen = 0
            return False
        if self.last_sent is None or not set(blacklist) < set(self.last_sent):
            return True
        self._shrink_seen += 1
        return self._shrink_seen > self.cfg.hysteresis_slots

    def on_indication(self, ind: IndicationBody) -> tuple[int, ...] | None:
        spectrum = IqSpectrum.from_payload(ind.payload, ind.sequence)
        blacklist = detect(spectrum, self.cfg)
        if not self._should_send(blacklist):
            return None
        self.last_sent = blacklist
        self._shrink_seen = 0
        self.controls_sent += 1
        self.timeline.append((ind.sequence, blacklist))
        if self.report:
            self.core.schedule_report(encode_report(len(blacklist), ind.sequence), SM_SPECTRUM)
        return blacklist
