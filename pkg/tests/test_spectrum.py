import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3dapp import ransim
from e3dapp.codec import IndicationBody
from e3dapp.ransim import IncumbentConfig, IqSpectrum, RadioConfig, gen_spectrum
from e3dapp.spectrum import LengthMismatch, SpectrumConfig, SpectrumSharingDapp, decode_report, detect, encode_report

from oracles import overlapping_bins, prbs_of_bins

RESOLUTIONS = ransim.SUPPORTED_RESOLUTIONS


def random_band(rng, cfg):
    lo_edge = cfg.f_lo
    width = rng.uniform(20e3, 4e6)
    lo = rng.uniform(lo_edge - width / 2, lo_edge + cfg.bandwidth_hz - width / 2)
    return IncumbentConfig(enabled=True, center_hz=lo + width / 2, width_hz=width, power_db=rng.uniform(25, 40))


def oracle_blacklist(cfg, inc):
    bins = overlapping_bins(cfg.center_freq_hz, cfg.bandwidth_hz, cfg.resolution_bins, *inc.band)
    return tuple(prbs_of_bins(bins, cfg.n_prbs, cfg.resolution_bins))


def check_random_bands(n_cases, seed=0):
    """Returns the number of (band, resolution) pairs where detect() matched the oracle."""
    rng = random.Random(seed)
    matched = total = 0
    for case in range(n_cases):
        for R in RESOLUTIONS:
            cfg = RadioConfig(resolution_bins=R)
            inc = random_band(rng, cfg)
            sample = gen_spectrum(cfg, inc, case, seed=seed)
            got = detect(sample, SpectrumConfig(resolution=R))
            matched += got == oracle_blacklist(cfg, inc)
            total += 1
    return matched, total


def test_detect_matches_oracle_random_bands():
    matched, total = check_random_bands(25, seed=11)
    assert matched == total


def test_default_scenario_blacklist():
    cfg = RadioConfig()
    bl = detect(gen_spectrum(cfg, IncumbentConfig(enabled=True), 0), SpectrumConfig())
    assert bl == (80, 81, 82)
    assert 3 <= len(bl) <= 5 and bl == tuple(range(bl[0], bl[-1] + 1))
    lo, hi = IncumbentConfig().band
    prb_hz = cfg.bandwidth_hz / cfg.n_prbs
    assert cfg.f_lo + bl[0] * prb_hz <= lo and hi <= cfg.f_lo + (bl[-1] + 1) * prb_hz


def test_noise_only_gives_empty_blacklist():
    cfg = RadioConfig()
    s = gen_spectrum(cfg, IncumbentConfig(), 0, usable_run=range(0))
    assert detect(s, SpectrumConfig(threshold_db=6.0)) == ()


def test_single_hot_bin_on_prb_boundary():
    R, n = 1536, 106
    for p in (1, 53, 105):
        k = ransim.bins_of_prb(p, n, R).start
        bins = np.full(R, 1 + 0j)
        bins[k] = 1000
        assert detect(bins, SpectrumConfig(noise_floor_db=0, threshold_db=20)) == (p,)


def test_zero_bins_are_minus_infinity():
    assert detect(np.zeros(384), SpectrumConfig(resolution=384, noise_floor_db=0, threshold_db=-100)) == ()


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        detect(np.ones(100), SpectrumConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        SpectrumConfig(threshold_db=float("nan"))
    with pytest.raises(ValueError):
        SpectrumConfig(resolution=64)
    with pytest.raises(ValueError):
        SpectrumConfig(hysteresis_slots=-1)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(RESOLUTIONS), st.floats(0, 40), st.floats(0, 40), st.integers(0, 1000))
def test_threshold_monotone(R, t1, t2, slot):
    lo, hi = sorted((t1, t2))
    cfg = RadioConfig(resolution_bins=R)
    s = gen_spectrum(cfg, IncumbentConfig(enabled=True), slot)
    assert set(detect(s, SpectrumConfig(threshold_db=hi, resolution=R))) <= set(
        detect(s, SpectrumConfig(threshold_db=lo, resolution=R)))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(RESOLUTIONS), st.floats(0, 40), st.floats(0, 40))
def test_power_monotone(R, p1, p2):
    lo, hi = sorted((p1, p2))
    cfg = RadioConfig(resolution_bins=R)
    weak = gen_spectrum(cfg, IncumbentConfig(enabled=True, power_db=lo), 0)
    strong = gen_spectrum(cfg, IncumbentConfig(enabled=True, power_db=hi), 0)
    sc = SpectrumConfig(resolution=R)
    assert set(detect(weak, sc)) <= set(detect(strong, sc))


def _span(bl, cfg):
    prb_hz = cfg.bandwidth_hz / cfg.n_prbs
    return cfg.f_lo + bl[0] * prb_hz, cfg.f_lo + (bl[-1] + 1) * prb_hz


def test_resolution_consistency():
    rng = random.Random(5)
    for _ in range(30):
        base = random_band(rng, RadioConfig())
        coarse_cfg, fine_cfg = RadioConfig(resolution_bins=384), RadioConfig(resolution_bins=1536)
        coarse = detect(gen_spectrum(coarse_cfg, base, 0), SpectrumConfig(resolution=384))
        fine = detect(gen_spectrum(fine_cfg, base, 0), SpectrumConfig(resolution=1536))
        if not fine:
            continue
        slack = fine_cfg.bandwidth_hz / fine_cfg.n_prbs
        c_lo, c_hi = _span(coarse, coarse_cfg)
        f_lo, f_hi = _span(fine, fine_cfg)
        assert c_lo <= f_lo + slack and f_hi - slack <= c_hi


def test_report_layout():
    assert encode_report(3, 70000) == bytes.fromhex("0003 00011170")
    assert decode_report(encode_report(4, 9)) == (4, 9)


class FakeCore:
    def __init__(self):
        self.reports = []

    def schedule_report(self, payload, sm_id):
        self.reports.append(payload)


def _ind(cfg, inc, slot):
    return IndicationBody(1, slot, 0, gen_spectrum(cfg, inc, slot).to_payload())


def test_change_triggered_controls():
    cfg = RadioConfig()
    core = FakeCore()
    d = SpectrumSharingDapp(core, SpectrumConfig())
    quiet, loud = IncumbentConfig(), IncumbentConfig(enabled=True)
    out = [d.on_indication(_ind(cfg, loud if 50 <= s < 80 else quiet, s)) for s in range(100)]
    sent = {s: c for s, c in enumerate(out) if c is not None}
    assert sent == {0: (), 50: (80, 81, 82), 80: ()}
    assert d.controls_sent == 3
    assert [decode_report(r) for r in core.reports] == [(0, 0), (3, 50), (0, 80)]


def test_stable_spectrum_sends_once():
    cfg = RadioConfig()
    d = SpectrumSharingDapp(FakeCore(), SpectrumConfig(), report=False)
    out = [d.on_indication(_ind(cfg, IncumbentConfig(enabled=True), s)) for s in range(100)]
    assert sum(c is not None for c in out) == 1


def test_hysteresis_delays_shrink_only():
    cfg = RadioConfig()
    d = SpectrumSharingDapp(FakeCore(), SpectrumConfig(hysteresis_slots=3), report=False)
    loud = IncumbentConfig(enabled=True)
    out = [d.on_indication(_ind(cfg, loud if 10 <= s < 20 else IncumbentConfig(), s)) for s in range(30)]
    sent = {s: c for s, c in enumerate(out) if c is not None}
    assert sent == {0: (), 10: (80, 81, 82), 23: ()}


def test_bench_resolution_acceptance_run():
    """Helper exercised by the acceptance suite, kept fast here."""
    matched, total = check_random_bands(2, seed=1)
    assert matched == total == 8
