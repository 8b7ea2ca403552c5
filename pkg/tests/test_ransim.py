import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3dapp import ransim
from e3dapp.ransim import (
    GoodputModel,
    IncumbentConfig,
    IqSpectrum,
    RadioConfig,
    SchedulerState,
    SimulatedDU,
    gen_cir,
    gen_spectrum,
    goodput,
)

from oracles import bin_interval, matched_filter_delay, overlapping_bins, prbs_of_bins

RESOLUTIONS = ransim.SUPPORTED_RESOLUTIONS


def test_radio_config_validation():
    with pytest.raises(ValueError):
        RadioConfig(resolution_bins=1000)
    with pytest.raises(ValueError):
        RadioConfig(bandwidth_hz=0)
    with pytest.raises(ValueError):
        RadioConfig(n_prbs=400, resolution_bins=384)


def test_bins_partition_span_r384():
    cfg = RadioConfig(resolution_bins=384)
    prev_hi = None
    for k in range(384):
        lo, hi = bin_interval(cfg.center_freq_hz, cfg.bandwidth_hz, 384, k)
        if prev_hi is not None:
            assert lo == prev_hi
        prev_hi = hi
    assert prev_hi == Fraction(cfg.center_freq_hz) + Fraction(cfg.bandwidth_hz) / 2


@pytest.mark.parametrize("R", RESOLUTIONS)
def test_prb_bin_counts(R):
    counts = [len(ransim.bins_of_prb(p, 106, R)) for p in range(106)]
    assert sum(counts) == R
    assert set(counts) <= {R // 106, -(-R // 106)}
    for p in range(106):
        for k in ransim.bins_of_prb(p, 106, R):
            assert ransim.prb_of_bin(k, 106, R) == p


def test_default_incumbent_bins():
    cfg = RadioConfig()
    inc = IncumbentConfig(enabled=True)
    got = ransim.bins_overlapping(cfg, *inc.band)
    want = overlapping_bins(cfg.center_freq_hz, cfg.bandwidth_hz, 1536, *inc.band)
    assert list(got) == want
    assert (want[0], want[-1]) == (1163, 1201)


@pytest.mark.parametrize("R", RESOLUTIONS)
def test_default_incumbent_prbs(R):
    cfg = RadioConfig(resolution_bins=R)
    inc = IncumbentConfig(enabled=True)
    bins = overlapping_bins(cfg.center_freq_hz, cfg.bandwidth_hz, R, *inc.band)
    assert sorted(ransim.interfered_prbs(cfg, inc)) == prbs_of_bins(bins, 106, R) == [80, 81, 82]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(RESOLUTIONS), st.floats(-21e6, 21e6), st.floats(1e3, 5e6))
def test_bins_overlapping_matches_oracle(R, offset, width):
    cfg = RadioConfig(resolution_bins=R)
    lo = cfg.center_freq_hz + offset
    hi = lo + width
    assert list(ransim.bins_overlapping(cfg, lo, hi)) == overlapping_bins(cfg.center_freq_hz, cfg.bandwidth_hz, R,
                                                                          lo, hi)


def test_spectrum_deterministic_and_seeded():
    cfg = RadioConfig()
    inc = IncumbentConfig(enabled=True)
    a = gen_spectrum(cfg, inc, 3, seed=1)
    assert a == gen_spectrum(cfg, inc, 3, seed=1)
    assert a != gen_spectrum(cfg, inc, 3, seed=2)
    assert a != gen_spectrum(cfg, inc, 4, seed=1)


def test_spectrum_levels():
    cfg = RadioConfig()
    inc = IncumbentConfig(enabled=True)
    s = gen_spectrum(cfg, inc, 0, usable_run=range(40))
    mag = s.magnitude_db()
    owners = ransim.prb_of_bin(np.arange(1536), 106, 1536)
    hot = np.zeros(1536, bool)
    hot[1163:1202] = True
    carrier = owners < 40
    # int16 rounding moves |x| by at most sqrt(2)/2 LSB
    def within(values, level_db):
        amp = 10 ** (level_db / 20)
        lo = 20 * math.log10(amp - math.sqrt(0.5))
        hi = 20 * math.log10(amp + math.sqrt(0.5))
        return bool(np.all((values >= lo - 1e-9) & (values <= hi + 1e-9)))

    lin = lambda *db: 10 * math.log10(sum(10 ** (x / 10) for x in db))  # noqa: E731
    floor = cfg.noise_floor_db
    assert within(mag[~hot & ~carrier], floor)
    assert within(mag[carrier & ~hot], lin(floor, floor + cfg.carrier_db))
    assert within(mag[hot & ~carrier], lin(floor, floor + inc.power_db))


def test_spectrum_without_incumbent_stays_below_carrier_allowance():
    cfg = RadioConfig()
    s = gen_spectrum(cfg, IncumbentConfig(), 0)
    amp = 10 ** (cfg.noise_floor_db / 20) * math.sqrt(1 + 10 ** (cfg.carrier_db / 10))
    assert s.magnitude_db().max() <= 20 * math.log10(amp + math.sqrt(0.5))


def test_spectrum_payload_roundtrip():
    s = gen_spectrum(RadioConfig(resolution_bins=384), IncumbentConfig(enabled=True), 5)
    payload = s.to_payload()
    assert len(payload) == 4 * 384
    assert IqSpectrum.from_payload(payload, 5) == s
    with pytest.raises(ValueError):
        IqSpectrum.from_payload(payload[:-1])


def test_incumbent_activity_window():
    inc = IncumbentConfig(enabled=True, active_from_slot=10, active_until_slot=20)
    assert [inc.active(s) for s in (9, 10, 19, 20)] == [False, True, True, False]
    assert not IncumbentConfig(enabled=False).active(0)


def test_cir_delay_and_noiseless():
    snaps = gen_cir(RadioConfig(), 5.0, math.inf, 4, n_subcarriers=64)
    assert snaps[0].true_delay_s == pytest.approx(16.678e-9, abs=1e-12)
    for s in snaps[1:]:
        assert np.array_equal(s.response, snaps[0].response)


def test_cir_validation():
    with pytest.raises(ValueError):
        gen_cir(RadioConfig(), 0.0, 0.0, 1)
    with pytest.raises(ValueError):
        gen_cir(RadioConfig(), 1.0, 0.0, 0)


def test_cir_snr_monte_carlo():
    snaps = gen_cir(RadioConfig(), 5.0, -20.0, 60, n_subcarriers=256, seed=3)
    clean = np.exp(-2j * np.pi * ransim.subcarrier_freqs(256, 40e6 / 256) * snaps[0].true_delay_s)
    noise = np.mean([np.mean(np.abs(s.response - clean) ** 2) for s in snaps])
    assert 10 * math.log10(1.0 / noise) == pytest.approx(-20.0, abs=1.0)


@pytest.mark.parametrize("d", [3.0, 5.0, 7.3, 10.0])
def test_cir_matched_filter_oracle(d):
    snap = gen_cir(RadioConfig(), d, math.inf, 1, n_subcarriers=1024)[0]
    step = 0.1e-9
    tau = matched_filter_delay(snap.response, snap.subcarrier_spacing_hz, step, 100e-9)
    assert abs(tau - snap.true_delay_s) <= step


def test_cir_payload_roundtrip():
    snap = gen_cir(RadioConfig(), 5.0, 0.0, 1, n_subcarriers=32)[0]
    back = ransim.CirSnapshot.from_payload(snap.to_payload(), snap.subcarrier_spacing_hz)
    assert len(snap.to_payload()) == 8 * 32
    assert np.allclose(back.response, snap.response, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("mask,run", [
    (set(), range(106)),
    (set(range(30, 34)), range(30)),
    ({0}, range(0)),
    ({80, 81, 82}, range(80)),
])
def test_type1_scheduler(mask, run):
    assert ransim.schedule_slot(SchedulerState(106, frozenset(mask))) == run


def test_scheduler_rejects_out_of_range_mask():
    with pytest.raises(ValueError):
        ransim.schedule_slot(SchedulerState(106, frozenset({106})))


def test_goodput_examples():
    m = GoodputModel()
    assert goodput(range(106), model=m) == pytest.approx(71.3)
    assert goodput(range(0), model=m) == 0
    full_hit = goodput(range(106), {80, 81, 82}, m)
    assert 0.3 <= 1 - full_hit / 71.3 <= 0.5


def test_goodput_masked_beats_unmasked_default_incumbent():
    m = GoodputModel()
    hit = {80, 81, 82}
    assert goodput(range(80), hit, m) > goodput(range(106), hit, m)


@given(st.integers(0, 106), st.integers(0, 106), st.sets(st.integers(0, 105), max_size=10))
def test_goodput_monotone_in_clean_run(a, b, hit):
    # enlarging the scheduled set with clean PRBs never lowers goodput
    lo, hi = sorted((a, b))
    small = range(lo)
    big = range(hi)
    extra_clean = set(big) - set(small) - hit
    if set(big) - set(small) != extra_clean:
        return
    if (hit & set(big)) and not (hit & set(small)):
        return
    assert goodput(big, hit) >= goodput(small, hit)


def test_du_mask_applies_at_slot_boundary():
    du = SimulatedDU()
    du.begin_slot(0)
    du.stage_mask([30, 31, 32, 33])
    assert du.usable_run == range(106)
    du.begin_slot(1)
    assert du.usable_run == range(30)
    du.stage_mask([])
    du.begin_slot(2)
    assert du.usable_run == range(106)


def test_du_replaces_mask():
    du = SimulatedDU()
    du.stage_mask([50])
    du.begin_slot(0)
    du.stage_mask([90])
    du.begin_slot(1)
    assert du.scheduler.mask == {90}


def test_du_entry_out_of_range():
    with pytest.raises(ransim.EntryOutOfRange):
        SimulatedDU().stage_mask([999])
