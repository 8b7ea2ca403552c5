"""Brute-force reference implementations used only by tests."""

import functools
from fractions import Fraction

import numpy as np

from e3dapp.ransim import SPEED_OF_LIGHT


def bin_interval(center_hz, bandwidth_hz, R, k):
    """Exact [lo, hi) of bin k, in Hz, as Fractions."""
    f_lo = Fraction(center_hz) - Fraction(bandwidth_hz) / 2
    d = Fraction(bandwidth_hz) / R
    return f_lo + k * d, f_lo + (k + 1) * d


def overlapping_bins(center_hz, bandwidth_hz, R, lo_hz, hi_hz):
    """Bins whose half-open interval meets [lo_hz, hi_hz), by checking every bin."""
    lo, hi = Fraction(lo_hz), Fraction(hi_hz)
    out = []
    for k in range(R):
        a, b = bin_interval(center_hz, bandwidth_hz, R, k)
        if a < hi and lo < b:
            out.append(k)
    return out


@functools.lru_cache(maxsize=None)
def owner_table(n_prbs, R):
    """bin -> PRB by testing each bin start against every PRB interval of [0, 1)."""
    table = {}
    for k in range(R):
        x = Fraction(k, R)
        for p in range(n_prbs):
            if Fraction(p, n_prbs) <= x < Fraction(p + 1, n_prbs):
                table[k] = p
                break
    return table


def prbs_of_bins(bins, n_prbs, R):
    table = owner_table(n_prbs, R)
    return sorted({table[k] for k in bins})


def matched_filter_delay(h, spacing_hz, step_s, tau_max_s):
    """Grid delay maximizing |sum_k h_k exp(+j 2 pi f_k tau)|."""
    K = len(h)
    f = np.arange(K) * spacing_hz
    taus = np.arange(int(round(tau_max_s / step_s)) + 1) * step_s
    scores = np.abs(np.exp(2j * np.pi * np.outer(taus, f)) @ h)
    return taus[int(np.argmax(scores))]


def delay_of(distance_m):
    return distance_m / SPEED_OF_LIGHT
