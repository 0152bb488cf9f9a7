"""Closed-form path-loss models and link-budget arithmetic.

All public functions take SI units (m, Hz, dBm). Conversions to the units each
empirical model is fitted in (MHz/km for Hata, GHz/m for WINNER II) happen
internally. Geometry fields may be scalars or numpy arrays; the formulas are
evaluated elementwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3.0e8

HATA_BAND_HZ = (150e6, 1500e6)
WINNER2_BAND_HZ = (2e9, 6e9)
HATA_K_RANGE = (35.94, 40.94)


class AOI(str, Enum):
    URBAN = "urban"
    SUBURB = "suburb"
    RURAL = "rural"


class CitySize(str, Enum):
    BIG = "big"
    MID_SMALL = "mid_small"


class FrequencyRangeError(ValueError):
    """Carrier frequency outside the validity band of a path-loss model."""


@dataclass(frozen=True)
class LinkBudget:
    pt_dbm: float
    gt_dbi: float = 0.0
    gr_dbi: float = 0.0

    def __post_init__(self):
        for name in ("pt_dbm", "gt_dbi", "gr_dbi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        if np.any(np.asarray(self.pt_dbm) < 0) or np.any(np.asarray(self.pt_dbm) > 80):
            raise ValueError(f"pt_dbm must lie in [0, 80] dBm, got {self.pt_dbm}")


@dataclass(frozen=True)
class Environment:
    aoi: AOI = AOI.URBAN
    city_size: CitySize = CitySize.BIG
    hata_k: float = HATA_K_RANGE[0]

    def __post_init__(self):
        object.__setattr__(self, "aoi", AOI(self.aoi))
        object.__setattr__(self, "city_size", CitySize(self.city_size))
        lo, hi = HATA_K_RANGE
        if not lo <= self.hata_k <= hi:
            raise ValueError(f"hata_k must lie in [{lo}, {hi}], got {self.hata_k}")


@dataclass(frozen=True)
class LinkGeometry:
    """Transmitter/receiver geometry: distance, heights and carrier (SI units)."""

    d_m: float
    ht_m: float
    hr_m: float
    fc_hz: float

    def __post_init__(self):
        for name in ("d_m", "ht_m", "hr_m", "fc_hz"):
            value = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(value)) or np.any(value <= 0):
                raise ValueError(f"{name} must be finite and > 0")


def db_to_linear(x_db):
    return np.power(10.0, np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("linear power must be > 0 to convert to dB")
    return 10.0 * np.log10(x)


def dbm_to_watt(x_dbm):
    return db_to_linear(x_dbm) * 1e-3


def watt_to_dbm(x_w):
    return linear_to_db(np.asarray(x_w, dtype=float) * 1e3)


def _in_band(fc_hz, band) -> bool:
    fc = np.asarray(fc_hz, dtype=float)
    return bool(np.all((fc >= band[0]) & (fc <= band[1])))


def fspl_db(geom: LinkGeometry):
    """Free-space path loss, 20 log10(4 pi d f / c)."""
    d = np.asarray(geom.d_m, dtype=float)
    f = np.asarray(geom.fc_hz, dtype=float)
    return 20.0 * np.log10(d) + 20.0 * np.log10(f) + 20.0 * math.log10(4.0 * math.pi / SPEED_OF_LIGHT)


def hata_mobile_correction(city_size: CitySize, hr_m, f_mhz):
    """Receiver-height correction a(h_r) of the Hata urban formula."""
    hr = np.asarray(hr_m, dtype=float)
    if CitySize(city_size) is CitySize.BIG:
        return 3.2 * np.log10(11.75 * hr) ** 2 - 4.97
    log_f = np.log10(f_mhz)
    return (1.1 * log_f - 0.7) * hr - (1.56 * log_f - 0.8)


def hata_pl_db(env: Environment, geom: LinkGeometry):
    if not _in_band(geom.fc_hz, HATA_BAND_HZ):
        raise FrequencyRangeError(
            f"Hata model is valid for 150-1500 MHz, got {np.asarray(geom.fc_hz) / 1e6} MHz"
        )
    f = np.asarray(geom.fc_hz, dtype=float) / 1e6
    d = np.asarray(geom.d_m, dtype=float) / 1e3
    ht = np.asarray(geom.ht_m, dtype=float)
    log_f = np.log10(f)
    urban = (
        69.55
        + 26.16 * log_f
        - 13.82 * np.log10(ht)
        - hata_mobile_correction(env.city_size, geom.hr_m, f)
        + (44.9 - 6.55 * np.log10(ht)) * np.log10(d)
    )
    if env.aoi is AOI.URBAN:
        return urban
    if env.aoi is AOI.SUBURB:
        return urban - 2.0 * np.log10(f / 20.0) ** 2 - 5.4
    return urban - 4.78 * log_f**2 + 18.33 * log_f - env.hata_k


# (intercept, height slope, frequency slope) per AOI
_WINNER2_COEFFS = {
    AOI.URBAN: (9.45, 17.3, 2.7),
    AOI.SUBURB: (11.65, 16.2, 3.8),
    AOI.RURAL: (10.5, 18.5, 1.5),
}


def winner2_pl_db(env: Environment, geom: LinkGeometry):
    """WINNER II path loss; ``geom.d_m`` is used as the Tx-Rx distance d_l."""
    if not _in_band(geom.fc_hz, WINNER2_BAND_HZ):
        raise FrequencyRangeError(
            f"WINNER II model is valid for 2-6 GHz, got {np.asarray(geom.fc_hz) / 1e9} GHz"
        )
    intercept, h_slope, f_slope = _WINNER2_COEFFS[env.aoi]
    f_ghz = np.asarray(geom.fc_hz, dtype=float) / 1e9
    return (
        40.0 * np.log10(np.asarray(geom.d_m, dtype=float))
        + intercept
        - h_slope * np.log10(np.asarray(geom.ht_m, dtype=float))
        - h_slope * np.log10(np.asarray(geom.hr_m, dtype=float))
        + f_slope * np.log10(f_ghz / 5.0)
    )


def path_loss_db(env: Environment, geom: LinkGeometry):
    """Dispatch on carrier frequency: Hata, WINNER II, or free space in the gap.

    Array inputs may mix bands; each element is routed independently.
    """
    fc = np.asarray(geom.fc_hz, dtype=float)
    if fc.ndim == 0:
        if _in_band(fc, HATA_BAND_HZ):
            return hata_pl_db(env, geom)
        if _in_band(fc, WINNER2_BAND_HZ):
            return winner2_pl_db(env, geom)
        logger.warning("no empirical model covers %.4g Hz; using free-space path loss", fc)
        return fspl_db(geom)

    arrays = np.broadcast_arrays(
        np.asarray(geom.d_m, dtype=float),
        np.asarray(geom.ht_m, dtype=float),
        np.asarray(geom.hr_m, dtype=float),
        fc,
    )
    d, ht, hr, fc = arrays
    out = np.empty(fc.shape)
    hata = (fc >= HATA_BAND_HZ[0]) & (fc <= HATA_BAND_HZ[1])
    winner = (fc >= WINNER2_BAND_HZ[0]) & (fc <= WINNER2_BAND_HZ[1])
    free = ~(hata | winner)
    for mask, model in ((hata, hata_pl_db), (winner, winner2_pl_db), (free, None)):
        if not mask.any():
            continue
        sub = LinkGeometry(d[mask], ht[mask], hr[mask], fc[mask])
        if model is None:
            logger.warning(
                "no empirical model covers %d link(s) (e.g. %.4g Hz); using free-space path loss",
                int(mask.sum()),
                fc[mask][0],
            )
            out[mask] = fspl_db(sub)
        else:
            out[mask] = model(env, sub)
    return out


def received_power_dbm(budget: LinkBudget, pl_db):
    """PR = PT + G_r + G_t - PL, all in the dB domain."""
    return budget.pt_dbm + budget.gr_dbi + budget.gt_dbi - np.asarray(pl_db, dtype=float)
