"""Distribution and error metrics for generated versus real channel series.

JSD and TV are computed on histograms sharing one set of edges over the pooled
range of both samples. NRMSE pools every (generated, real) pair and divides the
RMSE by the range of the real values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 50
ATTRIBUTES = ("rsrp", "sinr")


@dataclass(frozen=True)
class HistogramPair:
    edges: np.ndarray
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def from_samples(cls, real, gen, bins: int = DEFAULT_BINS) -> "HistogramPair":
        a = _finite_flat(real, "real")
        b = _finite_flat(gen, "gen")
        if bins < 1:
            raise ValueError(f"bins must be >= 1, got {bins}")
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
        p = np.histogram(a, edges)[0] / a.size
        q = np.histogram(b, edges)[0] / b.size
        return cls(edges, p, q)


def _finite_flat(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} sample is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} sample contains non-finite values")
    return arr


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def jsd_from_masses(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    # clip round-off just outside [0, 1]
    return float(np.clip(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0, 1.0))


def tv_from_masses(p, q) -> float:
    return float(0.5 * np.sum(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))))


def jsd(real, gen, bins: int = DEFAULT_BINS) -> float:
    """Jensen-Shannon divergence in bits, in [0, 1]."""
    h = HistogramPair.from_samples(real, gen, bins)
    return jsd_from_masses(h.p, h.q)


def tv(real, gen, bins: int = DEFAULT_BINS) -> float:
    """Total variation distance between the binned samples, in [0, 1]."""
    h = HistogramPair.from_samples(real, gen, bins)
    return tv_from_masses(h.p, h.q)


def nrmse(real, gen) -> float:
    """RMSE over all pairs divided by max(real) - min(real)."""
    r = _finite_flat(real, "real")
    g = _finite_flat(gen, "gen")
    if r.shape != g.shape:
        raise ValueError(f"real and gen sizes differ: {r.size} vs {g.size}")
    span = r.max() - r.min()
    if span <= 0:
        raise ValueError("real values have zero range; NRMSE is undefined")
    return float(np.sqrt(np.mean((g - r) ** 2)) / span)


def metric_report(real, gen_samples, point=None, bins: int = DEFAULT_BINS) -> list[dict]:
    """One row per attribute.

    real: (N, T, 2) real series. gen_samples: (N, K, T, 2) generated series,
    pooled for JSD/TV. point: (N, T, 2) point estimate used for NRMSE; defaults
    to the per-element median over the K samples.
    """
    real = np.asarray(real, dtype=np.float64)
    gen_samples = np.asarray(gen_samples, dtype=np.float64)
    if gen_samples.ndim == 3:
        gen_samples = gen_samples[:, None]
    if real.ndim != 3 or real.shape[-1] != 2:
        raise ValueError(f"real must be (N, T, 2), got {real.shape}")
    if gen_samples.shape[:1] + gen_samples.shape[2:] != real.shape:
        raise ValueError(f"generated shape {gen_samples.shape} does not match real {real.shape}")
    if point is None:
        point = np.median(gen_samples, axis=1)
    point = np.asarray(point, dtype=np.float64)
    rows = []
    for c, name in enumerate(ATTRIBUTES):
        rows.append(
            {
                "attribute": name,
                "jsd": jsd(real[..., c], gen_samples[..., c], bins),
                "tv": tv(real[..., c], gen_samples[..., c], bins),
                "nrmse": nrmse(real[..., c], point[..., c]),
                "n_sequences": int(real.shape[0]),
                "bins": int(bins),
            }
        )
    return rows
