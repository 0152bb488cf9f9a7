"""Synthetic multi-cell scenarios, user mobility and RSRP/SINR datasets.

A scenario is a set of base stations in one area of interest plus a random-
waypoint trajectory per user. :func:`synthesize_dataset` evaluates every
BS-user link at every step, adds temporally correlated log-normal shadowing,
picks the strongest cell as the server and derives co-channel interference and
SINR from it. Each record also carries the shadowing-free RSRP of the serving
link, which is the physics label used during teacher training.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .propagation import (
    AOI,
    CitySize,
    Environment,
    LinkBudget,
    LinkGeometry,
    dbm_to_watt,
    linear_to_db,
    path_loss_db,
    received_power_dbm,
)

DEFAULT_FREQUENCIES_HZ = (700e6, 2.6e9, 4.9e9)

# inter-site distance in metres: ultra-dense urban grid, suburban macro, rural macro
DEFAULT_ISD_M = {
    AOI.URBAN: 200.0,
    AOI.SUBURB: 500.0,
    AOI.RURAL: 1732.0,
}

# (sigma_db, correlation_steps)
DEFAULT_SHADOWING = {
    AOI.URBAN: (8.0, 10.0),
    AOI.SUBURB: (6.0, 15.0),
    AOI.RURAL: (4.0, 20.0),
}


@dataclass(frozen=True)
class ScenarioParams:
    aoi: AOI = AOI.URBAN
    city_size: CitySize = CitySize.BIG
    hata_k: float = 35.94
    n_stations: int = 7
    n_users: int = 100
    n_steps: int = 24
    layout: str = "hex"
    isd_m: float | None = None
    area_m: float | None = None
    frequencies_hz: tuple = DEFAULT_FREQUENCIES_HZ
    height_range_m: tuple = (15.0, 40.0)
    power_range_dbm: tuple = (30.0, 46.0)
    ue_height_m: float = 1.5
    speed_range_mps: tuple = (0.5, 20.0)
    dt_s: float = 5.0
    noise_dbm: float = -104.0
    shadowing_sigma_db: float | None = None
    shadowing_correlation_steps: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "aoi", AOI(self.aoi))
        object.__setattr__(self, "city_size", CitySize(self.city_size))
        for name in ("frequencies_hz", "height_range_m", "power_range_dbm", "speed_range_mps"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.n_stations < 1:
            raise ValueError(f"n_stations must be >= 1, got {self.n_stations}")
        if self.n_users < 1:
            raise ValueError(f"n_users must be >= 1, got {self.n_users}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if self.layout not in ("hex", "uniform"):
            raise ValueError(f"layout must be 'hex' or 'uniform', got {self.layout!r}")
        for name in ("isd_m", "area_m"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.dt_s <= 0 or self.ue_height_m <= 0:
            raise ValueError("dt_s and ue_height_m must be > 0")
        if not self.frequencies_hz or min(self.frequencies_hz) <= 0:
            raise ValueError("frequencies_hz must be a non-empty set of positive values")
        for name in ("height_range_m", "power_range_dbm", "speed_range_mps"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (low, high) with low <= high")
        if self.height_range_m[0] <= 0:
            raise ValueError("BS heights must be > 0")
        if self.speed_range_mps[0] < 0:
            raise ValueError("speeds must be >= 0")
        if self.shadowing_sigma_db is not None and self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        if self.shadowing_correlation_steps is not None and self.shadowing_correlation_steps <= 0:
            raise ValueError("shadowing_correlation_steps must be > 0")

    @property
    def shadowing(self) -> tuple[float, float]:
        sigma, corr = DEFAULT_SHADOWING[self.aoi]
        if self.shadowing_sigma_db is not None:
            sigma = self.shadowing_sigma_db
        if self.shadowing_correlation_steps is not None:
            corr = self.shadowing_correlation_steps
        return float(sigma), float(corr)

    @property
    def environment(self) -> Environment:
        return Environment(self.aoi, self.city_size, self.hata_k)

    @property
    def site_spacing_m(self) -> float:
        return float(self.isd_m if self.isd_m is not None else DEFAULT_ISD_M[self.aoi])

    @property
    def side_m(self) -> float:
        """Side of the square area users roam in; three inter-site distances by default."""
        return float(self.area_m if self.area_m is not None else 3.0 * self.site_spacing_m)


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: tuple[float, float]
    height_m: float
    fc_hz: float
    pt_dbm: float


@dataclass
class Scenario:
    params: ScenarioParams
    stations: list[BaseStation]
    trajectories: np.ndarray  # (M, T, 2) metres

    def __post_init__(self):
        if not self.stations:
            raise ValueError("a scenario needs at least one base station")
        traj = np.asarray(self.trajectories, dtype=float)
        if traj.ndim != 3 or traj.shape[2] != 2 or traj.shape[0] < 1 or traj.shape[1] < 2:
            raise ValueError(f"trajectories must have shape (M>=1, T>=2, 2), got {traj.shape}")
        self.trajectories = traj

    @property
    def environment(self) -> Environment:
        return self.params.environment

    @property
    def noise_dbm(self) -> float:
        return self.params.noise_dbm

    @property
    def n_steps(self) -> int:
        return self.trajectories.shape[1]


@dataclass
class ConditionSeries:
    """Per-step serving-link conditions: distance, BS height, carrier, transmit power, AOI."""

    d: np.ndarray
    h_bs: np.ndarray
    f: np.ndarray
    p_t: np.ndarray
    aoi: AOI

    def __post_init__(self):
        self.aoi = AOI(self.aoi)
        for name in ("d", "h_bs", "f", "p_t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        lengths = {len(self.d), len(self.h_bs), len(self.f), len(self.p_t)}
        if len(lengths) != 1:
            raise ValueError(f"condition sequences must share one length, got {sorted(lengths)}")
        if np.any(self.d <= 0):
            raise ValueError("distances must be > 0")

    def __len__(self):
        return len(self.d)


@dataclass
class TargetSeries:
    rsrp_dbm: np.ndarray
    sinr_db: np.ndarray

    def __post_init__(self):
        self.rsrp_dbm = np.asarray(self.rsrp_dbm, dtype=float)
        self.sinr_db = np.asarray(self.sinr_db, dtype=float)
        if self.rsrp_dbm.shape != self.sinr_db.shape:
            raise ValueError("RSRP and SINR series must have equal length")
        if not (np.all(np.isfinite(self.rsrp_dbm)) and np.all(np.isfinite(self.sinr_db))):
            raise ValueError("target series must be finite")

    def as_matrix(self) -> np.ndarray:
        """T x 2 matrix with columns (RSRP, SINR)."""
        return np.stack([self.rsrp_dbm, self.sinr_db], axis=1)

    @classmethod
    def from_matrix(cls, x) -> "TargetSeries":
        x = np.asarray(x, dtype=float)
        return cls(x[:, 0], x[:, 1])


@dataclass
class DatasetRecord:
    user_id: int
    conditions: ConditionSeries
    real: TargetSeries
    theoretical_rsrp_dbm: np.ndarray
    serving_ids: np.ndarray
    t: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.conditions)
        self.theoretical_rsrp_dbm = np.asarray(self.theoretical_rsrp_dbm, dtype=float)
        self.serving_ids = np.asarray(self.serving_ids, dtype=int)
        self.t = np.arange(n) if self.t is None else np.asarray(self.t, dtype=int)
        for name, arr in (
            ("real", self.real.rsrp_dbm),
            ("theoretical_rsrp_dbm", self.theoretical_rsrp_dbm),
            ("serving_ids", self.serving_ids),
            ("t", self.t),
        ):
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")

    @property
    def aoi(self) -> AOI:
        return self.conditions.aoi

    def to_dict(self) -> dict:
        c = self.conditions
        return {
            "user_id": int(self.user_id),
            "aoi": c.aoi.value,
            "t": self.t.tolist(),
            "d_m": c.d.tolist(),
            "h_bs_m": c.h_bs.tolist(),
            "f_hz": c.f.tolist(),
            "pt_dbm": c.p_t.tolist(),
            "rsrp_dbm": self.real.rsrp_dbm.tolist(),
            "sinr_db": self.real.sinr_db.tolist(),
            "theo_rsrp_dbm": self.theoretical_rsrp_dbm.tolist(),
            "serving_id": self.serving_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "DatasetRecord":
        return cls(
            user_id=int(row["user_id"]),
            conditions=ConditionSeries(row["d_m"], row["h_bs_m"], row["f_hz"], row["pt_dbm"], row["aoi"]),
            real=TargetSeries(row["rsrp_dbm"], row["sinr_db"]),
            theoretical_rsrp_dbm=row["theo_rsrp_dbm"],
            serving_ids=row["serving_id"],
            t=row["t"],
        )


RECORD_KEYS = (
    "user_id", "aoi", "t", "d_m", "h_bs_m", "f_hz", "pt_dbm",
    "rsrp_dbm", "sinr_db", "theo_rsrp_dbm", "serving_id",
)


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def hex_grid(n: int, isd_m: float, center=(0.0, 0.0)) -> np.ndarray:
    """First ``n`` sites of a hexagonal lattice, filled ring by ring from the center."""
    sites = [(0, 0)]
    ring = 1
    # axial directions; walking them from a corner traces one hexagonal ring
    directions = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)]
    while len(sites) < n:
        q, r = -ring, ring
        for dq, dr in directions:
            for _ in range(ring):
                sites.append((q, r))
                q, r = q + dq, r + dr
        ring += 1
    axial = np.array(sites[:n], dtype=float)
    x = isd_m * (axial[:, 0] + axial[:, 1] / 2.0)
    y = isd_m * (math.sqrt(3) / 2.0) * axial[:, 1]
    return np.stack([x + center[0], y + center[1]], axis=1)


def generate_trajectory(params: ScenarioParams, seed) -> np.ndarray:
    """Random-waypoint walk inside the square area, one position per step.

    ``seed`` may be an int, a SeedSequence or a Generator.
    """
    rng = np.random.default_rng(seed)
    side = params.side_m
    lo_v, hi_v = params.speed_range_mps
    pos = rng.uniform(0.0, side, size=2)
    waypoint = rng.uniform(0.0, side, size=2)
    speed = rng.uniform(lo_v, hi_v)
    out = np.empty((params.n_steps, 2))
    out[0] = pos
    for k in range(1, params.n_steps):
        budget = speed * params.dt_s
        while budget > 0.0:
            gap = waypoint - pos
            dist = float(np.hypot(*gap))
            if dist > budget:
                pos = pos + gap * (budget / dist)
                break
            pos = waypoint
            budget -= dist
            waypoint = rng.uniform(0.0, side, size=2)
            speed = rng.uniform(lo_v, hi_v)
            budget = min(budget, speed * params.dt_s)
        out[k] = pos
    return out


def generate_scenario(params: ScenarioParams, seed) -> Scenario:
    params.validate()
    root = as_seed_sequence(seed)
    bs_seq, user_seq = root.spawn(2)
    rng = np.random.default_rng(bs_seq)
    n = params.n_stations
    if params.layout == "hex":
        half = params.side_m / 2
        positions = hex_grid(n, params.site_spacing_m, center=(half, half))
    else:
        positions = rng.uniform(0.0, params.side_m, size=(n, 2))
    freqs = rng.choice(np.asarray(params.frequencies_hz), size=n)
    heights = rng.uniform(*params.height_range_m, size=n)
    powers = rng.uniform(*params.power_range_dbm, size=n)
    stations = [
        BaseStation(i, (float(positions[i, 0]), float(positions[i, 1])), float(heights[i]), float(freqs[i]), float(powers[i]))
        for i in range(n)
    ]
    trajectories = np.stack([generate_trajectory(params, s) for s in user_seq.spawn(params.n_users)])
    return Scenario(params, stations, trajectories)


def gauss_markov_rho(correlation_steps: float) -> float:
    return math.exp(-1.0 / correlation_steps) if math.isfinite(correlation_steps) else 1.0


def environment_gain_db(prev_db, sigma_db: float, correlation_steps: float, rng: np.random.Generator):
    """Advance the shadowing process by one step.

    ``prev_db=None`` starts the process from its stationary N(0, sigma^2) law.
    Works elementwise when ``prev_db`` is an array of independent links.
    """
    if prev_db is None:
        return sigma_db * rng.standard_normal()
    rho = gauss_markov_rho(correlation_steps)
    z = rng.standard_normal(np.shape(prev_db))
    return rho * np.asarray(prev_db) + math.sqrt(1.0 - rho * rho) * sigma_db * z


def shadowing_series(n_steps: int, n_links: int, sigma_db: float, correlation_steps: float, rng) -> np.ndarray:
    """(n_steps, n_links) matrix of independent Gauss-Markov shadowing paths."""
    rho = gauss_markov_rho(correlation_steps)
    z = rng.standard_normal((n_steps, n_links))
    g = np.empty((n_steps, n_links))
    g[0] = sigma_db * z[0]
    innovation = math.sqrt(1.0 - rho * rho) * sigma_db
    for k in range(1, n_steps):
        g[k] = rho * g[k - 1] + innovation * z[k]
    return g


def link_distance_m(bs: BaseStation, user_pos, ue_height_m: float):
    """3D Euclidean distance between a BS antenna and a UE antenna."""
    user_pos = np.asarray(user_pos, dtype=float)
    dx = user_pos[..., 0] - bs.position[0]
    dy = user_pos[..., 1] - bs.position[1]
    dz = bs.height_m - ue_height_m
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def link_pr_dbm(scenario: Scenario, bs: BaseStation, user_pos, gain_db=0.0):
    p = scenario.params
    geom = LinkGeometry(link_distance_m(bs, user_pos, p.ue_height_m), bs.height_m, p.ue_height_m, bs.fc_hz)
    return received_power_dbm(LinkBudget(bs.pt_dbm), path_loss_db(scenario.environment, geom)) + gain_db


def serving_selection(pr_dbm) -> tuple[float, int]:
    """Strongest cell; ties go to the lowest index."""
    pr = np.asarray(pr_dbm, dtype=float)
    if pr.size == 0:
        raise ValueError("serving selection needs at least one received power")
    idx = int(np.argmax(pr))
    return float(pr[idx]), idx


def _canonical_khz(freqs):
    return np.round(np.asarray(freqs, dtype=float) / 1e3).astype(np.int64)


def interference_power_w(pr_w, freqs, serving_index: int) -> float:
    pr_w = np.asarray(pr_w, dtype=float)
    khz = _canonical_khz(freqs)
    if pr_w.shape != khz.shape:
        raise ValueError("powers and frequencies must have equal length")
    if not 0 <= serving_index < len(pr_w):
        raise IndexError(f"serving index {serving_index} out of range")
    mask = khz == khz[serving_index]
    mask[serving_index] = False
    return float(pr_w[mask].sum())


def sinr(rsrp_w, interference_w, noise_w):
    if np.any(np.asarray(noise_w) <= 0):
        raise ValueError("noise power must be > 0")
    return np.asarray(rsrp_w) / (np.asarray(interference_w) + np.asarray(noise_w))


def theoretical_rsrp(conditions: ConditionSeries, environment: Environment | None = None, ue_height_m: float = 1.5):
    """Shadowing-free RSRP of the serving link from the condition quintuple alone."""
    env = environment or Environment(conditions.aoi)
    if env.aoi is not conditions.aoi:
        env = dataclasses.replace(env, aoi=conditions.aoi)
    geom = LinkGeometry(conditions.d, conditions.h_bs, ue_height_m, conditions.f)
    return conditions.p_t - path_loss_db(env, geom)


def _user_record(scenario: Scenario, user: int, seed_seq) -> DatasetRecord:
    p = scenario.params
    stations = scenario.stations
    positions = scenario.trajectories[user]
    n_steps, n = positions.shape[0], len(stations)
    bs_xy = np.array([s.position for s in stations])
    bs_h = np.array([s.height_m for s in stations])
    bs_f = np.array([s.fc_hz for s in stations])
    bs_pt = np.array([s.pt_dbm for s in stations])

    dx = positions[:, None, 0] - bs_xy[None, :, 0]
    dy = positions[:, None, 1] - bs_xy[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy + (bs_h - p.ue_height_m)[None, :] ** 2)
    geom = LinkGeometry(dist, np.broadcast_to(bs_h, dist.shape), p.ue_height_m, np.broadcast_to(bs_f, dist.shape))
    pr_det = bs_pt[None, :] - path_loss_db(scenario.environment, geom)

    sigma, corr = p.shadowing
    gains = shadowing_series(n_steps, n, sigma, corr, np.random.default_rng(seed_seq))
    pr_dbm = pr_det + gains
    pr_w = dbm_to_watt(pr_dbm)
    noise_w = float(dbm_to_watt(p.noise_dbm))

    serving = np.argmax(pr_dbm, axis=1)
    steps = np.arange(n_steps)
    rsrp_dbm = pr_dbm[steps, serving]
    khz = _canonical_khz(bs_f)
    co_channel = khz[None, :] == khz[serving][:, None]
    co_channel[steps, serving] = False
    interference = np.where(co_channel, pr_w, 0.0).sum(axis=1)
    sinr_db = linear_to_db(sinr(pr_w[steps, serving], interference, noise_w))

    cond = ConditionSeries(dist[steps, serving], bs_h[serving], bs_f[serving], bs_pt[serving], p.aoi)
    theo = theoretical_rsrp(cond, scenario.environment, p.ue_height_m)
    return DatasetRecord(user, cond, TargetSeries(rsrp_dbm, sinr_db), theo, serving)


def synthesize_dataset(scenario: Scenario, seed) -> list[DatasetRecord]:
    """One record per user; each user draws shadowing from its own seeded substream."""
    streams = as_seed_sequence(seed).spawn(scenario.trajectories.shape[0])
    return [_user_record(scenario, m, s) for m, s in enumerate(streams)]


def generate_dataset(params: ScenarioParams, seed, aois=None) -> list[DatasetRecord]:
    """Scenario + records for each AOI in ``aois``; user ids are unique across AOIs."""
    aois = [AOI(a) for a in (aois or [params.aoi])]
    records = []
    for i, seq in enumerate(as_seed_sequence(seed).spawn(len(aois))):
        scen_seq, data_seq = seq.spawn(2)
        scenario = generate_scenario(dataclasses.replace(params, aoi=aois[i]), scen_seq)
        for rec in synthesize_dataset(scenario, data_seq):
            rec.user_id = len(records)
            records.append(rec)
    return records
