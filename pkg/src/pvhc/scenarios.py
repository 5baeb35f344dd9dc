"""Scenario generation and the probabilistic load-flow driver.

Three stages produce the ``(x, V_max)`` training pairs:

1. Correlated (demand, PV output) samples from a Gaussian copula with Normal
   and Beta marginals, reduced to a handful of representative profiles.
2. Random PV location/size scenarios, each rescaled to a target penetration
   drawn uniformly on (0, 1).
3. One AC load flow (optionally with local droop control) per
   scenario/profile pair, recording the largest bus voltage.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .control import ControlConfig, iterate_control
from .netmodel import Network
from .powerflow import InjectionSet, SolverSettings, solve_ac_power_flow
from .probdist import (
    BetaParams,
    CopulaSpec,
    NormalParams,
    beta_inv_cdf,
    make_rng,
    normal_ppf_clamped,
    sample_gaussian_copula,
)

__all__ = [
    "LoadGenProfile",
    "PvScenario",
    "SampleRecord",
    "ScenarioConfig",
    "SimulationError",
    "sample_profiles",
    "reduce_profiles",
    "generate_pv_scenarios",
    "evaluate_pair",
    "run_probabilistic_load_flow",
    "write_samples_csv",
    "read_samples_csv",
    "SAMPLES_HEADER",
]

log = logging.getLogger(__name__)

SAMPLES_HEADER = ("scenario_id", "profile_id", "control_mode", "x", "v_max", "converged")

# Stream keys for make_rng; fixed so each stage draws from its own stream.
_STREAM_COPULA = 1
_STREAM_PV = 2

_MAX_SIZE_ATTEMPTS = 1000


class SimulationError(RuntimeError):
    """Raised when too many load flows fail to converge."""


@dataclass(frozen=True)
class LoadGenProfile:
    p_dn: float
    p_gn: float

    def __post_init__(self):
        if not (0.0 <= self.p_dn <= 1.0 and 0.0 <= self.p_gn <= 1.0):
            raise ValueError(f"profile values must lie in [0, 1], got ({self.p_dn}, {self.p_gn})")


@dataclass(frozen=True)
class PvScenario:
    """PV capacities (MW) by bus id and the resulting penetration level.

    ``attempts`` counts how many size draws were needed before the target
    penetration was reachable under the per-bus caps.
    """

    capacities: Mapping[int, float]
    penetration: float
    attempts: int = 1

    @property
    def total_mw(self) -> float:
        return float(sum(self.capacities.values()))


@dataclass(frozen=True)
class SampleRecord:
    scenario_id: int
    profile_id: int
    control_mode: str
    x: float
    v_max: float
    converged: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    n_location_scenarios: int = 3000
    n_profiles: int = 4
    raw_copula_samples: int = 10000
    candidate_buses: tuple[int, ...] | None = None
    per_bus_cap_factor: float = 1.5
    demand: NormalParams = field(default_factory=NormalParams)
    generation: BetaParams = field(default_factory=BetaParams)
    copula: CopulaSpec = field(default_factory=CopulaSpec)
    profile_tail_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.candidate_buses is not None:
            object.__setattr__(self, "candidate_buses", tuple(int(b) for b in self.candidate_buses))
        for name in ("n_location_scenarios", "n_profiles", "raw_copula_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.per_bus_cap_factor > 0:
            raise ValueError("per_bus_cap_factor must be positive")
        if not 0 < self.profile_tail_fraction <= 1:
            raise ValueError("profile_tail_fraction must lie in (0, 1]")
        if self.n_profiles > self.raw_copula_samples:
            raise ValueError("n_profiles cannot exceed raw_copula_samples")


# --------------------------------------------------------------------------
# Load/generation profiles
# --------------------------------------------------------------------------

def sample_profiles(cfg: ScenarioConfig) -> list[LoadGenProfile]:
    """Draw ``cfg.raw_copula_samples`` correlated (demand, PV output) pairs."""
    u = sample_gaussian_copula(cfg.copula, cfg.raw_copula_samples, cfg.seed, _STREAM_COPULA)
    p_dn = normal_ppf_clamped(u[:, 0], cfg.demand)
    p_gn = beta_inv_cdf(u[:, 1], cfg.generation)
    return [LoadGenProfile(float(d), float(g)) for d, g in zip(p_dn, p_gn)]


def reduce_profiles(
    raw: Sequence[LoadGenProfile],
    k: int,
    seed: int,
    tail_fraction: float = 1.0,
) -> list[LoadGenProfile]:
    """Reduce raw samples to ``k`` representative profiles by k-means.

    Parameters
    ----------
    raw : sequence of LoadGenProfile
    k : int
        Number of representatives; must not exceed ``len(raw)``.
    seed : int
        Seeds the k-means initialisation (10 restarts).
    tail_fraction : float, default 1.0
        Cluster only the samples in the top ``tail_fraction`` of PV output.
        Over-voltage is driven by high generation, so a small fraction picks
        representatives of the stressed operating points; 1.0 clusters the
        whole sample.

    Returns
    -------
    list of LoadGenProfile
        Centroids ordered by decreasing PV output. If ``k == len(raw)`` the
        input is returned unchanged.
    """
    n = len(raw)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"cannot reduce {n} profiles to {k}")
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    if k == n:
        return list(raw)
    from sklearn.cluster import KMeans

    pts = np.array([(p.p_dn, p.p_gn) for p in raw], dtype=float)
    n_tail = min(n, max(k, math.ceil(tail_fraction * n)))
    order = np.argsort(-pts[:, 1], kind="stable")
    pts = pts[order[:n_tail]]
    if len(np.unique(pts, axis=0)) <= k:
        centers = np.unique(pts, axis=0)
        centers = np.vstack([centers, np.repeat(centers[-1:], k - len(centers), axis=0)])
    else:
        km = KMeans(n_clusters=k, n_init=10, random_state=int(seed) % 2**32).fit(pts)
        centers = km.cluster_centers_
    centers = np.clip(centers, 0.0, 1.0)
    centers = centers[np.lexsort((-centers[:, 0], -centers[:, 1]))]
    return [LoadGenProfile(float(d), float(g)) for d, g in centers]


# --------------------------------------------------------------------------
# PV location/size scenarios
# --------------------------------------------------------------------------

def _candidates(net: Network, cfg: ScenarioConfig) -> np.ndarray:
    if cfg.candidate_buses is not None:
        ids = list(cfg.candidate_buses)
        unknown = [b for b in ids if b not in net.index_of]
        if unknown:
            raise ValueError(f"candidate buses not in network: {unknown}")
        if net.buses[net.slack_index].id in ids:
            raise ValueError("the slack bus cannot host PV")
    else:
        ids = [b.id for b in net.buses if b.kind != "slack" and b.p_load > 0]
    if not ids:
        raise ValueError("candidate bus set is empty")
    return np.array(ids, dtype=int)


def _water_fill(raw: np.ndarray, cap: np.ndarray, target: float) -> np.ndarray:
    # Scale raw sizes proportionally to sum to target; buses that would exceed
    # their cap are pinned there and the remainder is spread over the rest.
    size = np.zeros_like(raw)
    free = np.ones(len(raw), dtype=bool)
    remaining = target
    while True:
        share = raw[free] * (remaining / raw[free].sum())
        over = share > cap[free]
        if not over.any():
            size[free] = share
            break
        idx = np.flatnonzero(free)[over]
        size[idx] = cap[idx]
        free[idx] = False
        remaining = target - size[~free].sum()
        if not free.any():
            break
    return np.minimum(size, cap)


def _one_scenario(rng, bus_ids, caps, peak_mw) -> PvScenario:
    n = len(bus_ids)
    attempts = 0
    while True:
        x_target = rng.random()
        if x_target == 0.0:
            continue
        target = x_target * peak_mw
        for _ in range(_MAX_SIZE_ATTEMPTS):
            attempts += 1
            k = int(rng.integers(1, n + 1))
            loc = np.sort(rng.choice(n, size=k, replace=False))
            cap = caps[loc]
            raw = (1.0 - rng.random(k)) * cap  # uniform on (0, cap]
            if cap.sum() < target:
                continue
            size = _water_fill(raw, cap, target)
            total = float(size.sum())
            if total <= 0.0:
                continue
            capacities = {int(bus_ids[i]): float(s) for i, s in zip(loc, size)}
            x = float(math.fsum(capacities.values())) / peak_mw
            if not 0.0 < x <= 1.0:
                continue
            return PvScenario(capacities, x, attempts)


def generate_pv_scenarios(net: Network, cfg: ScenarioConfig) -> list[PvScenario]:
    """Random PV placements, each sized to a uniformly drawn penetration target.

    For every scenario the number of PV sites K is uniform on
    {1, ..., n_candidates}, the K sites are distinct and uniformly chosen, and
    raw sizes are uniform on (0, cap_k] with cap_k the per-bus limit. Sizes are
    then rescaled to the target penetration without breaching any cap. Draws
    whose caps cannot reach the target are resampled; the count is kept on
    each scenario as ``attempts``.
    """
    bus_ids = _candidates(net, cfg)
    loads = np.array([net.buses[net.index_of[b]].p_load for b in bus_ids])
    caps = cfg.per_bus_cap_factor * loads
    if not np.all(caps > 0):
        zero = bus_ids[caps <= 0].tolist()
        raise ValueError(f"candidate buses without load have no PV allowance: {zero}")
    peak = net.peak_load_mw
    out = []
    for i in range(cfg.n_location_scenarios):
        rng = make_rng(cfg.seed, _STREAM_PV, i)
        out.append(_one_scenario(rng, bus_ids, caps, peak))
    resampled = sum(s.attempts - 1 for s in out)
    if resampled:
        log.info("PV sizing: %d draws resampled to meet per-bus caps", resampled)
    return out


# --------------------------------------------------------------------------
# Probabilistic load flow
# --------------------------------------------------------------------------

def evaluate_pair(
    net: Network,
    scenario: PvScenario,
    profile: LoadGenProfile,
    control: ControlConfig,
    settings: SolverSettings,
) -> tuple[float, bool]:
    """Maximum bus voltage for one scenario/profile pair and its convergence flag."""
    if control.mode != "none":
        res = iterate_control(net, scenario, profile, control, settings)
        sol, ok = res.solution, res.converged
    else:
        p = net.p_load_pu * -profile.p_dn
        q = net.q_load_pu * -profile.p_dn
        for bus, cap in scenario.capacities.items():
            p[net.index_of[bus]] += cap * profile.p_gn / net.base_mva
        sol = solve_ac_power_flow(net, InjectionSet(p, q), settings)
        ok = sol.converged
    return (sol.v_max if ok else math.nan), ok


def _evaluate_chunk(args):
    net, scenarios, profiles, control, settings, start = args
    out = []
    for i, sc in enumerate(scenarios):
        for j, prof in enumerate(profiles):
            v, ok = evaluate_pair(net, sc, prof, control, settings)
            out.append(SampleRecord(start + i, j, control.mode, sc.penetration, v, ok))
    return out


def run_probabilistic_load_flow(
    net: Network,
    scenarios: Sequence[PvScenario],
    profiles: Sequence[LoadGenProfile],
    control: ControlConfig = ControlConfig(),
    settings: SolverSettings = SolverSettings(),
    n_jobs: int = 1,
    max_failure_fraction: float = 0.01,
) -> list[SampleRecord]:
    """Run one load flow per (scenario, profile) pair.

    Records come back ordered by ``(scenario_id, profile_id)`` whatever the
    value of ``n_jobs``. Non-converged pairs are kept with ``converged=False``
    and ``v_max = nan``; if their share exceeds ``max_failure_fraction`` a
    :class:`SimulationError` is raised.
    """
    if not profiles:
        raise ValueError("need at least one load/generation profile")
    scenarios = list(scenarios)
    profiles = list(profiles)
    if n_jobs == 1 or len(scenarios) < 2:
        records = _evaluate_chunk((net, scenarios, profiles, control, settings, 0))
    else:
        n_chunks = min(len(scenarios), 4 * n_jobs)
        bounds = np.linspace(0, len(scenarios), n_chunks + 1).astype(int)
        tasks = [
            (net, scenarios[a:b], profiles, control, settings, int(a))
            for a, b in zip(bounds[:-1], bounds[1:])
        ]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            records = [r for chunk in pool.map(_evaluate_chunk, tasks) for r in chunk]
    failed = sum(not r.converged for r in records)
    if failed:
        log.warning("%d of %d load flows did not converge", failed, len(records))
        if failed > max_failure_fraction * len(records):
            raise SimulationError(
                f"{failed} of {len(records)} load flows failed to converge "
                f"(limit {max_failure_fraction:.1%})"
            )
    return records


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def write_samples_csv(records: Iterable[SampleRecord], fh) -> None:
    """Write records with shortest round-trip float formatting."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SAMPLES_HEADER)
    for r in records:
        w.writerow([r.scenario_id, r.profile_id, r.control_mode, repr(r.x), repr(r.v_max), int(r.converged)])


def read_samples_csv(fh) -> list[SampleRecord]:
    """Parse a samples CSV; raises ``ValueError`` on a header or row mismatch."""
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("samples CSV is empty") from None
    if tuple(header) != SAMPLES_HEADER:
        raise ValueError(f"unexpected samples header {header!r}; expected {list(SAMPLES_HEADER)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(SAMPLES_HEADER):
            raise ValueError(f"line {lineno}: expected {len(SAMPLES_HEADER)} fields, got {len(row)}")
        try:
            conv = row[5].strip()
            if conv not in ("0", "1"):
                raise ValueError(f"converged flag must be 0 or 1, got {conv!r}")
            out.append(
                SampleRecord(int(row[0]), int(row[1]), row[2], float(row[3]), float(row[4]), conv == "1")
            )
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out
