"""Benchmark harness: Little's Law, a FIFO queue simulator, stage profiling,
scaling fits and a constant-power energy model.

The two canned hardware scenarios carry the measured single-set service
times (Edison 64.65 s, Raspberry Pi 12.39 s), a one-per-minute arrival rate
and the active power draws (529 mW, 198 mW).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import psutil

from .cloud_sink import encode_frame
from .device_sim import GloveConfig, TapProtocol, default_protocol, encode_packet, packetize, synth_session
from .errors import DivisionError, DomainError, InsufficientDataError
from .fog_gateway import (
    ForwardPolicy,
    SessionSummary,
    SignalParams,
    analyze_series,
    apply_forward_policy,
    condition_samples,
    with_encoded_size,
)
from .signal_core import Channel

BENCH_CSV_HEADER = ("n_datasets", "stage", "wall_ms", "cpu_pct", "mem_pct", "seed")
DEFAULT_ARRIVAL_INTERVAL_S = 60.0


class Stage(str, enum.Enum):
    LOAD = "Load"
    CONDITION = "Condition"
    ANALYZE = "Analyze"
    TRANSMIT = "Transmit"
    TOTAL = "Total"


@dataclass(frozen=True)
class StageTiming:
    n_datasets: int
    stage: Stage
    wall_ms: float
    cpu_pct: float
    mem_pct: float
    seed: int


@dataclass(frozen=True)
class QueueStats:
    wip: float
    acr: float
    lead_time_s: float
    utilization: float
    saturated: bool


@dataclass(frozen=True)
class QueueResult:
    stats: QueueStats
    sojourn_s: tuple[float, ...]
    wait_s: tuple[float, ...]
    in_system_at_arrival: tuple[int, ...]

    @property
    def mean_sojourn_s(self) -> float:
        return float(np.mean(self.sojourn_s))


@dataclass(frozen=True)
class PowerModel:
    name: str
    active_mw: float

    def __post_init__(self):
        if not self.active_mw > 0:
            raise ValueError("active_mw must be positive")


PI = PowerModel("pi", 198.0)
EDISON = PowerModel("edison", 529.0)


class ScalingModel(str, enum.Enum):
    CONSTANT = "Constant"
    LINEAR = "Linear"
    NLOGN = "NLogN"
    QUADRATIC = "Quadratic"


_BASIS = {
    ScalingModel.CONSTANT: lambda n: np.ones_like(n),
    ScalingModel.LINEAR: lambda n: n,
    ScalingModel.NLOGN: lambda n: n * np.log(n),
    ScalingModel.QUADRATIC: lambda n: n * n,
}


@dataclass(frozen=True)
class ScalingFit:
    model: ScalingModel
    coefficient: float
    r_squared: float
    candidates: dict[str, tuple[float, float]] = field(default_factory=dict)


def little_law(wip: float, acr: float) -> float:
    """Lead time = WIP / ACR."""
    if wip < 0:
        raise DomainError(f"WIP must be non-negative, got {wip}")
    if acr <= 0:
        raise DivisionError(f"completion rate must be positive, got {acr}")
    return wip / acr


def _draws(mean: float, n: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "deterministic":
        return np.full(n, float(mean))
    if kind == "exponential":
        return rng.exponential(mean, size=n)
    raise ValueError(f"unknown distribution {kind!r}")


def time_average_in_system(arrivals: np.ndarray, departures: np.ndarray) -> tuple[float, float]:
    """Integrate N(t) over [0, last departure] by sweeping the event list.

    Returns ``(area, horizon)``.
    """
    events = sorted([(t, 1) for t in arrivals.tolist()] + [(t, -1) for t in departures.tolist()], key=lambda e: (e[0], e[1]))
    area, level, last = 0.0, 0, 0.0
    for t, step in events:
        area += level * (t - last)
        level += step
        last = t
    return area, last


def simulate_queue(
    interarrival_s: float,
    service_time_s: float,
    n_jobs: int,
    seed: int = 0,
    discipline: str = "FIFO",
    arrival_dist: str = "deterministic",
    service_dist: str = "deterministic",
) -> QueueResult:
    """Single-server FIFO queue. The first job arrives at t=0.

    WIP is the time average of jobs in system over ``[0, last departure]``
    and ACR is ``n_jobs`` over the same horizon; ``lead_time_s`` is their
    ratio. Utilization uses the configured means.
    """
    if discipline != "FIFO":
        raise ValueError(f"unsupported discipline {discipline!r}")
    if interarrival_s <= 0 or service_time_s <= 0:
        raise DomainError("interarrival and service times must be positive")
    if n_jobs < 1:
        raise DomainError("n_jobs must be >= 1")
    rng = np.random.default_rng(seed)
    gaps = _draws(interarrival_s, n_jobs, arrival_dist, rng)
    service = _draws(service_time_s, n_jobs, service_dist, rng)
    arrivals = np.concatenate(([0.0], np.cumsum(gaps[1:])))
    departures = np.empty(n_jobs)
    starts = np.empty(n_jobs)
    free_at = 0.0
    for i in range(n_jobs):
        starts[i] = max(arrivals[i], free_at)
        free_at = departures[i] = starts[i] + service[i]
    sojourn = departures - arrivals
    in_system = [int(i - np.searchsorted(departures[:i], arrivals[i], side="right")) for i in range(n_jobs)]
    area, horizon = time_average_in_system(arrivals, departures)
    wip = area / horizon
    acr = n_jobs / horizon
    rho = service_time_s / interarrival_s
    stats = QueueStats(wip, acr, little_law(wip, acr), rho, rho >= 1.0)
    return QueueResult(stats, tuple(sojourn.tolist()), tuple((starts - arrivals).tolist()), tuple(in_system))


def energy_estimate(active_s: float, model: PowerModel) -> float:
    """Millijoules for ``active_s`` seconds at the model's active draw."""
    if active_s < 0:
        raise DomainError(f"active time must be non-negative, got {active_s}")
    return model.active_mw * active_s


def fit_scaling(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Fit ``t = c * f(n)`` through the origin for each candidate ``f``.

    The best r^2 wins; near-ties (within 1e-9) go to the simpler model.
    r^2 is taken about the mean of ``t`` and clamped to [0, 1].
    """
    ns = sorted({float(n) for n, _ in points})
    if len(points) < 3 or len(ns) < 3:
        raise InsufficientDataError(f"need at least 3 points with distinct n, got {len(points)}")
    n = np.array([p[0] for p in points], dtype=float)
    t = np.array([p[1] for p in points], dtype=float)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    best = None
    candidates = {}
    for model, basis in _BASIS.items():
        f = basis(n)
        denom = float(f @ f)
        c = float(f @ t) / denom if denom > 0 else 0.0
        ss_res = float(np.sum((t - c * f) ** 2))
        scale = max(float(t @ t), 1e-300)
        if ss_tot <= 1e-12 * scale:
            r2 = 1.0 if ss_res <= 1e-12 * scale else 0.0
        else:
            r2 = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
        candidates[model.value] = (c, r2)
        if best is None or r2 > best[2] + 1e-9:
            best = (model, c, r2)
    return ScalingFit(best[0], best[1], best[2], candidates)


# --- profiling -------------------------------------------------------------------


class _Sampler:
    """Wall time plus process CPU% and memory% across a stage."""

    def __init__(self):
        self.proc = psutil.Process()

    def __enter__(self):
        self.w0 = time.perf_counter()
        self.c0 = time.process_time()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.w0
        cpu = time.process_time() - self.c0
        self.cpu_pct = min(100.0, 100.0 * cpu / self.wall) if self.wall > 0 else 0.0
        self.mem_pct = min(100.0, float(self.proc.memory_percent()))


def profile_pipeline(
    n_datasets_list: Sequence[int],
    seed: int,
    csv_path: str | Path | None = None,
    protocol: TapProtocol | None = None,
    glove: GloveConfig | None = None,
    params: SignalParams | None = None,
) -> list[StageTiming]:
    """Time each gateway stage over ``n`` synthetic sessions, for each ``n``.

    Stages: Load (synthesize and packetize), Condition, Analyze (taps,
    profiles, summaries), Transmit (policy frames to wire bytes). Total is
    the wall time of the whole run.
    """
    if any(n < 1 for n in n_datasets_list):
        raise DomainError("every n_datasets must be >= 1")
    protocol = protocol or default_protocol()
    glove = glove or GloveConfig()
    params = params or SignalParams()
    spec = glove.spec
    rows: list[StageTiming] = []
    for n in n_datasets_list:
        samplers = {}
        total = _Sampler().__enter__()
        with _Sampler() as s:
            streams = []
            for i in range(n):
                cfg = replace(glove, seed=seed + i)
                stream = synth_session(protocol, cfg)
                packets = packetize(stream, f"bench-{i}", 25)
                raw = sum(len(encode_packet(p)) for p in packets)
                streams.append((stream, raw))
        samplers[Stage.LOAD] = s
        with _Sampler() as s:
            conditioned = [condition_samples(stream, spec, params) for stream, _ in streams]
        samplers[Stage.CONDITION] = s
        with _Sampler() as s:
            summaries = []
            for i, series in enumerate(conditioned):
                ch = Channel.INDEX if Channel.INDEX in series else next(iter(series))
                _, rounds, _ = analyze_series(series[ch], protocol, params)
                summaries.append(
                    with_encoded_size(
                        SessionSummary(f"bench-{i}:0", f"bench-{i}", tuple(rounds), sum(r.tap_count for r in rounds), protocol.duration_s)
                    )
                )
        samplers[Stage.ANALYZE] = s
        with _Sampler() as s:
            wire = b"".join(encode_frame(f) for sm in summaries for f in apply_forward_policy(sm, ForwardPolicy()))
        samplers[Stage.TRANSMIT] = s
        total.__exit__(None, None, None)
        samplers[Stage.TOTAL] = total
        for stage in Stage:
            m = samplers[stage]
            rows.append(StageTiming(n, stage, m.wall * 1000.0, m.cpu_pct, m.mem_pct, seed))
        del wire
    if csv_path is not None:
        write_bench_csv(csv_path, rows)
    return rows


def bench_csv_text(rows: Sequence[StageTiming]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_CSV_HEADER)
    for r in rows:
        w.writerow([r.n_datasets, r.stage.value, f"{r.wall_ms:.3f}", f"{r.cpu_pct:.1f}", f"{r.mem_pct:.2f}", r.seed])
    return buf.getvalue()


def write_bench_csv(path: str | Path, rows: Sequence[StageTiming]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(bench_csv_text(rows))


# --- scenarios -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchScenario:
    name: str
    service_time_s: float
    power: PowerModel
    interarrival_s: float = DEFAULT_ARRIVAL_INTERVAL_S
    n_jobs: int = 200
    arrival_dist: str = "deterministic"
    service_dist: str = "deterministic"


DEFAULT_SCENARIOS = (
    BenchScenario("edison", 64.65, EDISON),
    BenchScenario("pi", 12.39, PI),
)


def run_scenario(sc: BenchScenario, seed: int) -> dict:
    """Queue behaviour at the scenario's arrival rate plus one-set figures.

    ``lead_time_s`` is the single-set lead time (WIP of one set completed at
    the service rate); ``queue_stats`` is the simulated steady traffic.
    """
    result = simulate_queue(sc.interarrival_s, sc.service_time_s, sc.n_jobs, seed, "FIFO", sc.arrival_dist, sc.service_dist)
    return {
        "name": sc.name,
        "service_time_s": sc.service_time_s,
        "interarrival_s": sc.interarrival_s,
        "lead_time_s": little_law(1.0, 1.0 / sc.service_time_s),
        "queue_stats": asdict(result.stats),
        "mean_sojourn_s": result.mean_sojourn_s,
        "first_sojourn_s": result.sojourn_s[0],
        "final_sojourn_s": result.sojourn_s[-1],
        "power_mw": sc.power.active_mw,
        "energy_mj": energy_estimate(sc.service_time_s, sc.power),
    }


def run_bench(
    out_dir: str | Path,
    seed: int,
    scenarios: Sequence[BenchScenario] = DEFAULT_SCENARIOS,
    n_datasets_list: Sequence[int] = (1, 2, 4, 8, 16),
    protocol: TapProtocol | None = None,
) -> dict:
    """Write ``bench.csv`` and ``bench_report.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = profile_pipeline(n_datasets_list, seed, out / "bench.csv", protocol=protocol)
    totals = [(r.n_datasets, r.wall_ms) for r in rows if r.stage is Stage.TOTAL]
    fit = fit_scaling(totals) if len({n for n, _ in totals}) >= 3 else None
    report = {
        "scenarios": [run_scenario(s, seed) for s in scenarios],
        "scaling_fit": None
        if fit is None
        else {"model": fit.model.value, "coefficient": fit.coefficient, "r_squared": fit.r_squared},
    }
    (out / "bench_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report
