"""Run configuration: JSON document -> validated ``RunConfig``.

Only ``seed`` is required. Unknown keys raise a ``ConfigWarning`` and are
otherwise ignored. Errors name the dotted key path they refer to.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bench_harness import EDISON, DEFAULT_SCENARIOS, PI, BenchScenario, PowerModel
from .device_sim import GloveConfig, Round, TapProtocol, default_protocol
from .errors import ConfigError
from .fog_gateway import ForwardMode, ForwardPolicy, GatewayConfig, SignalParams
from .mesh_net import LinkModel, TrickleParams
from .signal_core import Channel, FlexSensorSpec


class ConfigWarning(UserWarning):
    pass


_REQUIRED = object()
_NUMBER = (int, float)


def derive_seed(seed: int, name: str) -> int:
    """Per-module seed: first 8 bytes of sha256("<seed>:<name>"), as a 63-bit int."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


class _Section:
    def __init__(self, doc: Any, path: str):
        if not isinstance(doc, dict):
            raise ConfigError(path or "<root>", f"expected an object, got {type(doc).__name__}")
        self.doc = doc
        self.path = path
        self.seen: set[str] = set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def get(self, name: str, types, default=_REQUIRED):
        self.seen.add(name)
        if name not in self.doc:
            if default is _REQUIRED:
                raise ConfigError(self.key(name), "missing required key")
            return default
        value = self.doc[name]
        bad_bool = isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,))
        if bad_bool or not isinstance(value, types):
            names = "/".join(t.__name__ for t in (types if isinstance(types, tuple) else (types,)))
            raise ConfigError(self.key(name), f"expected {names}, got {type(value).__name__}")
        return value

    def section(self, name: str) -> "_Section":
        self.seen.add(name)
        return _Section(self.doc.get(name, {}), self.key(name))

    def has(self, name: str) -> bool:
        return name in self.doc

    def finish(self) -> None:
        for k in sorted(set(self.doc) - self.seen):
            warnings.warn(f"unknown config key {self.key(k)!r} ignored", ConfigWarning, stacklevel=3)


def _build(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{key}.{exc.key}", str(exc)) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass(frozen=True)
class DevicesConfig:
    count: int = 1
    glove: GloveConfig = field(default_factory=GloveConfig)
    protocol: TapProtocol = field(default_factory=default_protocol)
    batch_n: int = 25
    max_retries: int = 3

    @property
    def ids(self) -> list[str]:
        return [f"glove-{i}" for i in range(self.count)]


@dataclass(frozen=True)
class TopologyConfig:
    path: Path | None = None
    kind: str = "star"  # star | clique | random
    edge_prob: float = 0.3
    link: LinkModel = field(default_factory=LinkModel)
    gateway_node: str = "gateway"
    trickle: TrickleParams = field(default_factory=TrickleParams)


@dataclass(frozen=True)
class BenchConfig:
    scenarios: tuple[BenchScenario, ...] = DEFAULT_SCENARIOS
    n_datasets: tuple[int, ...] = (1, 2, 4, 8, 16)
    round_s: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    devices: DevicesConfig = field(default_factory=DevicesConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    gateway_listen: str = "127.0.0.1:0"
    sink_endpoint: str = "127.0.0.1:0"
    bench: BenchConfig = field(default_factory=BenchConfig)
    replay_path: Path | None = None
    replay_device_id: str = "trace-0"
    output_dir: Path = Path("out")

    def module_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)


def _protocol(raw: Any, key: str) -> TapProtocol:
    if raw == "default":
        return default_protocol()
    if not isinstance(raw, list):
        raise ConfigError(key, "expected \"default\" or a list of rounds")
    rounds = []
    for i, item in enumerate(raw):
        s = _Section(item, f"{key}[{i}]")
        d = s.get("duration_s", _NUMBER)
        f0 = s.get("freq_start_hz", _NUMBER)
        f1 = s.get("freq_end_hz", _NUMBER, f0)
        label = s.get("label", str, f"round{i + 1}")
        s.finish()
        rounds.append(_build(s.path, Round, d, f0, f1, label))
    return _build(key, TapProtocol, tuple(rounds))


def _spec(s: _Section) -> FlexSensorSpec:
    base = FlexSensorSpec()
    kw = {name: s.get(name, _NUMBER, getattr(base, name)) for name in base.__dataclass_fields__}
    s.finish()
    return _build(s.path, FlexSensorSpec, **kw)


def _devices(s: _Section) -> DevicesConfig:
    g = s.section("glove")
    base = GloveConfig()
    glove = _build(
        g.path,
        GloveConfig,
        sample_rate_hz=g.get("sample_rate_hz", _NUMBER, base.sample_rate_hz),
        amplitude_deg=g.get("amplitude_deg", _NUMBER, base.amplitude_deg),
        noise_std_deg=g.get("noise_std_deg", _NUMBER, base.noise_std_deg),
        thumb_ratio=g.get("thumb_ratio", _NUMBER, base.thumb_ratio),
        channels=tuple(_build(g.key("channels"), Channel, c) for c in g.get("channels", list, [c.value for c in base.channels])),
        spec=_spec(g.section("spec")),
    )
    g.finish()
    count = s.get("count", int, 1)
    if count < 1:
        raise ConfigError(s.key("count"), "must be >= 1")
    batch_n = s.get("batch_n", int, 25)
    if batch_n < 1:
        raise ConfigError(s.key("batch_n"), "must be >= 1")
    cfg = DevicesConfig(
        count=count,
        glove=glove,
        protocol=_protocol(s.get("protocol", (str, list), "default"), s.key("protocol")),
        batch_n=batch_n,
        max_retries=s.get("max_retries", int, 3),
    )
    s.finish()
    return cfg


def _link(s: _Section) -> LinkModel:
    base = LinkModel()
    kw = {name: s.get(name, _NUMBER, getattr(base, name)) for name in ("latency_s", "loss_prob", "capacity_bps")}
    s.finish()
    return _build(s.path, LinkModel, **kw)


def _topology(s: _Section, base_dir: Path) -> TopologyConfig:
    path = s.get("path", str, None)
    resolved = None
    if path is not None:
        resolved = (base_dir / path).resolve()
        if not resolved.is_file():
            raise ConfigError(s.key("path"), f"file not found: {resolved}")
    kind = s.get("kind", str, "star")
    if kind not in ("star", "clique", "random"):
        raise ConfigError(s.key("kind"), f"unknown topology kind {kind!r}")
    t = s.section("trickle")
    tp = TrickleParams()
    trickle = _build(
        t.path,
        TrickleParams,
        t.get("i_min_s", _NUMBER, tp.i_min_s),
        t.get("i_doublings", int, tp.i_doublings),
        t.get("k", int, tp.k),
    )
    t.finish()
    cfg = TopologyConfig(
        path=resolved,
        kind=kind,
        edge_prob=s.get("edge_prob", _NUMBER, 0.3),
        link=_link(s.section("link")),
        gateway_node=s.get("gateway_node", str, "gateway"),
        trickle=trickle,
    )
    s.finish()
    return cfg


def _gateway(s: _Section) -> tuple[GatewayConfig, str]:
    p = s.section("policy")
    mode = _build(p.key("mode"), ForwardMode, p.get("mode", str, ForwardMode.SUMMARY_ONLY.value))
    policy = _build(p.path, ForwardPolicy, mode, p.get("alert_freq_floor_hz", _NUMBER, 0.0))
    p.finish()
    base = SignalParams()
    sig = s.section("signal")
    signal = SignalParams(
        threshold_deg=sig.get("threshold_deg", _NUMBER, base.threshold_deg),
        min_gap_s=sig.get("min_gap_s", _NUMBER, base.min_gap_s),
        window_s=sig.get("window_s", _NUMBER, base.window_s),
        hop_s=sig.get("hop_s", _NUMBER, base.hop_s),
        smooth_window_n=sig.get("smooth_window_n", int, base.smooth_window_n),
        clip_max_deg=sig.get("clip_max_deg", _NUMBER, base.clip_max_deg),
    )
    sig.finish()
    if signal.smooth_window_n < 1 or signal.smooth_window_n % 2 == 0:
        raise ConfigError(sig.key("smooth_window_n"), "must be odd and >= 1")
    capacity = s.get("capacity", int, 16)
    if capacity < 1:
        raise ConfigError(s.key("capacity"), "must be >= 1")
    cfg = GatewayConfig(
        capacity=capacity,
        policy=policy,
        reorder_window=s.get("reorder_window", int, 8),
        signal=signal,
        analysis_channel=_build(s.key("analysis_channel"), Channel, s.get("analysis_channel", str, "index")),
    )
    listen = s.get("listen", str, "127.0.0.1:0")
    s.finish()
    return cfg, listen


_POWER = {"pi": PI, "edison": EDISON}


def _bench(s: _Section) -> BenchConfig:
    scenarios = DEFAULT_SCENARIOS
    if s.has("scenarios"):
        scenarios = []
        for i, item in enumerate(s.get("scenarios", list)):
            sc = _Section(item, f"{s.key('scenarios')}[{i}]")
            name = sc.get("name", str)
            power = sc.get("power_mw", _NUMBER, None)
            model = PowerModel(name, power) if power is not None else _POWER.get(name)
            if model is None:
                raise ConfigError(sc.key("power_mw"), f"missing required key for custom scenario {name!r}")
            scenarios.append(
                _build(
                    sc.path,
                    BenchScenario,
                    name,
                    sc.get("service_time_s", _NUMBER),
                    model,
                    sc.get("interarrival_s", _NUMBER, 60.0),
                    sc.get("n_jobs", int, 200),
                    sc.get("arrival_dist", str, "deterministic"),
                    sc.get("service_dist", str, "deterministic"),
                )
            )
            sc.finish()
    n_list = s.get("n_datasets", list, [1, 2, 4, 8, 16])
    if not n_list or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in n_list):
        raise ConfigError(s.key("n_datasets"), "expected a nonempty list of integers >= 1")
    cfg = BenchConfig(tuple(scenarios), tuple(n_list), s.get("round_s", _NUMBER, 10.0))
    s.finish()
    return cfg


def build_config(doc: Any, base_dir: Path | str = ".") -> RunConfig:
    base_dir = Path(base_dir)
    root = _Section(doc, "")
    seed = root.get("seed", int)
    devices = _devices(root.section("devices"))
    topology = _topology(root.section("topology"), base_dir)
    gateway, listen = _gateway(root.section("gateway"))
    sink = root.section("sink")
    endpoint = sink.get("endpoint", str, "127.0.0.1:0")
    sink.finish()
    bench = _bench(root.section("bench"))
    rp = root.section("replay")
    replay_path = rp.get("path", str, None)
    if replay_path is not None:
        replay_path = (base_dir / replay_path).resolve()
        if not replay_path.is_file():
            raise ConfigError(rp.key("path"), f"file not found: {replay_path}")
    replay_device = rp.get("device_id", str, "trace-0")
    rp.finish()
    out = Path(root.get("output_dir", str, "out"))
    root.finish()
    return RunConfig(
        seed=seed,
        devices=devices,
        topology=topology,
        gateway=gateway,
        gateway_listen=listen,
        sink_endpoint=endpoint,
        bench=bench,
        replay_path=replay_path,
        replay_device_id=replay_device,
        output_dir=out if out.is_absolute() else (base_dir / out).resolve(),
    )


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: dict[str, str]) -> dict:
    """Set dotted ``key.path`` entries; values are parsed as JSON when possible."""
    for dotted, text in overrides.items():
        parts = dotted.split(".")
        node = doc
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(dotted, f"{p} is not an object")
            node = nxt
        node[parts[-1]] = _coerce(text)
    return doc


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if overrides:
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected an object")
        apply_overrides(doc, overrides)
    return build_config(doc, path.parent)
