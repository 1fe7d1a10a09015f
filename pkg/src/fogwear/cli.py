"""``fogwear`` command line: simulate, replay, bench, gateway, sink.

Every command takes ``--config PATH``; any ``--dotted.key=value`` flag
overrides the matching config key. Exit codes: 0 ok, 2 config error,
3 runtime error. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import socket
import socketserver
import struct
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

from . import mesh_net
from .bench_harness import run_bench
from .cloud_sink import CloudClient, CloudFrame, LongTermLog, encode_frame, serve, temporal_trend
from .config import RunConfig, parse_config
from .device_sim import GloveConfig, SamplePacket, decode_packet, encode_packet, packetize, replay_csv, synth_session
from .device_sim import default_protocol
from .errors import ConfigError, FogError, GapError, InsufficientDataError, RouteError
from .fog_gateway import FogGateway
from .signal_core import FlexSample

log = logging.getLogger("fogwear")

LOG_NAME = "longterm.jsonl"
REPORT_NAME = "run_report.json"
ROUNDS_CSV_NAME = "round_frequency.csv"
ROUNDS_CSV_HEADER = ("device_id", "session_id", "round", "t_center_s", "freq_hz")

COMMANDS = ("simulate", "gateway", "sink", "replay", "bench")


def build_topology(cfg: RunConfig, device_ids: Sequence[str]) -> mesh_net.TopologyGraph:
    t = cfg.topology
    gw = t.gateway_node
    if t.path is not None:
        topo = mesh_net.load_topology(t.path)
        missing = [n for n in (gw, *device_ids) if n not in topo.nodes]
        if missing:
            raise ConfigError("topology.path", f"topology lacks node(s) {', '.join(missing)}")
        return topo
    if t.kind == "star":
        return mesh_net.star(gw, device_ids, t.link)
    names = [gw, *device_ids]
    if t.kind == "clique":
        return mesh_net.TopologyGraph.build(names, [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]], t.link)
    return mesh_net.random_connected(len(names), t.edge_prob, cfg.module_seed("mesh_net/topology"), t.link, names=names)


def _send_over_mesh(
    topo: mesh_net.TopologyGraph,
    route: list[str],
    packets: Iterable[SamplePacket],
    gateway: FogGateway,
    rng: random.Random,
    max_retries: int,
) -> dict:
    """Deliver packets hop by hop with bounded retransmission, then ingest."""
    sent = delivered = retries = 0
    latency = 0.0
    gaps = 0
    for p in packets:
        sent += 1
        bits = 8 * len(encode_packet(p))
        for attempt in range(max_retries + 1):
            outcome = mesh_net.deliver_data(topo, route, bits, rng)
            latency += outcome.latency_s
            if outcome.delivered:
                delivered += 1
                try:
                    gateway.ingest_packet(p)
                except GapError as exc:
                    gaps += 1
                    log.warning("%s", exc)
                break
            retries += 1
    return {
        "packets_sent": sent,
        "packets_delivered": delivered,
        "retransmissions": retries,
        "gap_errors": gaps,
        "link_time_s": latency,
        "hops": len(route) - 1,
    }


def _fresh_log(out: Path) -> LongTermLog:
    path = out / LOG_NAME
    if path.exists():
        path.unlink()
    return LongTermLog(path)


def run_pipeline(cfg: RunConfig, streams: dict[str, list[FlexSample]], command: str) -> dict:
    """Devices -> mesh -> gateway -> cloud sink, writing the three run artifacts."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    device_ids = sorted(streams)
    topo = build_topology(cfg, device_ids)
    gw_node = cfg.topology.gateway_node
    trickle = cfg.topology.trickle
    diss = mesh_net.simulate_dissemination(topo, trickle, gw_node, 10 * trickle.i_max_s, cfg.module_seed("mesh_net/trickle"))

    gateway = FogGateway(cfg.gateway)
    routes = {}
    for dev in device_ids:
        route = topo.shortest_path(dev, gw_node)
        if route is None:
            raise RouteError(f"no route from {dev} to {gw_node}")
        routes[dev] = route

    def feed(dev: str) -> dict:
        packets = packetize(streams[dev], dev, cfg.devices.batch_n)
        rng = random.Random(cfg.module_seed(f"mesh_net/{dev}"))
        return _send_over_mesh(topo, routes[dev], packets, gateway, rng, cfg.devices.max_retries)

    with ThreadPoolExecutor(max_workers=min(8, len(device_ids)) or 1) as pool:
        link_stats = dict(zip(device_ids, pool.map(feed, device_ids)))

    protocol = cfg.devices.protocol
    log_ = _fresh_log(out)
    device_reports = []
    rows = []
    forwarded_total = raw_total = 0
    with serve(cfg.sink_endpoint, log_) as sink, CloudClient(sink.address) as client:
        for dev in device_ids:
            sid = gateway.open_session_id(dev)
            raw = gateway.session(sid).raw_bytes_received
            summary = gateway.close_session(sid, protocol)
            rec = gateway.session(sid)
            frames = gateway.forward(summary)
            sent_bytes = 0
            for frame in frames:
                ack = client.send(frame)
                if ack.seq != frame.seq or "error" in ack.payload:
                    raise FogError(f"sink rejected frame {frame.seq}: {ack.payload.get('error')}")
                sent_bytes += len(encode_frame(frame))
            forwarded_total += sent_bytes
            raw_total += raw
            for rnd, prof in zip(protocol.rounds, rec.profiles):
                rows.extend((dev, sid, rnd.label, c, f) for c, f in prof.points)
            device_reports.append(
                {
                    "device_id": dev,
                    "session_id": sid,
                    "link": link_stats[dev],
                    "raw_bytes": raw,
                    "forwarded_bytes": sent_bytes,
                    "flagged": rec.flagged,
                    "summary": summary.to_payload(),
                }
            )
    trends = {}
    for dev in device_ids:
        try:
            tr = temporal_trend(log_, dev)
            trends[dev] = {"n_sessions": tr.n_sessions, "slope_hz_per_session": tr.slope_hz_per_session, "mean_freq_hz": tr.mean_freq_hz}
        except InsufficientDataError:
            trends[dev] = None

    with open(out / ROUNDS_CSV_NAME, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_CSV_HEADER)
        w.writerows(rows)

    report = {
        "command": command,
        "seed": cfg.seed,
        "policy": cfg.gateway.policy.mode.value,
        "dissemination": {
            "coverage": diss.coverage,
            "tx_total": diss.tx_total,
            "convergence_time_s": diss.convergence_time_s,
        },
        "devices": device_reports,
        "bandwidth": {
            "raw_bytes": raw_total,
            "forwarded_bytes": forwarded_total,
            "ratio": forwarded_total / raw_total if raw_total else None,
        },
        "cloud": {"records": log_.count, "trends": trends},
    }
    (out / REPORT_NAME).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def cmd_simulate(cfg: RunConfig, args) -> dict:
    streams = {}
    for dev in cfg.devices.ids:
        glove = GloveConfig(
            sample_rate_hz=cfg.devices.glove.sample_rate_hz,
            amplitude_deg=cfg.devices.glove.amplitude_deg,
            noise_std_deg=cfg.devices.glove.noise_std_deg,
            spec=cfg.devices.glove.spec,
            seed=cfg.module_seed(f"device_sim/{dev}"),
            channels=cfg.devices.glove.channels,
            thumb_ratio=cfg.devices.glove.thumb_ratio,
        )
        streams[dev] = synth_session(cfg.devices.protocol, glove)
    return run_pipeline(cfg, streams, "simulate")


def cmd_replay(cfg: RunConfig, args) -> dict:
    path = Path(args.trace).resolve() if args.trace else cfg.replay_path
    if path is None:
        raise ConfigError("replay.path", "missing required key (or pass --trace)")
    if not path.is_file():
        raise ConfigError("replay.path", f"file not found: {path}")
    return run_pipeline(cfg, {cfg.replay_device_id: list(replay_csv(path))}, "replay")


def cmd_bench(cfg: RunConfig, args) -> dict:
    return run_bench(
        cfg.output_dir,
        cfg.module_seed("bench_harness"),
        cfg.bench.scenarios,
        cfg.bench.n_datasets,
        protocol=default_protocol(cfg.bench.round_s),
    )


def _announce(kind: str, address) -> None:
    print(json.dumps({"status": "listening", "service": kind, "host": address[0], "port": address[1]}), flush=True)


def _wait(serve_for: float) -> None:
    try:
        if serve_for > 0:
            time.sleep(serve_for)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass


def cmd_sink(cfg: RunConfig, args) -> dict:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    log_ = LongTermLog(cfg.output_dir / LOG_NAME)
    with serve(cfg.sink_endpoint, log_) as sink:
        _announce("sink", sink.address)
        _wait(args.serve_for)
    return {"records": log_.count}


class _GatewayHandler(socketserver.BaseRequestHandler):
    """Length-prefixed packet stream; an empty frame ends the device's session.

    Each packet gets an ack frame whose seq is the gateway's next expected
    packet seq. End of stream is answered with the summary payload.
    """

    def handle(self):
        svc: GatewayService = self.server.svc  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        device = None
        while True:
            head = sock.recv(4, socket.MSG_WAITALL)
            if len(head) < 4:
                return
            (n,) = struct.unpack(">I", head)
            if n == 0:
                if device is None:
                    return
                summary = svc.finish(device)
                sock.sendall(encode_frame(CloudFrame("ack", summary.session_id, 0, {"summary": summary.to_payload()})))
                return
            body = sock.recv(n, socket.MSG_WAITALL)
            try:
                packet = decode_packet(body)
                device = packet.device_id
                ack = svc.gateway.ingest_packet(packet)
                reply = CloudFrame("ack", svc.gateway.open_session_id(device), ack.next_seq, {"accepted": ack.accepted})
            except FogError as exc:
                reply = CloudFrame("ack", "", 0, {"error": str(exc)})
            sock.sendall(encode_frame(reply))


class GatewayService:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.gateway = FogGateway(cfg.gateway)
        self._lock = threading.Lock()
        host, _, port = cfg.gateway_listen.rpartition(":")
        server = socketserver.ThreadingTCPServer((host, int(port)), _GatewayHandler)
        server.daemon_threads = True
        server.svc = self  # type: ignore[attr-defined]
        self.server = server

    def finish(self, device_id: str):
        sid = self.gateway.open_session_id(device_id)
        summary = self.gateway.close_session(sid, self.cfg.devices.protocol)
        frames = self.gateway.forward(summary)
        with self._lock, CloudClient(self.cfg.sink_endpoint) as client:
            for f in frames:
                client.send(f)
        return summary


def cmd_gateway(cfg: RunConfig, args) -> dict:
    svc = GatewayService(cfg)
    t = threading.Thread(target=svc.server.serve_forever, daemon=True)
    t.start()
    _announce("gateway", svc.server.server_address)
    _wait(args.serve_for)
    svc.server.shutdown()
    svc.server.server_close()
    return {"sessions": len(svc.gateway.store)}


HANDLERS = {
    "simulate": cmd_simulate,
    "replay": cmd_replay,
    "bench": cmd_bench,
    "sink": cmd_sink,
    "gateway": cmd_gateway,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogwear", description="Fog-assisted wearable telemetry pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--trace", help="CSV trace for `replay` (overrides replay.path)")
    p.add_argument("--serve-for", type=float, default=0.0, help="seconds to run gateway/sink (0 = until interrupted)")
    return p


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(item, "unrecognized argument; overrides look like --key.path=value")
        key, _, value = item[2:].partition("=")
        out[key] = value
    return out


def _fail(exc: BaseException, code: int) -> int:
    line = {"status": "error", "code": code, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg = parse_config(args.config, _split_overrides(extra))
    except ConfigError as exc:
        return _fail(exc, 2)
    try:
        result = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (FogError, OSError, ValueError) as exc:
        return _fail(exc, 3)
    print(json.dumps({"status": "ok", "command": args.command, "output_dir": str(cfg.output_dir)}))
    log.debug("result: %s", result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
