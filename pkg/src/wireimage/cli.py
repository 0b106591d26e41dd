"""Command-line frontend: serve, campaign, analyze, probe, lab.

Every option can also come from a JSON config file (``--config``) holding one
object per subcommand, e.g. ``{"campaign": {"ports": [53, 443], "pairs": 5}}``;
flags given on the command line win over the file.

Exit codes: 0 success, 1 lab checks failed, 2 configuration error,
3 missing privileges, 4 runtime failure, 130 interrupted.

CSV outputs of ``analyze`` (all written to ``--out-dir``):

``matrix.csv``   src, dst, conn_bias, median_tp_bias, median_rtt_bias, n_pairs
``grouped.csv``  dimension, threshold, side, n_flows, median_bias
``cdf.csv``      metric, value, fraction
``ports.csv``    port, tuples, blocked, blocked_pct
``probes.csv``   target, protocol, port, packet_size, initial_ttl, outcome, count

Each CSV has a JSON twin; ``matrix.json`` also carries the full grids.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import signal
import sys
import threading
from collections import Counter
from pathlib import Path
from typing import Sequence

from . import __version__, flowpair, metrics, prober, tunnel
from .capture import Sniffer, flow_loss, port_filter, read_pcap, write_pcap
from .pathlab import EmulatedPairTransport, ImpairmentProfile, load_profile
from .pathlab.harness import SCENARIOS, harness_run
from .pathlab.probes import EmulatedProbeNetwork
from .pathlab.profile import ProfileError
from .results import ReadStats, ResultWriter, RunManifest, iter_records

log = logging.getLogger("wireimage")

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_PRIVILEGE = 3
EXIT_RUNTIME = 4
EXIT_INTERRUPTED = 130


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG) -> None:
        super().__init__(message)
        self.code = code


# --- value parsing -----------------------------------------------------------

def int_list(value) -> tuple[int, ...]:
    """``"53,443"`` or ``[53, 443]`` -> (53, 443)."""
    if isinstance(value, int):
        return (value,)
    items = value.split(",") if isinstance(value, str) else list(value)
    try:
        out = tuple(int(str(x).strip()) for x in items if str(x).strip())
    except ValueError:
        raise CliError(f"expected a comma-separated list of integers, got {value!r}") from None
    if not out:
        raise CliError("empty list")
    return out


def str_list(value) -> list[str]:
    items = value.split(",") if isinstance(value, str) else list(value)
    return [str(x).strip() for x in items if str(x).strip()]


def pair_counts(value, sizes: Sequence[int] | None) -> dict[int, int]:
    """``--pairs``: one count for every size (``"5"``) or per size (``"1:20,300:10"``)."""
    if value is None:
        base = dict(flowpair.DEFAULT_PAIRS)
        return {s: base.get(s, 10) for s in sizes} if sizes else base
    if isinstance(value, dict):
        counts = {int(k): int(v) for k, v in value.items()}
    elif isinstance(value, int) or (isinstance(value, str) and ":" not in value):
        n = int(value)
        counts = {s: n for s in (sizes or flowpair.DEFAULT_SIZES)}
    else:
        counts = {}
        for item in str_list(value):
            k, _, v = item.partition(":")
            try:
                counts[int(k)] = int(v)
            except ValueError:
                raise CliError(f"bad --pairs entry {item!r} (want SIZE:COUNT)") from None
    if sizes:
        missing = set(sizes) - set(counts)
        if missing:
            raise CliError(f"--pairs gives no count for sizes {sorted(missing)}")
        counts = {s: counts[s] for s in sizes}
    return counts


def emulated_profile(value: str) -> ImpairmentProfile:
    if value in ("", "none", "neutral"):
        return ImpairmentProfile()
    try:
        return load_profile(value)
    except FileNotFoundError:
        raise CliError(f"profile file not found: {value}") from None
    except ProfileError as exc:
        raise CliError(f"bad profile {value}: {exc}") from None


def port_subnet(port: int) -> str:
    """Inner /24 used by the tunnel that carries ``port``: 10.<hi>.<lo>.0."""
    return f"10.{port >> 8}.{port & 0xFF}"


def tunnel_configs(local: str, peer: str, ports: Sequence[int], role: str,
                   mtu: int = 1500) -> list[tunnel.TunnelConfig]:
    """One tunnel per port whose outer UDP port equals that port on both sides.

    The client takes ``.1`` and the server ``.2`` in :func:`port_subnet`.
    """
    host = 1 if role == "client" else 2
    return [tunnel.TunnelConfig(local, peer, p, virtual_if_name=f"wi{p}", interface_mtu=mtu,
                                tun_addr=f"{port_subnet(p)}.{host}/24") for p in ports]


class TunnelSet:
    """Endpoints plus their datapath threads."""

    def __init__(self, configs: Sequence[tunnel.TunnelConfig]) -> None:
        self.endpoints: list[tunnel.TunnelEndpoint] = []
        self.threads: list[threading.Thread] = []
        try:
            for cfg in configs:
                self.endpoints.append(tunnel.create_endpoint(cfg))
        except BaseException:
            self.close()
            raise
        for ep in self.endpoints:
            t = threading.Thread(target=self._run, args=(ep,), daemon=True,
                                 name=f"tunnel-{ep.config.udp_port}")
            t.start()
            self.threads.append(t)

    @staticmethod
    def _run(ep: tunnel.TunnelEndpoint) -> None:
        try:
            tunnel.run_datapath(ep)
        except tunnel.InterfaceGoneError as exc:
            log.error("tunnel on port %d stopped: %s", ep.config.udp_port, exc)

    def counters(self) -> dict:
        return {str(ep.config.udp_port): ep.snapshot() for ep in self.endpoints}

    def close(self) -> None:
        for ep in self.endpoints:
            ep.shutdown()
        for t in self.threads:
            t.join(2.0)
        for ep in self.endpoints:
            ep.close()


def _manifest(args: argparse.Namespace, seeds: dict | None = None) -> RunManifest:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(config=json.loads(json.dumps(cfg, default=str)), seeds=seeds or {})


def _install_stop(stop: threading.Event) -> None:
    if threading.current_thread() is not threading.main_thread():
        return
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())


# --- serve -------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    ports = int_list(args.ports)
    listen = flowpair.ListenConfig(tuple(str_list(args.listen)), ports,
                                   max_payload=args.max_payload, idle_timeout=args.idle_timeout)
    tunnels = sniffer = None
    stop = threading.Event()
    try:
        server = flowpair.FlowServer(listen).start()
    except tunnel.PortInUseError as exc:
        raise CliError(f"cannot listen: {exc}", EXIT_RUNTIME) from None
    except PermissionError as exc:
        raise CliError(f"cannot listen: {exc}", EXIT_PRIVILEGE) from None
    try:
        if args.tunnel_peer:
            local = args.tunnel_local or prober.source_address_for(args.tunnel_peer)
            tunnels = TunnelSet(tunnel_configs(local, args.tunnel_peer, ports, "server", args.mtu))
        if args.capture:
            sniffer = Sniffer(port_filter(ports)).start()
        _install_stop(stop)
        print(f"serving on {', '.join(listen.addresses)} ports {','.join(map(str, ports))}"
              + (f", tunnels to {args.tunnel_peer}" if tunnels else ""), file=sys.stderr, flush=True)
        stop.wait(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        if tunnels:
            print(json.dumps({"tunnels": tunnels.counters()}), file=sys.stderr)
            tunnels.close()
        if sniffer:
            n = write_pcap(args.capture, sniffer.stop())
            log.info("wrote %d packets to %s", n, args.capture)
    print(json.dumps({"server": server.stats.snapshot()}), file=sys.stderr)
    return EXIT_OK


# --- campaign ----------------------------------------------------------------

def _destinations(args: argparse.Namespace) -> list[str]:
    dests = str_list(args.destinations or [])
    if args.targets_file:
        try:
            text = Path(args.targets_file).read_text()
        except OSError as exc:
            raise CliError(f"cannot read targets: {exc}") from None
        dests += [addr for addr, _ in prober.parse_targets(text)]
    if not dests:
        raise CliError("no destinations given")
    return dests


def cmd_campaign(args: argparse.Namespace) -> int:
    dests = _destinations(args)
    sizes = int_list(args.sizes_iw) if args.sizes_iw is not None else None
    try:
        cfg = flowpair.CampaignConfig(
            destinations=dests, ports=int_list(args.ports), pairs_per_size=pair_counts(args.pairs, sizes),
            inter_pair_delay=args.delay, connect_timeout=args.connect_timeout)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    captured: list = []
    tunnels = sniffer = None
    if args.emulate is not None:
        transport = EmulatedPairTransport(emulated_profile(args.emulate), seed=args.seed,
                                          connect_timeout=args.connect_timeout,
                                          stall_timeout=args.stall_timeout,
                                          capture=bool(args.capture), source=args.source or "client")
    else:
        peers = dict(item.split("=", 1) for item in str_list(args.inner or []))
        if args.tunnel:
            if len(dests) != 1:
                raise CliError("--tunnel sets up tunnels to exactly one destination")
            local = args.tunnel_local or prober.source_address_for(dests[0])
            try:
                tunnels = TunnelSet(tunnel_configs(local, dests[0], cfg.ports, "client", args.mtu))
            except tunnel.PrivilegeError as exc:
                raise CliError(f"tunnel setup: {exc}", EXIT_PRIVILEGE) from None
            except tunnel.TunnelError as exc:
                raise CliError(f"tunnel setup: {exc}", EXIT_RUNTIME) from None
            peers.update({f"{dests[0]}:{p}": f"{port_subnet(p)}.2" for p in cfg.ports})
        if not peers:
            raise CliError("live campaigns need --tunnel or --inner DEST=ADDR (or use --emulate)")
        transport = flowpair.SocketPairTransport(peers, connect_timeout=args.connect_timeout,
                                                 stall_timeout=args.stall_timeout, source=args.source)
        if args.capture:
            try:
                sniffer = Sniffer(port_filter(cfg.ports)).start()
            except PermissionError as exc:
                if tunnels:
                    tunnels.close()
                raise CliError(f"capture needs CAP_NET_RAW: {exc}", EXIT_PRIVILEGE) from None

    writer = ResultWriter(args.out, _manifest(args, {"emulator": args.seed}))
    summary = flowpair.CampaignSummary()

    def sink(r: flowpair.PairResult) -> None:
        writer.append(r.to_dict())
        if args.capture and args.emulate is not None:
            captured.extend(transport.last_capture)
        log.info("%s:%d %d IW  tcp %s udp %s  tp_bias %s", r.spec.destination, r.spec.port,
                 r.spec.size_iw, r.tcp.failure_reason.value, r.udp.failure_reason.value, r.tp_bias)

    code = EXIT_OK
    try:
        flowpair.run_campaign(cfg, transport, sink, summary)
    except KeyboardInterrupt:
        log.warning("interrupted after %d pairs; %s holds a valid prefix", summary.pairs, args.out)
        code = EXIT_INTERRUPTED
    except OSError as exc:
        log.error("campaign failed: %s", exc)
        code = EXIT_RUNTIME
    finally:
        writer.close()
        if sniffer:
            captured = sniffer.stop()
        if tunnels:
            tunnels.close()
        if args.capture:
            write_pcap(args.capture, captured)
    print(json.dumps({"pairs": summary.pairs, "both_ok": summary.both_ok, "tcp_only": summary.tcp_only,
                      "udp_only": summary.udp_only, "both_failed": summary.both_failed,
                      "skipped": summary.skipped, "out": str(args.out)}), file=sys.stderr)
    return code


# --- analyze -----------------------------------------------------------------

MATRIX_COLUMNS = ["src", "dst", "conn_bias", "median_tp_bias", "median_rtt_bias", "n_pairs"]
GROUPED_COLUMNS = ["dimension", "threshold", "side", "n_flows", "median_bias"]
CDF_COLUMNS = ["metric", "value", "fraction"]
PORT_COLUMNS = ["port", "tuples", "blocked", "blocked_pct"]
PROBE_COLUMNS = ["target", "protocol", "port", "packet_size", "initial_ttl", "outcome", "count"]


def fill_loss(pairs: list[flowpair.PairResult], captured, sender_addr: str) -> list[flowpair.PairResult]:
    """Set missing loss_pct values from a capture taken at the data sender."""
    out = []
    for r in pairs:
        if r.src_port is not None:
            tcp, udp = r.tcp, r.udp
            for name, tunneled in (("tcp", False), ("udp", True)):
                flow = getattr(r, name)
                if flow.loss_pct is None:
                    loss = flow_loss(captured, sender_addr, r.spec.port, r.src_port, tunneled=tunneled)
                    if name == "tcp":
                        tcp = dataclasses.replace(flow, loss_pct=loss)
                    else:
                        udp = dataclasses.replace(flow, loss_pct=loss)
            r = dataclasses.replace(r, tcp=tcp, udp=udp)
        out.append(r)
    return out


def analyze(records: list[dict], *, regions: dict | None = None, region_order=None,
            tp_threshold: float = 200.0, rtt_threshold: float = 50.0,
            pairs: list[flowpair.PairResult] | None = None) -> dict:
    """All analysis tables from parsed records, as ``{name: (columns, rows, extra)}``."""
    if pairs is None:
        pairs = flowpair.pairs_from_records(r for r in records if r.get("kind") == "pair")
    matrix = metrics.aggregate_matrix(pairs, regions, region_order)
    grouped = [dataclasses.asdict(g) for g in metrics.split_summary(pairs, tp_threshold, rtt_threshold)]
    ok = [r for r in pairs if r.tp_bias is not None and r.rtt_bias is not None]
    cdf_rows = []
    for name, values in (("tp_bias", [r.tp_bias for r in ok]), ("rtt_bias", [r.rtt_bias for r in ok])):
        cdf_rows += [{"metric": name, "value": v, "fraction": f} for v, f in metrics.export_cdf(values)]
    ports = list(metrics.blocked_by_port(pairs).values())
    probes = Counter()
    for r in records:
        if r.get("kind") == "probe":
            probes[tuple(r.get(k) for k in PROBE_COLUMNS[:-1])] += 1
    probe_rows = [dict(zip(PROBE_COLUMNS, k + (n,))) for k, n in sorted(probes.items(), key=str)]
    grids = {m: matrix.grid(m) for m in ("conn_bias", "median_tp_bias", "median_rtt_bias", "n_pairs")}
    return {
        "matrix": (MATRIX_COLUMNS, matrix.rows(), {"nodes": matrix.nodes, "grids": grids}),
        "grouped": (GROUPED_COLUMNS, grouped, {}),
        "cdf": (CDF_COLUMNS, cdf_rows, {}),
        "ports": (PORT_COLUMNS, ports, {}),
        "probes": (PROBE_COLUMNS, probe_rows, {}),
    }


def cmd_analyze(args: argparse.Namespace) -> int:
    stats = ReadStats()
    records: list[dict] = []
    for path in args.inputs:
        try:
            records.extend(iter_records(path, stats))
        except FileNotFoundError:
            raise CliError(f"no such result file: {path}") from None
    regions = None
    if args.regions:
        try:
            regions = json.loads(Path(args.regions).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"bad --regions file: {exc}") from None
    pairs = []
    for r in records:
        if r.get("kind") != "pair":
            continue
        try:
            pairs.append(flowpair.PairResult.from_dict(r))
        except (KeyError, TypeError, ValueError) as exc:
            stats.malformed += 1
            log.warning("skipping malformed pair record %s: %s", r.get("pair_id"), exc)
    if args.pcap:
        if not args.pcap_addr:
            raise CliError("--pcap needs --pcap-addr (the data sender's address)")
        pairs = fill_loss(pairs, read_pcap(args.pcap), args.pcap_addr)
    tables = analyze(records, regions=regions, region_order=str_list(args.region_order or []) or None,
                     tp_threshold=args.tp_threshold, rtt_threshold=args.rtt_threshold, pairs=pairs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (columns, rows, extra) in tables.items():
        (out / f"{name}.csv").write_text(metrics.to_csv(rows, columns))
        (out / f"{name}.json").write_text(json.dumps({"rows": rows, **extra}, indent=1, default=str))
    print(f"analyzed {stats.lines} lines: {stats.records} records, {len(pairs)} pairs, "
          f"{stats.manifests} manifests, {stats.malformed} malformed (skipped) -> {out}",
          file=sys.stderr)
    return EXIT_OK


# --- probe -------------------------------------------------------------------

def cmd_probe(args: argparse.Namespace) -> int:
    try:
        targets = prober.parse_targets("\n".join(str_list(args.targets or [])))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.targets_file:
        try:
            targets += prober.parse_targets(Path(args.targets_file).read_text())
        except OSError as exc:
            raise CliError(f"cannot read targets: {exc}") from None
    if not targets:
        raise CliError("no probe targets given")
    protocols = str_list(args.protocols)
    sizes = int_list(args.sizes) if args.sizes is not None else None
    if args.emulate is not None:
        transport = EmulatedProbeNetwork(emulated_profile(args.emulate), target=targets[0][0], seed=args.seed)
    else:
        try:
            transport = prober.RawSocketTransport(args.local_addr, targets[0][0])
        except prober.PrivilegeError as exc:
            raise CliError(str(exc), EXIT_PRIVILEGE) from None
    ports = {"udp": args.udp_port, "tcp": args.tcp_port}
    try:
        specs = [prober.ProbeSpec(t, proto, None if proto == "icmp" else port or ports[proto],
                                  initial_ttl=args.ttl, attempts=args.attempts, timeout=args.timeout)
                 for t, port in targets for proto in protocols]
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = ResultWriter(args.out, _manifest(args)) if args.out else None
    stop = threading.Event()
    _install_stop(stop)
    code = EXIT_OK

    def sink(r: prober.ProbeResult) -> None:
        if out:
            out.append(r.to_dict())
        else:
            print(json.dumps(r.to_dict()))

    try:
        if sizes is not None:
            for t, _ in targets:
                sweep = prober.mtu_sweep(t, transport, sizes, port=args.udp_port, attempts=args.attempts,
                                         ttl=args.ttl, timeout=args.timeout)
                print(f"{t}: size  udp   icmp  flag", file=sys.stderr)
                for row in sweep.rows:
                    flag = "UDP-FAIL/ICMP-PASS" if row.udp_fail_icmp_pass else \
                        "ICMP-FAIL/UDP-PASS" if row.icmp_fail_udp_pass else ""
                    print(f"{t}: {row.size:5d} {'ok' if row.udp_ok else 'fail':5s} "
                          f"{'ok' if row.icmp_ok else 'fail':5s} {flag}", file=sys.stderr)
                    sink(row.udp)
                    sink(row.icmp)
                    if out:
                        out.append({"target": t, **row.to_dict()})
        else:
            rounds = 1 if args.once else args.rounds
            prober.run_rounds(specs, transport, sink, rounds=rounds, interval=args.interval,
                              stop=None if args.emulate is not None else stop)
    except KeyboardInterrupt:
        code = EXIT_INTERRUPTED
    except OSError as exc:
        log.error("probing failed: %s", exc)
        code = EXIT_RUNTIME
    finally:
        if out:
            out.close()
        close = getattr(transport, "close", None)
        if close:
            close()
    return code


# --- lab ---------------------------------------------------------------------

def _param(item: str) -> tuple[str, object]:
    k, sep, v = item.partition("=")
    if not sep:
        raise CliError(f"bad --param {item!r} (want KEY=VALUE)")
    try:
        return k, json.loads(v)
    except ValueError:
        return k, v


def cmd_lab(args: argparse.Namespace) -> int:
    if args.list:
        for s in SCENARIOS.values():
            print(f"{s.name:20s} {s.workload:6s} {s.description}")
        return EXIT_OK
    names = list(SCENARIOS) if args.all else str_list(args.scenarios or [])
    if not names:
        raise CliError("no scenario given; available: " + ", ".join(SCENARIOS))
    unknown = [n for n in names if n not in SCENARIOS]
    if unknown:
        raise CliError(f"unknown scenario {', '.join(unknown)}; available: " + ", ".join(SCENARIOS))
    overrides = dict(_param(p) for p in args.param or [])
    writer = ResultWriter(args.out, _manifest(args, {"lab": args.seed})) if args.out else None
    passed = True
    try:
        for name in names:
            rep = harness_run(name, seed=args.seed, **overrides)
            print(rep.text(), flush=True)
            passed &= rep.passed
            if writer:
                writer.append(rep.to_dict())
                for p in rep.pairs:
                    writer.append({**p.to_dict(), "scenario": name})
                for r in rep.probes:
                    writer.append({**r.to_dict(), "scenario": name})
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    finally:
        if writer:
            writer.close()
    return EXIT_OK if passed else EXIT_CHECKS_FAILED


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with per-subcommand defaults")
    common.add_argument("--seed", type=int, default=0, help="seed for emulated paths (default 0)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="wireimage", description="Paired TCP / UDP-tunneled path measurements.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    ports = ",".join(map(str, flowpair.DEFAULT_PORTS))

    p = sub.add_parser("serve", parents=[common], help="flow server plus tunnel endpoints")
    p.add_argument("--listen", default="0.0.0.0", help="comma-separated listen addresses")
    p.add_argument("--ports", default=ports)
    p.add_argument("--max-payload", type=int, default=64 * 1024 * 1024)
    p.add_argument("--idle-timeout", type=float, default=30.0)
    p.add_argument("--tunnel-peer", help="client address to run per-port tunnels with")
    p.add_argument("--tunnel-local", help="outer source address (default: route to the peer)")
    p.add_argument("--mtu", type=int, default=1500, help="path MTU the tunnels must fit in")
    p.add_argument("--capture", help="write a pcap of measurement traffic here")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("campaign", parents=[common], help="run flow pairs against servers")
    p.add_argument("destinations", nargs="*")
    p.add_argument("--targets-file", help="one destination per line")
    p.add_argument("--ports", default=ports)
    p.add_argument("--sizes-iw", help="flow sizes in initial windows (default 1,3,30,300,1500)")
    p.add_argument("--pairs", help="pairs per size: N or SIZE:N,... (default 20 small, 10 large)")
    p.add_argument("--delay", type=float, default=1.0, help="seconds between pairs")
    p.add_argument("--connect-timeout", type=float, default=10.0)
    p.add_argument("--stall-timeout", type=float, default=30.0)
    p.add_argument("--out", required=True, help="JSONL result file")
    p.add_argument("--capture", help="write a pcap of measurement traffic here")
    p.add_argument("--emulate", metavar="PROFILE", help="run over the path emulator ('none' or a profile file)")
    p.add_argument("--tunnel", action="store_true", help="create per-port tunnels to the destination")
    p.add_argument("--tunnel-local", help="outer source address (default: route to the destination)")
    p.add_argument("--mtu", type=int, default=1500)
    p.add_argument("--inner", help="existing tunnels: DEST[:PORT]=INNER_ADDR,...")
    p.add_argument("--source", help="node name recorded with each pair (default hostname)")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("analyze", parents=[common], help="matrices, grouped medians, CDFs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", default="analysis")
    p.add_argument("--regions", help="JSON {node: region} used to order matrix rows")
    p.add_argument("--region-order", help="comma-separated region order")
    p.add_argument("--tp-threshold", type=float, default=200.0, help="kB/s")
    p.add_argument("--rtt-threshold", type=float, default=50.0, help="ms")
    p.add_argument("--pcap", help="sender-side capture to fill in missing loss values")
    p.add_argument("--pcap-addr", help="address of the host the capture was taken on")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("probe", parents=[common], help="TTL-limited UDP/TCP/ICMP probes")
    p.add_argument("targets", nargs="*")
    p.add_argument("--targets-file", help="ADDR[:PORT] per line")
    p.add_argument("--protocols", default="udp,tcp,icmp")
    p.add_argument("--ttl", type=int, default=prober.DEFAULT_TTL)
    p.add_argument("--sizes", help="MTU sweep payload sizes, e.g. 72,572,1454")
    p.add_argument("--once", action="store_true", help="a single round instead of daemon mode")
    p.add_argument("--rounds", type=int, help="stop after this many rounds")
    p.add_argument("--interval", type=float, default=prober.ROUND_INTERVAL)
    p.add_argument("--attempts", type=int, default=prober.ROUND_PACKETS)
    p.add_argument("--timeout", type=float, default=prober.DEFAULT_TIMEOUT)
    p.add_argument("--udp-port", type=int, default=prober.DEFAULT_PORTS["udp"])
    p.add_argument("--tcp-port", type=int, default=prober.DEFAULT_PORTS["tcp"])
    p.add_argument("--local-addr", help="source address (default: route to the first target)")
    p.add_argument("--out", help="JSONL result file (default: stdout)")
    p.add_argument("--emulate", metavar="PROFILE", help="probe an emulated path instead")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("lab", parents=[common], help="run emulator scenarios and check them")
    p.add_argument("scenarios", nargs="*")
    p.add_argument("--all", action="store_true")
    p.add_argument("--list", action="store_true")
    p.add_argument("--param", action="append", help="override a scenario parameter, KEY=JSON")
    p.add_argument("--out", help="JSONL file for reports and raw results")
    p.set_defaults(func=cmd_lab)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices
    for name, section in cfg.items():
        if name not in subs or not isinstance(section, dict):
            raise CliError(f"config: unknown section {name!r} (expected one of {', '.join(subs)})")
        valid = {a.dest for a in subs[name]._actions}
        bad = sorted(set(k.replace("-", "_") for k in section) - valid)
        if bad:
            raise CliError(f"config: unknown {name} options {bad}")
        subs[name].set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
    except CliError as exc:
        print(f"wireimage: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # argparse usage errors and --help
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"wireimage: {exc}", file=sys.stderr)
        return exc.code
    except (tunnel.ConfigError, ProfileError) as exc:
        print(f"wireimage: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tunnel.PrivilegeError, prober.PrivilegeError) as exc:
        print(f"wireimage: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except tunnel.TunnelError as exc:
        print(f"wireimage: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
