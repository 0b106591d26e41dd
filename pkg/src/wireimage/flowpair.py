"""Paired native-TCP / TCP-over-UDP flows, campaigns, the data server and the racer.

A pair is two unidirectional server-to-client transfers of the same size that
share their inner 4-tuple: one over native TCP, one over the tunnel.  How the
two flows are actually carried is up to a *pair transport*: live sockets
(:class:`SocketPairTransport`) or the in-process emulator
(:class:`wireimage.pathlab.EmulatedPairTransport`).  A transport provides::

    source: str                                   # vantage point label
    allocate_port() -> int                        # fresh source port per pair
    run_flows(spec, src_port) -> (tcp, udp)       # both FlowResults, run concurrently
    pause(seconds) -> None                        # inter-pair idle time

Wire protocol between client and server: the client sends the payload size
as 4 unsigned big-endian bytes right after connecting; the server answers with
exactly that many bytes and closes.
"""

from __future__ import annotations

import enum
import errno
import itertools
import logging
import socket
import socketserver
import struct
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Mapping, Protocol

from . import metrics
from .tunnel import PortInUseError

log = logging.getLogger(__name__)

DEFAULT_PORTS = (53, 443, 8008, 12345, 33435, 34567, 54321)
DEFAULT_PAIRS = {1: 20, 3: 20, 30: 20, 300: 10, 1500: 10}
DEFAULT_SIZES = tuple(DEFAULT_PAIRS)
DEFAULT_IW = 10
DEFAULT_MSS = 1432  # 1460 - 28 bytes of tunnel headers
REQUEST = struct.Struct("!I")

TCP = "native-tcp"
UDP = "udp-tunneled"


class FailureReason(str, enum.Enum):
    NONE = "none"
    CONNECT_TIMEOUT = "connect-timeout"
    RESET = "reset"
    STALL = "stall"


def flow_size_bytes(size_iw: int, iw_segments: int, mss: int) -> int:
    for name, v in (("size_iw", size_iw), ("iw_segments", iw_segments), ("mss", mss)):
        if not isinstance(v, int) or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return size_iw * iw_segments * mss


@dataclass(frozen=True)
class FlowSpec:
    destination: str
    port: int
    size_iw: int
    iw_segments: int = DEFAULT_IW
    mss: int = DEFAULT_MSS
    direction: str = "server-to-client"

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"invalid port {self.port}")
        flow_size_bytes(self.size_iw, self.iw_segments, self.mss)
        if self.direction != "server-to-client":
            raise ValueError("only server-to-client transfers are supported")

    @property
    def payload_bytes(self) -> int:
        return flow_size_bytes(self.size_iw, self.iw_segments, self.mss)

    def to_dict(self) -> dict:
        return {"destination": self.destination, "port": self.port, "size_iw": self.size_iw,
                "iw_segments": self.iw_segments, "mss": self.mss,
                "payload_bytes": self.payload_bytes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlowSpec":
        return cls(d["destination"], int(d["port"]), int(d["size_iw"]),
                   int(d.get("iw_segments", DEFAULT_IW)), int(d.get("mss", DEFAULT_MSS)))


@dataclass(frozen=True)
class FlowResult:
    """One measured transfer.

    ``duration`` runs from the start of the connection attempt to the last
    payload byte, so it includes the handshake.  ``throughput`` is kB/s
    (1 kB = 1000 bytes) and only set for successful flows.
    """

    success: bool
    bytes_transferred: int
    duration: float | None
    throughput: float | None
    initial_rtt: float | None  # ms
    loss_pct: float | None
    failure_reason: FailureReason = FailureReason.NONE
    start: float | None = None
    end: float | None = None

    @classmethod
    def completed(cls, nbytes: int, start: float, end: float, initial_rtt: float | None,
                  loss_pct: float | None = None) -> "FlowResult":
        duration = end - start
        return cls(True, nbytes, duration, nbytes / duration / 1000.0, initial_rtt,
                   loss_pct, FailureReason.NONE, start, end)

    @classmethod
    def failed(cls, reason: FailureReason, nbytes: int = 0, start: float | None = None,
               end: float | None = None, initial_rtt: float | None = None,
               loss_pct: float | None = None) -> "FlowResult":
        duration = end - start if start is not None and end is not None else None
        return cls(False, nbytes, duration, None, initial_rtt, loss_pct, reason, start, end)

    def to_dict(self) -> dict:
        return {"success": self.success, "bytes": self.bytes_transferred,
                "duration_s": self.duration, "throughput_kBps": self.throughput,
                "initial_rtt_ms": self.initial_rtt, "loss_pct": self.loss_pct,
                "failure_reason": self.failure_reason.value}

    @classmethod
    def from_dict(cls, d: Mapping, ts: Mapping | None = None) -> "FlowResult":
        ts = ts or {}
        return cls(bool(d["success"]), int(d["bytes"]), d.get("duration_s"),
                   d.get("throughput_kBps"), d.get("initial_rtt_ms"), d.get("loss_pct"),
                   FailureReason(d.get("failure_reason", "none")), ts.get("start"), ts.get("end"))


@dataclass(frozen=True)
class PairResult:
    pair_id: str
    spec: FlowSpec
    tcp: FlowResult
    udp: FlowResult
    tp_bias: float | None = None
    rtt_bias: float | None = None
    source: str = "local"
    src_port: int | None = None

    @property
    def both_succeeded(self) -> bool:
        return self.tcp.success and self.udp.success

    def to_dict(self) -> dict:
        return {
            "kind": "pair", "pair_id": self.pair_id, "source": self.source,
            "src_port": self.src_port, "spec": self.spec.to_dict(),
            "tcp": self.tcp.to_dict(), "udp": self.udp.to_dict(),
            "tp_bias": self.tp_bias, "rtt_bias": self.rtt_bias,
            "timestamps": {k: {"start": f.start, "end": f.end}
                           for k, f in (("tcp", self.tcp), ("udp", self.udp))},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PairResult":
        ts = d.get("timestamps") or {}
        return cls(str(d["pair_id"]), FlowSpec.from_dict(d["spec"]),
                   FlowResult.from_dict(d["tcp"], ts.get("tcp")),
                   FlowResult.from_dict(d["udp"], ts.get("udp")),
                   d.get("tp_bias"), d.get("rtt_bias"), d.get("source", "local"),
                   d.get("src_port"))


def make_pair(spec: FlowSpec, tcp: FlowResult, udp: FlowResult, *, source: str = "local",
              pair_id: str | None = None, src_port: int | None = None) -> PairResult:
    tp = rtt = None
    if tcp.success and udp.success:
        tp = metrics.tp_bias(udp.throughput, tcp.throughput)
        if tcp.initial_rtt and udp.initial_rtt:
            rtt = metrics.rtt_bias(tcp.initial_rtt, udp.initial_rtt)
    return PairResult(pair_id or uuid.uuid4().hex[:12], spec, tcp, udp, tp, rtt, source, src_port)


class PairTransport(Protocol):
    source: str

    def allocate_port(self) -> int: ...

    def run_flows(self, spec: FlowSpec, src_port: int) -> tuple[FlowResult, FlowResult]: ...

    def pause(self, seconds: float) -> None: ...


def run_pair(spec: FlowSpec, transport: PairTransport, *, pair_id: str | None = None) -> PairResult:
    """Run one native and one tunneled flow concurrently; returns once both ended."""
    src_port = transport.allocate_port()
    tcp, udp = transport.run_flows(spec, src_port)
    return make_pair(spec, tcp, udp, source=transport.source, pair_id=pair_id, src_port=src_port)


@dataclass
class CampaignConfig:
    destinations: list[str] = field(default_factory=list)
    ports: tuple[int, ...] = DEFAULT_PORTS
    pairs_per_size: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_PAIRS))
    inter_pair_delay: float = 1.0
    connect_timeout: float = 10.0
    iw_segments: int = DEFAULT_IW
    mss: int = DEFAULT_MSS
    max_dead_pairs: int = 3  # consecutive both-failed pairs before a (dst, port) is skipped

    def __post_init__(self) -> None:
        self.ports = tuple(int(p) for p in self.ports)
        for p in self.ports:
            if not 1 <= p <= 65535:
                raise ValueError(f"invalid port {p}")
        self.pairs_per_size = {int(k): int(v) for k, v in self.pairs_per_size.items()}
        for size, n in self.pairs_per_size.items():
            if size < 1 or n < 1:
                raise ValueError(f"invalid pair count {size}: {n}")
        if self.max_dead_pairs < 1:
            raise ValueError("max_dead_pairs must be >= 1")

    @property
    def pairs_per_destination_port(self) -> int:
        return sum(self.pairs_per_size.values())


@dataclass
class CampaignSummary:
    pairs: int = 0
    both_ok: int = 0
    tcp_only: int = 0
    udp_only: int = 0
    both_failed: int = 0
    skipped: list[tuple[str, int]] = field(default_factory=list)

    def add(self, r: PairResult) -> None:
        self.pairs += 1
        if r.tcp.success and r.udp.success:
            self.both_ok += 1
        elif r.tcp.success:
            self.tcp_only += 1
        elif r.udp.success:
            self.udp_only += 1
        else:
            self.both_failed += 1


def run_campaign(config: CampaignConfig, transport: PairTransport,
                 sink: Callable[[PairResult], None] | None = None,
                 summary: CampaignSummary | None = None) -> list[PairResult]:
    """Run every pair of the campaign sequentially, handing each to ``sink`` as it completes."""
    summary = summary if summary is not None else CampaignSummary()
    results: list[PairResult] = []
    first = True
    for dst in config.destinations:
        for port in config.ports:
            dead = 0
            for size, count in config.pairs_per_size.items():
                if dead >= config.max_dead_pairs:
                    break
                for _ in range(count):
                    if not first and config.inter_pair_delay > 0:
                        transport.pause(config.inter_pair_delay)
                    first = False
                    spec = FlowSpec(dst, port, size, config.iw_segments, config.mss)
                    r = run_pair(spec, transport)
                    results.append(r)
                    summary.add(r)
                    if sink is not None:
                        sink(r)
                    dead = dead + 1 if not (r.tcp.success or r.udp.success) else 0
                    if dead >= config.max_dead_pairs:
                        log.warning("%s port %d unreachable after %d attempts, skipping",
                                    dst, port, dead)
                        summary.skipped.append((dst, port))
                        break
    log.info("campaign done: %d pairs (%d both ok, %d tcp only, %d udp only, %d both failed)",
             summary.pairs, summary.both_ok, summary.tcp_only, summary.udp_only,
             summary.both_failed)
    return results


# --- data server -------------------------------------------------------------

@dataclass(frozen=True)
class ListenConfig:
    addresses: tuple[str, ...] = ("0.0.0.0",)
    ports: tuple[int, ...] = DEFAULT_PORTS
    max_payload: int = 64 * 1024 * 1024
    idle_timeout: float = 30.0
    chunk: int = 64 * 1024


@dataclass
class ServerStats:
    connections: int = 0
    served: int = 0
    bytes_sent: int = 0
    malformed: int = 0
    rejected: int = 0
    errors: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, **kw: int) -> None:
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict:
        with self._lock:
            return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        cfg: ListenConfig = self.server.listen_config
        stats: ServerStats = self.server.stats
        sock: socket.socket = self.request
        stats.bump(connections=1)
        sock.settimeout(cfg.idle_timeout)
        try:
            header = _recv_exact(sock, REQUEST.size)
        except OSError:
            header = None
        if header is None:
            stats.bump(malformed=1)
            return
        (size,) = REQUEST.unpack(header)
        if size > cfg.max_payload:
            stats.bump(rejected=1)
            return
        zeros = bytes(min(cfg.chunk, size))
        sent = 0
        try:
            while sent < size:
                n = min(len(zeros), size - sent)
                sock.sendall(zeros[:n])
                sent += n
            sock.shutdown(socket.SHUT_WR)
        except OSError as exc:
            log.debug("send to %s failed: %s", self.client_address, exc)
            stats.bump(errors=1, bytes_sent=sent)
            return
        stats.bump(served=1, bytes_sent=sent)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _TCP6Server(_TCPServer):
    address_family = socket.AF_INET6


class FlowServer:
    """Serves sized payloads on every (address, port) of a :class:`ListenConfig`."""

    def __init__(self, config: ListenConfig) -> None:
        self.config = config
        self.stats = ServerStats()
        self._servers: list[_TCPServer] = []
        self._threads: list[threading.Thread] = []
        self._stopped = threading.Event()

    @property
    def bound(self) -> list[tuple[str, int]]:
        return [s.server_address[:2] for s in self._servers]

    def start(self) -> "FlowServer":
        try:
            for addr, port in itertools.product(self.config.addresses, self.config.ports):
                cls = _TCP6Server if ":" in addr else _TCPServer
                try:
                    srv = cls((addr, port), _Handler)
                except OSError as exc:
                    if exc.errno == errno.EADDRINUSE:
                        raise PortInUseError(f"TCP port {port} on {addr} is already in use") from None
                    raise
                srv.listen_config = self.config
                srv.stats = self.stats
                self._servers.append(srv)
        except BaseException:
            self.shutdown()
            raise
        for srv in self._servers:
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.1},
                                 daemon=True, name=f"flowserver-{srv.server_address[1]}")
            t.start()
            self._threads.append(t)
        return self

    def wait(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)

    def shutdown(self) -> None:
        for srv in self._servers:
            if self._threads:
                srv.shutdown()
            srv.server_close()
        self._servers.clear()
        self._threads.clear()
        self._stopped.set()

    def __enter__(self) -> "FlowServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(config: ListenConfig, stop: threading.Event | None = None) -> ServerStats:
    """Run a :class:`FlowServer` until ``stop`` is set."""
    server = FlowServer(config).start()
    try:
        (stop or threading.Event()).wait()
    finally:
        server.shutdown()
    return server.stats


# --- live sockets ------------------------------------------------------------

def _family(addr: str) -> int:
    return socket.AF_INET6 if ":" in addr else socket.AF_INET


def live_flow(dst: str, port: int, size: int, *, bind_addr: str = "", src_port: int = 0,
              connect_timeout: float = 10.0, stall_timeout: float = 30.0) -> FlowResult:
    """One client transfer over a kernel TCP socket.

    The initial RTT is the duration of ``connect()``, which returns when the
    SYN+ACK arrives.  Loss needs a packet capture and is left unset.
    """
    sock = socket.socket(_family(dst), socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    start = time.time()
    t0 = time.perf_counter()

    def wall() -> float:
        return start + (time.perf_counter() - t0)

    try:
        if bind_addr or src_port:
            sock.bind((bind_addr, src_port))
        sock.settimeout(connect_timeout)
        try:
            sock.connect((dst, port))
        except socket.timeout:
            return FlowResult.failed(FailureReason.CONNECT_TIMEOUT, start=start, end=wall())
        except (ConnectionRefusedError, ConnectionResetError):
            return FlowResult.failed(FailureReason.RESET, start=start, end=wall())
        except OSError as exc:
            log.debug("connect to %s:%d failed: %s", dst, port, exc)
            return FlowResult.failed(FailureReason.CONNECT_TIMEOUT, start=start, end=wall())
        rtt = (time.perf_counter() - t0) * 1000.0
        received = 0
        buf = bytearray(256 * 1024)
        sock.settimeout(stall_timeout)
        try:
            sock.sendall(REQUEST.pack(size))
            while True:
                n = sock.recv_into(buf)
                if n == 0:
                    break
                received += n
        except socket.timeout:
            return FlowResult.failed(FailureReason.STALL, received, start, wall(), rtt)
        except OSError:
            return FlowResult.failed(FailureReason.RESET, received, start, wall(), rtt)
        end = wall()
        if received != size:
            return FlowResult.failed(FailureReason.RESET, received, start, end, rtt)
        return FlowResult.completed(received, start, end, rtt)
    finally:
        sock.close()


def inner_address(peers: Mapping[str, str], destination: str, port: int) -> str:
    """Inner tunnel address of ``destination``; ``"dest:port"`` keys take precedence."""
    for key in (f"{destination}:{port}", destination):
        if key in peers:
            return peers[key]
    raise KeyError(f"no tunnel address configured for {destination} port {port}")


class SocketPairTransport:
    """Runs pairs over kernel sockets.

    The native flow connects to the destination itself; the tunneled flow
    connects to the destination's inner tunnel address (``tunnel_peers``),
    bound to ``tunnel_bind`` (the local tun address) and the same source
    port, so the traffic is routed through the tun device.
    """

    def __init__(self, tunnel_peers: Mapping[str, str], *, native_bind: str = "",
                 tunnel_bind: str = "", connect_timeout: float = 10.0,
                 stall_timeout: float = 30.0, source: str | None = None) -> None:
        self.tunnel_peers = dict(tunnel_peers)
        self.native_bind = native_bind
        self.tunnel_bind = tunnel_bind
        self.connect_timeout = connect_timeout
        self.stall_timeout = stall_timeout
        self.source = source or socket.gethostname()

    def allocate_port(self) -> int:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.bind((self.native_bind, 0))
            return s.getsockname()[1]

    def pause(self, seconds: float) -> None:
        time.sleep(seconds)

    def run_flows(self, spec: FlowSpec, src_port: int) -> tuple[FlowResult, FlowResult]:
        inner = inner_address(self.tunnel_peers, spec.destination, spec.port)
        kw = dict(src_port=src_port, connect_timeout=self.connect_timeout,
                  stall_timeout=self.stall_timeout)
        with ThreadPoolExecutor(2) as pool:
            f_tcp = pool.submit(live_flow, spec.destination, spec.port, spec.payload_bytes,
                                bind_addr=self.native_bind, **kw)
            f_udp = pool.submit(live_flow, inner, spec.port, spec.payload_bytes,
                                bind_addr=self.tunnel_bind, **kw)
            return f_tcp.result(), f_udp.result()


# --- connection racing -------------------------------------------------------

@dataclass(frozen=True)
class DialOutcome:
    ok: bool
    elapsed: float | None  # seconds until the handshake completed or failed
    reason: str = "ok"


@dataclass(frozen=True)
class RaceDecision:
    transport: str  # UDP or TCP
    decided_after: float  # seconds from the start of the race
    udp: DialOutcome | None
    tcp: DialOutcome
    cached: bool = False


class RaceFailed(ConnectionError):
    def __init__(self, udp: DialOutcome | None, tcp: DialOutcome) -> None:
        self.udp, self.tcp = udp, tcp
        udp_reason = udp.reason if udp else "not attempted"
        super().__init__(f"both transports failed: udp-tunneled: {udp_reason}; native-tcp: {tcp.reason}")


class RaceCache:
    """Per-access-network verdicts with a TTL."""

    def __init__(self, ttl: float = 600.0, clock: Callable[[], float] = time.monotonic) -> None:
        self.ttl = ttl
        self.clock = clock
        self._entries: dict[str, tuple[str, float]] = {}

    def get(self, network: str) -> str | None:
        entry = self._entries.get(network)
        if entry is None:
            return None
        verdict, expires = entry
        if self.clock() >= expires:
            del self._entries[network]
            return None
        return verdict

    def put(self, network: str, verdict: str) -> None:
        self._entries[network] = (verdict, self.clock() + self.ttl)


class Dialer(Protocol):
    def dial(self, destination: str, port: int, timeout: float, *,
             udp: bool = True) -> tuple[DialOutcome | None, DialOutcome]: ...


def choose_transport(udp: DialOutcome | None, tcp: DialOutcome, head_start: float) -> RaceDecision:
    """UDP wins if its handshake completes no later than ``head_start`` after TCP's.

    Ties go to UDP.  A transport whose handshake failed is never chosen.
    """
    if udp is not None and udp.ok and (not tcp.ok or udp.elapsed <= tcp.elapsed + head_start):
        return RaceDecision(UDP, udp.elapsed, udp, tcp)
    if tcp.ok:
        waited = tcp.elapsed + head_start if udp is not None else tcp.elapsed
        if udp is not None and not udp.ok and udp.elapsed is not None:
            waited = min(waited, max(tcp.elapsed, udp.elapsed))
        return RaceDecision(TCP, waited, udp, tcp)
    raise RaceFailed(udp, tcp)


def race_connect(destination: str, port: int, timeout: float, *, dialer: Dialer,
                 cache: RaceCache | None = None, network: str = "default",
                 head_start: float = 0.100) -> RaceDecision:
    """Pick the tunneled or native transport for ``destination`` Happy-Eyeballs style."""
    cached_blocked = cache is not None and cache.get(network) == "udp-blocked"
    udp, tcp = dialer.dial(destination, port, timeout, udp=not cached_blocked)
    decision = choose_transport(udp, tcp, head_start)
    if cache is not None and udp is not None:
        if udp.ok:
            cache.put(network, "udp-ok")
        elif tcp.ok:
            cache.put(network, "udp-blocked")
    if cached_blocked:
        decision = RaceDecision(decision.transport, decision.decided_after, None, tcp, cached=True)
    return decision


def _dial_one(dst: str, port: int, timeout: float, bind_addr: str) -> DialOutcome:
    sock = socket.socket(_family(dst), socket.SOCK_STREAM)
    t0 = time.perf_counter()
    try:
        if bind_addr:
            sock.bind((bind_addr, 0))
        sock.settimeout(timeout)
        sock.connect((dst, port))
        return DialOutcome(True, time.perf_counter() - t0)
    except socket.timeout:
        return DialOutcome(False, time.perf_counter() - t0, "timeout")
    except OSError as exc:
        return DialOutcome(False, time.perf_counter() - t0, exc.strerror or str(exc))
    finally:
        sock.close()


class LiveDialer:
    """Concurrent kernel-socket handshakes: native to the destination, tunneled to its inner address."""

    def __init__(self, tunnel_peers: Mapping[str, str], *, tunnel_bind: str = "") -> None:
        self.tunnel_peers = dict(tunnel_peers)
        self.tunnel_bind = tunnel_bind

    def dial(self, destination: str, port: int, timeout: float, *,
             udp: bool = True) -> tuple[DialOutcome | None, DialOutcome]:
        with ThreadPoolExecutor(2) as pool:
            f_tcp = pool.submit(_dial_one, destination, port, timeout, "")
            f_udp = None
            if udp:
                f_udp = pool.submit(_dial_one, inner_address(self.tunnel_peers, destination, port),
                                    port, timeout, self.tunnel_bind)
            return (f_udp.result() if f_udp else None), f_tcp.result()


def pairs_from_records(records: Iterable[Mapping]) -> list[PairResult]:
    return [PairResult.from_dict(r) for r in records if r.get("kind", "pair") == "pair"]
