"""Traceroute-style reachability probes used as a ping.

A probe is one IP packet sent with a large initial TTL (199 by default) so it
reaches the target without drawing time-exceeded messages from the path.
What counts as an answer from the target depends on the protocol:

=======  ============================================  =========================
proto    probe                                         target answer
=======  ============================================  =========================
udp      datagram to a (presumably closed) port        ICMP port unreachable
tcp      SYN                                           SYN+ACK or RST
icmp     echo request                                  echo reply
=======  ============================================  =========================

``packet_size`` is the payload size in bytes (zero padding); UDP and ICMP
probes are ``packet_size + 28`` bytes on the wire.  TCP probes carry no
payload.

Probes are sent through a transport with the signature::

    local_addr: str
    exchange(packet, match, timeout) -> (response_packet, rtt_seconds) | None
    send(packet) -> None          # fire and forget (SYN cleanup RST)
    sleep(seconds) -> None

:class:`RawSocketTransport` uses raw sockets; the emulator provides
:class:`wireimage.pathlab.probes.EmulatedProbeNetwork`.
"""

from __future__ import annotations

import errno
import itertools
import logging
import os
import random
import select
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol

from . import packets as pk
from .tunnel import PrivilegeError

log = logging.getLogger(__name__)

PROTOCOLS = ("udp", "tcp", "icmp")
DEFAULT_TTL = 199
DEFAULT_TIMEOUT = 5.0
SWEEP_SIZES = (72, 572, 1454)
DEFAULT_PORTS = {"udp": 33435, "tcp": 80}
ROUND_PACKETS = 3
ROUND_INTERVAL = 20 * 60.0

TARGET_RESPONSE = "target-response"
PATH_TTL_EXCEEDED = "path-ttl-exceeded"
UNREACHABLE = "unreachable-from-path"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class ProbeSpec:
    target: str
    protocol: str
    port: int | None = None
    packet_size: int = 0
    initial_ttl: int = DEFAULT_TTL
    attempts: int = ROUND_PACKETS
    spacing: float = 0.0  # seconds between attempts
    timeout: float = DEFAULT_TIMEOUT
    df: bool = True

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 1 <= self.initial_ttl <= 255:
            raise ValueError(f"initial_ttl must be in [1, 255], got {self.initial_ttl}")
        if self.packet_size < 0 or self.packet_size > 65507:
            raise ValueError(f"invalid packet_size {self.packet_size}")
        if self.protocol == "tcp" and self.packet_size:
            raise ValueError("TCP probes are bare SYNs; packet_size must be 0")
        if self.protocol != "icmp":
            port = self.port if self.port is not None else DEFAULT_PORTS[self.protocol]
            if not 1 <= port <= 65535:
                raise ValueError(f"invalid port {port}")
            object.__setattr__(self, "port", port)
        elif self.port is not None:
            raise ValueError("ICMP probes take no port")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def to_dict(self) -> dict:
        return {"target": self.target, "protocol": self.protocol, "port": self.port,
                "packet_size": self.packet_size, "initial_ttl": self.initial_ttl,
                "attempts": self.attempts, "spacing": self.spacing, "timeout": self.timeout}


@dataclass(frozen=True)
class ProbeResult:
    spec: ProbeSpec
    outcome: str
    responder: str | None = None
    rtt: float | None = None  # ms
    response_type: str | None = None  # e.g. "icmp 3/3", "tcp syn-ack"
    sent: int = 1
    answered: int = 0
    timestamp: float | None = None

    def __post_init__(self) -> None:
        if (self.rtt is None) != (self.outcome == TIMEOUT):
            raise ValueError("rtt is set exactly for non-timeout outcomes")

    @property
    def success(self) -> bool:
        return self.outcome == TARGET_RESPONSE

    def to_dict(self) -> dict:
        return {"kind": "probe", **self.spec.to_dict(), "outcome": self.outcome,
                "responder": self.responder, "rtt_ms": self.rtt,
                "response_type": self.response_type, "sent": self.sent,
                "answered": self.answered, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeResult":
        spec = ProbeSpec(d["target"], d["protocol"], d.get("port"), d.get("packet_size", 0),
                         d.get("initial_ttl", DEFAULT_TTL), d.get("attempts", 1),
                         d.get("spacing", 0.0), d.get("timeout", DEFAULT_TIMEOUT))
        return cls(spec, d["outcome"], d.get("responder"), d.get("rtt_ms"),
                   d.get("response_type"), d.get("sent", 1), d.get("answered", 0),
                   d.get("timestamp"))


class ProbeTransport(Protocol):
    local_addr: str

    def exchange(self, packet: bytes, match: Callable[[bytes], bool],
                 timeout: float) -> tuple[bytes, float] | None: ...

    def send(self, packet: bytes) -> None: ...

    def sleep(self, seconds: float) -> None: ...


# --- probe construction and response matching --------------------------------

_ids = itertools.count(random.Random(os.getpid()).randrange(1 << 16))


def _next_id() -> int:
    return next(_ids) & 0xFFFF


@dataclass(frozen=True)
class _Probe:
    packet: bytes
    match: Callable[[bytes], bool]
    sport: int = 0
    seq: int = 0


def _quotes(resp: pk.IPPacket, spec: ProbeSpec, proto: int, local: str,
            check: Callable[[bytes], bool]) -> bool:
    """True if ``resp`` is an ICMP error quoting our probe."""
    if resp.proto != pk.PROTO_ICMP:
        return False
    try:
        msg = pk.parse_icmp(resp.payload)
    except pk.MalformedPacket:
        return False
    if msg.type not in (pk.ICMP_DEST_UNREACH, pk.ICMP_TIME_EXCEEDED) or msg.quoted is None:
        return False
    q = msg.quoted
    return q.proto == proto and q.src == local and q.dst == spec.target and check(q.payload)


def build_probe(spec: ProbeSpec, local: str) -> _Probe:
    ident = _next_id()
    ip_id = _next_id()
    if spec.protocol == "udp":
        sport = 32768 + ident % 28000
        pkt = pk.udp_packet(local, spec.target, sport, spec.port, bytes(spec.packet_size),
                            ttl=spec.initial_ttl, ident=ip_id, df=spec.df)

        def check(l4: bytes) -> bool:
            return len(l4) >= 4 and l4[0:2] == sport.to_bytes(2, "big") \
                and l4[2:4] == spec.port.to_bytes(2, "big")

        def match(data: bytes) -> bool:
            resp = _safe_ip(data)
            return resp is not None and _quotes(resp, spec, pk.PROTO_UDP, local, check)

        return _Probe(pkt, match, sport)

    if spec.protocol == "tcp":
        sport = 32768 + ident % 28000
        seq = random.getrandbits(32)
        pkt = pk.tcp_packet(local, spec.target, sport, spec.port, seq, 0, pk.SYN,
                            options=pk.tcp_options(1460), ttl=spec.initial_ttl, ident=ip_id,
                            df=spec.df)

        def check(l4: bytes) -> bool:
            return len(l4) >= 8 and l4[0:2] == sport.to_bytes(2, "big") \
                and l4[2:4] == spec.port.to_bytes(2, "big") \
                and l4[4:8] == seq.to_bytes(4, "big")

        def match(data: bytes) -> bool:
            resp = _safe_ip(data)
            if resp is None:
                return False
            if resp.proto == pk.PROTO_TCP and resp.src == spec.target and resp.dst == local:
                try:
                    seg = pk.parse_tcp(resp.payload)
                except pk.MalformedPacket:
                    return False
                return (seg.sport == spec.port and seg.dport == sport
                        and bool(seg.flags & (pk.RST | pk.SYN))
                        and (seg.flags & pk.ACK == 0 or seg.ack == (seq + 1) % (1 << 32)))
            return _quotes(resp, spec, pk.PROTO_TCP, local, check)

        return _Probe(pkt, match, sport, seq)

    echo_id, echo_seq = ident, ip_id
    pkt = pk.icmp_packet(local, spec.target, pk.ICMP_ECHO_REQUEST, 0,
                         (echo_id << 16) | echo_seq, bytes(spec.packet_size),
                         ttl=spec.initial_ttl, ident=ip_id, df=spec.df)

    def check(l4: bytes) -> bool:
        return len(l4) >= 8 and l4[0] == pk.ICMP_ECHO_REQUEST \
            and l4[4:6] == echo_id.to_bytes(2, "big") and l4[6:8] == echo_seq.to_bytes(2, "big")

    def match(data: bytes) -> bool:
        resp = _safe_ip(data)
        if resp is None or resp.proto != pk.PROTO_ICMP:
            return False
        if resp.src == spec.target and resp.dst == local:
            try:
                msg = pk.parse_icmp(resp.payload)
            except pk.MalformedPacket:
                return False
            if msg.type == pk.ICMP_ECHO_REPLY:
                return msg.ident == echo_id and msg.sequence == echo_seq
        return _quotes(resp, spec, pk.PROTO_ICMP, local, check)

    return _Probe(pkt, match)


def _safe_ip(data: bytes) -> pk.IPPacket | None:
    try:
        return pk.parse_ip(data)
    except pk.MalformedPacket:
        return None


def interpret(spec: ProbeSpec, response: bytes) -> tuple[str, str, str]:
    """(outcome, responder, response type) for a matched response."""
    ip = pk.parse_ip(response)
    if ip.proto == pk.PROTO_TCP:
        seg = pk.parse_tcp(ip.payload)
        kind = "tcp syn-ack" if seg.flags & pk.SYN else "tcp rst"
        return TARGET_RESPONSE, ip.src, kind
    msg = pk.parse_icmp(ip.payload)
    rtype = f"icmp {msg.type}/{msg.code}"
    if msg.type == pk.ICMP_ECHO_REPLY:
        return TARGET_RESPONSE, ip.src, rtype
    if msg.type == pk.ICMP_TIME_EXCEEDED:
        return PATH_TTL_EXCEEDED, ip.src, rtype
    if (spec.protocol == "udp" and msg.type == pk.ICMP_DEST_UNREACH
            and msg.code == pk.UNREACH_PORT and ip.src == spec.target):
        return TARGET_RESPONSE, ip.src, rtype
    return UNREACHABLE, ip.src, rtype


def probe_once(spec: ProbeSpec, transport: ProbeTransport) -> ProbeResult:
    """Send a single packet and classify what comes back."""
    p = build_probe(spec, transport.local_addr)
    got = transport.exchange(p.packet, p.match, spec.timeout)
    single = ProbeSpec(spec.target, spec.protocol, spec.port, spec.packet_size,
                       spec.initial_ttl, 1, 0.0, spec.timeout, spec.df)
    if got is None:
        return ProbeResult(single, TIMEOUT, sent=1, answered=0, timestamp=time.time())
    response, rtt = got
    outcome, responder, rtype = interpret(spec, response)
    if spec.protocol == "tcp" and rtype == "tcp syn-ack":
        # never leave a half-open connection on the target
        transport.send(pk.tcp_packet(transport.local_addr, spec.target, p.sport, spec.port,
                                     (p.seq + 1) % (1 << 32), 0, pk.RST,
                                     ttl=spec.initial_ttl))
    return ProbeResult(single, outcome, responder, rtt * 1000.0, rtype, 1, 1, time.time())


def probe_attempts(spec: ProbeSpec, transport: ProbeTransport) -> list[ProbeResult]:
    """One result per packet; ``spec.attempts`` packets ``spec.spacing`` apart."""
    out = []
    for i in range(spec.attempts):
        if i and spec.spacing > 0:
            transport.sleep(spec.spacing)
        out.append(probe_once(spec, transport))
    return out


_RANK = {TARGET_RESPONSE: 0, UNREACHABLE: 1, PATH_TTL_EXCEEDED: 2, TIMEOUT: 3}


def summarize(spec: ProbeSpec, results: list[ProbeResult]) -> ProbeResult:
    """Collapse per-packet results: the best outcome wins (target response first)."""
    best = min(results, key=lambda r: _RANK[r.outcome])
    answered = sum(r.outcome != TIMEOUT for r in results)
    return ProbeResult(spec, best.outcome, best.responder, best.rtt, best.response_type,
                       len(results), answered, results[0].timestamp)


def probe(spec: ProbeSpec, transport: ProbeTransport) -> ProbeResult:
    return summarize(spec, probe_attempts(spec, transport))


def udp_probe(spec: ProbeSpec, transport: ProbeTransport) -> ProbeResult:
    if spec.protocol != "udp":
        raise ValueError("udp_probe needs a udp ProbeSpec")
    return probe(spec, transport)


def tcp_probe(spec: ProbeSpec, transport: ProbeTransport) -> ProbeResult:
    if spec.protocol != "tcp":
        raise ValueError("tcp_probe needs a tcp ProbeSpec")
    return probe(spec, transport)


def icmp_probe(spec: ProbeSpec, transport: ProbeTransport) -> ProbeResult:
    if spec.protocol != "icmp":
        raise ValueError("icmp_probe needs an icmp ProbeSpec")
    return probe(spec, transport)


# --- MTU sweep and classification ----------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    size: int
    udp: ProbeResult
    icmp: ProbeResult

    @property
    def udp_ok(self) -> bool:
        return self.udp.success

    @property
    def icmp_ok(self) -> bool:
        return self.icmp.success

    @property
    def udp_fail_icmp_pass(self) -> bool:
        return self.icmp_ok and not self.udp_ok

    @property
    def icmp_fail_udp_pass(self) -> bool:
        return self.udp_ok and not self.icmp_ok

    def to_dict(self) -> dict:
        return {"kind": "mtu-sweep", "target": self.udp.spec.target, "size": self.size,
                "udp_ok": self.udp_ok, "icmp_ok": self.icmp_ok,
                "udp_fail_icmp_pass": self.udp_fail_icmp_pass,
                "icmp_fail_udp_pass": self.icmp_fail_udp_pass,
                "udp_outcome": self.udp.outcome, "icmp_outcome": self.icmp.outcome}


@dataclass(frozen=True)
class MtuSweep:
    target: str
    rows: tuple[SweepRow, ...]

    @property
    def flagged(self) -> bool:
        """UDP fails at some size where ICMP of the same size gets through."""
        return any(r.udp_fail_icmp_pass for r in self.rows)

    @property
    def large_icmp_blocked(self) -> bool:
        return any(r.icmp_fail_udp_pass for r in self.rows)


def mtu_sweep(target: str, transport: ProbeTransport, sizes: Iterable[int] = SWEEP_SIZES, *,
              port: int = DEFAULT_PORTS["udp"], attempts: int = ROUND_PACKETS,
              ttl: int = DEFAULT_TTL, timeout: float = DEFAULT_TIMEOUT) -> MtuSweep:
    rows = []
    for size in sizes:
        u = probe(ProbeSpec(target, "udp", port, size, ttl, attempts, timeout=timeout), transport)
        i = probe(ProbeSpec(target, "icmp", None, size, ttl, attempts, timeout=timeout), transport)
        rows.append(SweepRow(size, u, i))
    return MtuSweep(target, tuple(rows))


def classify_blocked_origin(results: Iterable[ProbeResult], oracle_reachable: Iterable[str]) -> bool:
    """True iff no UDP probe to any target known to answer UDP ever succeeded."""
    oracle = set(oracle_reachable)
    if not oracle:
        raise ValueError("no UDP-reachable targets to judge against")
    relevant = [r for r in results if r.spec.protocol == "udp" and r.spec.target in oracle]
    if not relevant:
        raise ValueError("no UDP probes toward UDP-reachable targets")
    return not any(r.success for r in relevant)


def run_rounds(specs: list[ProbeSpec], transport: ProbeTransport,
               sink: Callable[[ProbeResult], None], *, rounds: int | None = None,
               interval: float = ROUND_INTERVAL,
               stop: threading.Event | None = None) -> int:
    """Daemon mode: every ``interval`` seconds, probe each spec with its attempts."""
    n = 0
    for k in itertools.count():
        if rounds is not None and k >= rounds:
            break
        started = time.monotonic()
        for spec in specs:
            for r in probe_attempts(spec, transport):
                sink(r)
                n += 1
        if rounds is not None and k + 1 >= rounds:
            break
        remaining = interval - (time.monotonic() - started)
        if stop is not None:
            if stop.wait(max(0.0, remaining)):
                break
        elif remaining > 0:
            transport.sleep(remaining)
    return n


def parse_targets(text: str) -> list[tuple[str, int | None]]:
    """One ``address[:port]`` per line (``[v6]:port`` for IPv6); ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        port: int | None = None
        if line.startswith("["):
            host, _, rest = line[1:].partition("]")
            if rest.startswith(":"):
                port = int(rest[1:])
        elif line.count(":") == 1:
            host, p = line.split(":")
            port = int(p)
        else:
            host = line
        try:
            socket.inet_pton(socket.AF_INET6 if ":" in host else socket.AF_INET, host)
        except OSError:
            raise ValueError(f"line {lineno}: not an IP address: {host!r}") from None
        if port is not None and not 1 <= port <= 65535:
            raise ValueError(f"line {lineno}: invalid port {port}")
        out.append((host, port))
    return out


# --- raw sockets ---------------------------------------------------------------

def check_privileges() -> None:
    try:
        socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW).close()
    except PermissionError:
        raise PrivilegeError("raw sockets need root or CAP_NET_RAW "
                             "(try: sudo, or setcap cap_net_raw+ep on the interpreter)") from None


def source_address_for(target: str) -> str:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.connect((target, 9))
        return s.getsockname()[0]


@dataclass
class _Waiter:
    match: Callable[[bytes], bool]
    event: threading.Event = field(default_factory=threading.Event)
    response: bytes | None = None
    at: float = 0.0


class RawSocketTransport:
    """IPv4 raw-socket transport with one receive thread demultiplexing responses."""

    def __init__(self, local_addr: str | None = None, target_hint: str = "192.0.2.1") -> None:
        check_privileges()
        self.local_addr = local_addr or source_address_for(target_hint)
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
        self._rx = [socket.socket(socket.AF_INET, socket.SOCK_RAW, proto)
                    for proto in (socket.IPPROTO_ICMP, socket.IPPROTO_TCP)]
        self._waiters: list[_Waiter] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._reader, daemon=True, name="probe-rx")
        self._thread.start()

    def _reader(self) -> None:
        while not self._stop.is_set():
            ready, _, _ = select.select(self._rx, [], [], 0.1)
            for s in ready:
                try:
                    data = s.recv(65535)
                except OSError as exc:
                    if exc.errno not in (errno.EAGAIN, errno.EINTR):
                        log.debug("raw receive failed: %s", exc)
                    continue
                now = time.perf_counter()
                with self._lock:
                    for w in self._waiters:
                        if w.response is None and w.match(data):
                            w.response, w.at = data, now
                            w.event.set()
                            break

    def send(self, packet: bytes) -> None:
        self._tx.sendto(packet, (pk.parse_ip(packet).dst, 0))

    def exchange(self, packet: bytes, match: Callable[[bytes], bool],
                 timeout: float) -> tuple[bytes, float] | None:
        w = _Waiter(match)
        with self._lock:
            self._waiters.append(w)
        try:
            t0 = time.perf_counter()
            self.send(packet)
            if not w.event.wait(timeout):
                return None
            return w.response, w.at - t0
        finally:
            with self._lock:
                self._waiters.remove(w)

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)
        for s in (self._tx, *self._rx):
            s.close()

    def __enter__(self) -> "RawSocketTransport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_specs(targets: Iterable[tuple[str, int | None]], protocols: Iterable[str],
               sizes: Iterable[int], **kw) -> Iterator[ProbeSpec]:
    for (host, port), proto in itertools.product(targets, protocols):
        for size in ([0] if proto == "tcp" else sizes):
            yield ProbeSpec(host, proto, None if proto == "icmp" else port, size, **kw)
