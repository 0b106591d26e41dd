"""Discrete-event network for running flow pairs through an impaired path.

Topology: one measuring client and any number of destinations.  Each
destination sits behind its own :class:`Path`, a pair of directional
bottleneck links preceded by the impairment point (``transit``).  The client
and every destination run a native TCP stack and a UDP tunnel endpoint
(:class:`~wireimage.tunnel.TunnelCodec`) in front of a second TCP stack, so
tunneled traffic is real TCP-in-UDP on the emulated wire.

Time is virtual; a campaign of minutes completes in seconds.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .. import metrics
from .. import packets as pk
from ..capture import Captured
from ..flowpair import REQUEST, DialOutcome, FailureReason, FlowResult, FlowSpec
from ..tunnel import TunnelCodec, TunnelConfig
from .profile import ImpairmentProfile, PacketMeta, PathState, transit
from .tcp import TcpEndpoint, TcpParams

NATIVE = "native"
TUNNEL = "tunnel"


class EventLoop:
    def __init__(self) -> None:
        self.now = 0.0
        self._q: list = []
        self._seq = itertools.count()

    def at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._q, (max(t, self.now), next(self._seq), fn, args))

    def run(self, until: float | None = None, done: Callable[[], bool] | None = None) -> None:
        while self._q:
            if done is not None and done():
                return
            t = self._q[0][0]
            if until is not None and t > until:
                break
            _, _, fn, args = heapq.heappop(self._q)
            self.now = t
            fn(*args)
        if until is not None and (done is None or not done()):
            self.now = max(self.now, until)


@dataclass(frozen=True)
class PathConfig:
    one_way_delay: float = 0.020  # s, per direction
    capacity: float = 12.5e6  # bytes/s, per direction (100 Mbit/s)
    buffer_bytes: int = 500_000
    jitter: float = 0.0005  # s, uniform extra delay; FIFO order is kept


class Link:
    """Drop-tail FIFO bottleneck with serialization, propagation and jitter."""

    def __init__(self, loop: EventLoop, cfg: PathConfig, rng: random.Random) -> None:
        self.loop, self.cfg, self.rng = loop, cfg, rng
        self.busy_until = 0.0
        self.last_arrival = 0.0
        self.drops = 0

    def enqueue(self, packet: bytes, deliver: Callable[[bytes], None]) -> None:
        now = self.loop.now
        backlog = max(0.0, self.busy_until - now) * self.cfg.capacity
        if backlog + len(packet) > self.cfg.buffer_bytes:
            self.drops += 1
            return
        self.busy_until = max(now, self.busy_until) + len(packet) / self.cfg.capacity
        arrive = self.busy_until + self.cfg.one_way_delay + self.rng.uniform(0, self.cfg.jitter)
        arrive = self.last_arrival = max(arrive, self.last_arrival)
        self.loop.at(arrive, deliver, packet)


class Path:
    """Client <-> one destination.  ``"out"`` is client to destination."""

    def __init__(self, loop: EventLoop, profile: ImpairmentProfile, cfg: PathConfig,
                 seed: int) -> None:
        self.loop = loop
        self.profile = profile
        self.state = PathState(seed)
        rng = random.Random(f"{seed}:link")
        self.links = {"out": Link(loop, cfg, random.Random(rng.random())),
                      "in": Link(loop, cfg, random.Random(rng.random()))}

    def send(self, direction: str, packet: bytes, deliver: Callable[[bytes], None]) -> None:
        proto, flow = classify(packet, direction)
        d = transit(PacketMeta(proto, len(packet), direction, self.loop.now, flow),
                    self.profile, self.state)
        if not d.delivered:
            return
        link = self.links[direction]
        if d.deliver_at > self.loop.now:
            self.loop.at(d.deliver_at, link.enqueue, packet, deliver)
        else:
            link.enqueue(packet, deliver)

    @property
    def drops(self) -> dict[str, int]:
        out = dict(self.state.drops)
        q = sum(link.drops for link in self.links.values())
        if q:
            out["queue"] = q
        return out


def classify(packet: bytes, direction: str) -> tuple[str, tuple | None]:
    """Protocol name and a direction-independent flow key (client side first)."""
    ip = pk.parse_ip(packet)
    proto = {pk.PROTO_TCP: "tcp", pk.PROTO_UDP: "udp"}.get(ip.proto, "icmp")
    if proto == "icmp" or len(ip.payload) < 4:
        return proto, None
    sport, dport = int.from_bytes(ip.payload[0:2], "big"), int.from_bytes(ip.payload[2:4], "big")
    if direction == "out":
        return proto, (ip.src, sport, ip.dst, dport)
    return proto, (ip.dst, dport, ip.src, sport)


def _flow_key(packet: bytes) -> tuple[str, int, str, int]:
    """(local addr, local port, remote addr, remote port) as seen by the receiver."""
    ip = pk.parse_ip(packet)
    seg = ip.payload
    return (ip.dst, int.from_bytes(seg[2:4], "big"), ip.src, int.from_bytes(seg[0:2], "big"))


class Host:
    """A TCP/IP host with a native stack and a tunneled stack."""

    def __init__(self, net: "Network", addr: str) -> None:
        self.net = net
        self.addr = addr
        self.conns: dict[tuple, TcpEndpoint] = {}
        self.codecs: dict[tuple[str, int], TunnelCodec] = {}
        self.listening = False
        self.on_accept: Callable[[str, TcpEndpoint], None] | None = None

    def codec(self, peer: str, port: int) -> TunnelCodec:
        key = (peer, port)
        if key not in self.codecs:
            self.codecs[key] = TunnelCodec(TunnelConfig(self.addr, peer, port))
        return self.codecs[key]

    def params(self, kind: str) -> TcpParams:
        return self.net.tunnel_params if kind == TUNNEL else self.net.native_params

    def flush(self, ep: TcpEndpoint) -> None:
        for inner in ep.take_output():
            if ep._kind == TUNNEL:
                dg = self.codec(ep.remote, ep._tport).outbound(inner)
                if dg is None:
                    continue
                self.net.transmit(self, ep.remote, dg.to_bytes())
            else:
                self.net.transmit(self, ep.remote, inner)
        dl = ep.deadline
        if dl is not None and getattr(ep, "_armed", None) != dl:
            ep._armed = dl
            self.net.loop.at(dl, self._tick, ep)

    def _tick(self, ep: TcpEndpoint) -> None:
        if ep.deadline is not None and self.net.loop.now >= ep.deadline:
            ep.poll(self.net.loop.now)
            self.flush(ep)
            self.net.notify(ep)

    def deliver(self, packet: bytes) -> None:
        ip = pk.parse_ip(packet)
        if ip.proto == pk.PROTO_UDP:
            udp = pk.parse_udp(ip.payload)
            # outer ports equal the tunnel port on both sides
            inner = self.codec(ip.src, udp.dport).inbound(udp.payload, ip.src)
            if inner is None:
                return
            self._deliver_tcp(TUNNEL, inner, udp.dport)
        elif ip.proto == pk.PROTO_TCP:
            self._deliver_tcp(NATIVE, packet, None)

    def _deliver_tcp(self, kind: str, packet: bytes, tunnel_port: int | None) -> None:
        local, lport, remote, rport = _flow_key(packet)
        key = (kind, local, lport, remote, rport)
        ep = self.conns.get(key)
        if ep is None:
            seg = pk.parse_tcp(pk.parse_ip(packet).payload)
            if not self.listening or not (seg.flags & pk.SYN) or seg.flags & pk.ACK:
                return
            ep = TcpEndpoint(local, lport, remote, rport, self.params(kind),
                             self.net.rng.getrandbits(32), passive=True)
            ep._kind, ep._tport = kind, tunnel_port
            self.conns[key] = ep
            if self.on_accept:
                self.on_accept(kind, ep)
        ep.receive(packet, self.net.loop.now)
        self.flush(ep)
        self.net.notify(ep)


class Network:
    """Event loop, hosts and paths.  Hosts are created on first use."""

    def __init__(self, profiles: ImpairmentProfile | Mapping[str, ImpairmentProfile],
                 *, path: PathConfig = PathConfig(), seed: int = 0,
                 client_addr: str = "10.0.0.1", down: frozenset[str] = frozenset(),
                 capture: bool = False, server_mtu: int = 1500) -> None:
        self.loop = EventLoop()
        self.seed = seed
        self.rng = random.Random(f"{seed}:hosts")
        self.path_config = path
        self.profiles = profiles
        self.paths: dict[str, Path] = {}
        self.down = frozenset(down)
        self.native_params = TcpParams(mtu=server_mtu)
        overhead = TunnelConfig(client_addr, client_addr, 1).encap_overhead
        self.tunnel_params = TcpParams(mtu=server_mtu - overhead)
        self.client = Host(self, client_addr)
        self.hosts: dict[str, Host] = {client_addr: self.client}
        self.capture: list[Captured] | None = [] if capture else None
        self.watchers: dict[int, Callable[[TcpEndpoint], None]] = {}

    def profile_for(self, dst: str) -> ImpairmentProfile:
        if isinstance(self.profiles, ImpairmentProfile):
            return self.profiles
        return self.profiles.get(dst, ImpairmentProfile())

    def path_to(self, dst: str) -> Path:
        if dst not in self.paths:
            seed = random.Random(f"{self.seed}:{dst}").getrandbits(32)
            self.paths[dst] = Path(self.loop, self.profile_for(dst), self.path_config, seed)
        return self.paths[dst]

    def host(self, addr: str) -> Host:
        if addr not in self.hosts:
            self.hosts[addr] = Host(self, addr)
        return self.hosts[addr]

    def transmit(self, sender: Host, dst: str, packet: bytes) -> None:
        if sender is self.client:
            self._capture(packet)
            if dst in self.down:
                self.path_to(dst)  # traffic toward a dead host still counts as a path
                return
            self.path_to(dst).send("out", packet, self.host(dst).deliver)
        else:
            self.path_to(sender.addr).send("in", packet, self._client_rx)

    def _client_rx(self, packet: bytes) -> None:
        self._capture(packet)
        self.client.deliver(packet)

    def _capture(self, packet: bytes) -> None:
        if self.capture is not None:
            self.capture.append(Captured(int(round(self.loop.now * 1e6)), packet))

    def notify(self, ep: TcpEndpoint) -> None:
        w = self.watchers.get(id(ep))
        if w is not None:
            w(ep)


# --- flows -------------------------------------------------------------------

class ServerApp:
    """Reads the 4-byte size request, optionally waits, writes that many bytes and closes."""

    def __init__(self, net: Network, host: Host, response_delay: float = 0.0,
                 max_payload: int = 64 * 1024 * 1024) -> None:
        self.net, self.host = net, host
        self.response_delay = response_delay
        self.max_payload = max_payload
        host.listening = True
        host.on_accept = self._accept

    def _accept(self, kind: str, ep: TcpEndpoint) -> None:
        ep._answered = False
        self.net.watchers[id(ep)] = self._progress

    def _progress(self, ep: TcpEndpoint) -> None:
        if ep._answered or len(ep.received) < REQUEST.size:
            return
        ep._answered = True
        (size,) = REQUEST.unpack(bytes(ep.received[:REQUEST.size]))
        if size > self.max_payload:
            ep.abort()
            self.host.flush(ep)
            return
        self.net.loop.at(self.net.loop.now + self.response_delay, self._respond, ep, size)

    def _respond(self, ep: TcpEndpoint, size: int) -> None:
        if ep.state == "closed":
            return
        ep.write(bytes(size))
        ep.close()
        self.host.flush(ep)


@dataclass
class ClientFlow:
    kind: str
    ep: TcpEndpoint
    size: int
    start: float
    connect_timeout: float
    stall_timeout: float
    handshake_only: bool = False
    last_progress: float = 0.0
    progress_bytes: int = 0
    result: FlowResult | None = None
    established_elapsed: float | None = None
    end_at: float | None = None
    reason: str = ""

    @property
    def done(self) -> bool:
        return self.result is not None or (self.handshake_only and self.reason != "")


class FlowDriver:
    """Client-side flow bookkeeping: completion, connect timeout, stall and reset."""

    def __init__(self, net: Network) -> None:
        self.net = net

    def start(self, kind: str, dst: str, port: int, sport: int, size: int, *,
              connect_timeout: float, stall_timeout: float,
              handshake_only: bool = False) -> ClientFlow:
        loop = self.net.loop
        host = self.net.client
        ep = TcpEndpoint(host.addr, sport, dst, port, host.params(kind),
                         self.net.rng.getrandbits(32))
        ep._kind, ep._tport = kind, port
        host.conns[(kind, host.addr, sport, dst, port)] = ep
        flow = ClientFlow(kind, ep, size, loop.now, connect_timeout, stall_timeout,
                          handshake_only, last_progress=loop.now)
        self.net.watchers[id(ep)] = lambda _ep: self._progress(flow)
        if not handshake_only:
            ep.write(REQUEST.pack(size))
        ep.open(loop.now)
        host.flush(ep)
        loop.at(loop.now + connect_timeout, self._check_connect, flow)
        return flow

    def _finish(self, flow: ClientFlow, result: FlowResult | None, reason: str = "") -> None:
        if flow.done:
            return
        flow.reason = reason or "ok"
        flow.result = result
        flow.end_at = self.net.loop.now
        self.net.watchers.pop(id(flow.ep), None)
        if flow.handshake_only or (result is not None and not result.success):
            flow.ep.abort(send_rst=flow.ep.established)
            self.net.client.flush(flow.ep)

    def _rtt(self, flow: ClientFlow) -> float | None:
        try:
            return metrics.initial_rtt(flow.ep.trace)
        except metrics.HandshakeIncomplete:
            return None

    def _progress(self, flow: ClientFlow) -> None:
        ep, now = flow.ep, self.net.loop.now
        if flow.done:
            return
        if ep.established and flow.established_elapsed is None:
            flow.established_elapsed = now - flow.start
            if flow.handshake_only:
                self._finish(flow, None, "ok")
                return
            self.net.loop.at(now + flow.stall_timeout, self._check_stall, flow, 0)
        if ep.reset or ep.failed:
            reason = FailureReason.RESET if ep.reset else FailureReason.CONNECT_TIMEOUT
            if flow.handshake_only:
                self._finish(flow, None, "reset" if ep.reset else "timeout")
            else:
                self._finish(flow, FlowResult.failed(reason, len(ep.received), flow.start, now,
                                                     self._rtt(flow)))
            return
        n = len(ep.received)
        if n > flow.progress_bytes:
            flow.progress_bytes = n
            flow.last_progress = now
            self.net.loop.at(now + flow.stall_timeout, self._check_stall, flow, n)
            if n >= flow.size:
                flow.end_at = now
        if ep.peer_closed and not flow.done:
            rtt = self._rtt(flow)
            if n == flow.size and flow.end_at is not None:
                self._finish(flow, FlowResult.completed(n, flow.start, flow.end_at, rtt))
            else:
                self._finish(flow, FlowResult.failed(FailureReason.RESET, n, flow.start, now, rtt))

    def _check_connect(self, flow: ClientFlow) -> None:
        if flow.done or flow.ep.established:
            return
        if flow.handshake_only:
            self._finish(flow, None, "timeout")
        else:
            self._finish(flow, FlowResult.failed(FailureReason.CONNECT_TIMEOUT, 0, flow.start,
                                                 self.net.loop.now))

    def _check_stall(self, flow: ClientFlow, seen: int) -> None:
        if flow.done or flow.progress_bytes != seen:
            return
        self._finish(flow, FlowResult.failed(FailureReason.STALL, seen, flow.start,
                                             self.net.loop.now, self._rtt(flow)))


def _server_loss(net: Network, kind: str, dst: str, port: int, sport: int) -> float | None:
    host = net.hosts.get(dst)
    if host is None:
        return None
    ep = host.conns.get((kind, dst, port, net.client.addr, sport))
    if ep is None or not ep.trace:
        return None
    return metrics.loss_pct(ep.trace)


class EmulatedPairTransport:
    """Pair transport over the in-process network (see :mod:`wireimage.flowpair`)."""

    def __init__(self, profiles: ImpairmentProfile | Mapping[str, ImpairmentProfile] = ImpairmentProfile(),
                 *, path: PathConfig = PathConfig(), seed: int = 0, source: str = "client",
                 client_addr: str = "10.0.0.1", connect_timeout: float = 10.0,
                 stall_timeout: float = 30.0, response_delay: float = 0.0,
                 start_skew: float = 0.001, down: frozenset[str] = frozenset(),
                 capture: bool = False) -> None:
        self.net = Network(profiles, path=path, seed=seed, client_addr=client_addr,
                           down=down, capture=capture)
        self.source = source
        self.connect_timeout = connect_timeout
        self.stall_timeout = stall_timeout
        self.response_delay = response_delay
        self.start_skew = start_skew
        self.driver = FlowDriver(self.net)
        self.apps: dict[str, ServerApp] = {}
        self._rng = random.Random(f"{seed}:transport")
        self._ports = itertools.count(32768 + self._rng.randrange(16384))
        self.last_capture: list[Captured] = []

    @property
    def now(self) -> float:
        return self.net.loop.now

    def allocate_port(self) -> int:
        return 1024 + (next(self._ports) - 1024) % (65536 - 1024)

    def pause(self, seconds: float) -> None:
        self.net.loop.run(until=self.net.loop.now + seconds)

    def drops(self, dst: str) -> dict[str, int]:
        return self.net.path_to(dst).drops

    def _app(self, dst: str) -> ServerApp:
        if dst not in self.apps:
            self.apps[dst] = ServerApp(self.net, self.net.host(dst), self.response_delay)
        return self.apps[dst]

    def _cleanup(self, dst: str, port: int, sport: int) -> None:
        server = self.net.hosts.get(dst)
        for kind in (NATIVE, TUNNEL):
            ep = self.net.client.conns.pop((kind, self.net.client.addr, sport, dst, port), None)
            if ep is not None:
                ep.abort(send_rst=False)
            if server is not None:
                ep = server.conns.pop((kind, dst, port, self.net.client.addr, sport), None)
                if ep is not None:
                    self.net.watchers.pop(id(ep), None)
                    ep.abort(send_rst=False)

    def run_flows(self, spec: FlowSpec, src_port: int) -> tuple[FlowResult, FlowResult]:
        dst, port, size = spec.destination, spec.port, spec.payload_bytes
        if dst not in self.net.down:
            self._app(dst)
        if self.net.capture is not None:
            self.net.capture.clear()
        order = [NATIVE, TUNNEL]
        self._rng.shuffle(order)
        skew = self._rng.uniform(0, self.start_skew)
        flows: dict[str, ClientFlow] = {}

        def launch(kind: str) -> None:
            flows[kind] = self.driver.start(kind, dst, port, src_port, size,
                                            connect_timeout=self.connect_timeout,
                                            stall_timeout=self.stall_timeout)

        launch(order[0])
        self.net.loop.at(self.net.loop.now + skew, launch, order[1])
        self.net.loop.run(done=lambda: len(flows) == 2 and all(f.done for f in flows.values()))
        out = []
        for kind in (NATIVE, TUNNEL):
            r = flows[kind].result
            loss = _server_loss(self.net, kind, dst, port, src_port)
            out.append(FlowResult(r.success, r.bytes_transferred, r.duration, r.throughput,
                                  r.initial_rtt, loss, r.failure_reason, r.start, r.end))
        if self.net.capture is not None:
            self.last_capture = list(self.net.capture)
        self._cleanup(dst, port, src_port)
        return out[0], out[1]

    def dial(self, destination: str, port: int, timeout: float, *,
             udp: bool = True) -> tuple[DialOutcome | None, DialOutcome]:
        """Handshake-only race of both transports (the racer's dialer interface)."""
        if destination not in self.net.down:
            self._app(destination)
        sport = self.allocate_port()
        kinds = [NATIVE, TUNNEL] if udp else [NATIVE]
        flows = {k: self.driver.start(k, destination, port, sport, 0, connect_timeout=timeout,
                                      stall_timeout=timeout, handshake_only=True)
                 for k in kinds}
        self.net.loop.run(done=lambda: all(f.done for f in flows.values()))

        def outcome(f: ClientFlow) -> DialOutcome:
            if f.reason == "ok":
                return DialOutcome(True, f.established_elapsed)
            return DialOutcome(False, f.end_at - f.start, f.reason)

        self.pause(0.0)
        self._cleanup(destination, port, sport)
        return (outcome(flows[TUNNEL]) if udp else None), outcome(flows[NATIVE])
