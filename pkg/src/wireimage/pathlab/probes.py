"""Probe transport over an emulated multi-hop path.

The impairment point sits on the client's access link, before the first
router, and sees both the probe and the response.  Routers decrement the TTL
and answer expiry with time-exceeded; the first router also enforces the
link MTU (fragmentation-needed for DF packets that don't fit).  The target
answers UDP with port-unreachable, TCP SYNs with SYN+ACK (listening port) or
RST (closed port) unless the port is filtered, and echo requests with echo
replies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .. import packets as pk
from .net import classify
from .profile import ImpairmentProfile, PacketMeta, PathState, transit


@dataclass
class EmulatedProbeNetwork:
    profile: ImpairmentProfile = field(default_factory=ImpairmentProfile)
    target: str = "192.0.2.10"
    local_addr: str = "10.0.0.1"
    hops: int = 8  # routers between client and target
    hop_delay: float = 0.002  # s, one way per hop
    link_mtu: int = 1500
    listening: frozenset[int] = frozenset({80, 443})
    filtered: frozenset[int] = frozenset()
    seed: int = 0
    now: float = 0.0
    sent: list[bytes] = field(default_factory=list)
    events: list[tuple[float, str, str]] = field(default_factory=list)  # (t, responder, kind)

    def __post_init__(self) -> None:
        self.state = PathState(self.seed)

    def router(self, k: int) -> str:
        return f"10.255.{k // 256}.{k % 256}"

    def _transit(self, packet: bytes, direction: str, t: float) -> float | None:
        proto, flow = classify(packet, direction)
        d = transit(PacketMeta(proto, len(packet), direction, t, flow), self.profile, self.state)
        return d.deliver_at

    def _respond(self, packet: bytes) -> tuple[bytes, int] | None:
        """The response and the number of hops it came back from."""
        ip = pk.parse_ip(packet)
        if ip.df and len(packet) > self.link_mtu:
            return pk.icmp_error(self.router(1), packet, pk.ICMP_DEST_UNREACH,
                                 pk.UNREACH_FRAG_NEEDED, rest=self.link_mtu), 1
        if ip.ttl <= self.hops:
            return pk.icmp_error(self.router(ip.ttl), packet, pk.ICMP_TIME_EXCEEDED, 0), ip.ttl
        if ip.dst != self.target:
            return None
        dist = self.hops + 1
        if ip.proto == pk.PROTO_UDP:
            return pk.icmp_error(self.target, packet, pk.ICMP_DEST_UNREACH, pk.UNREACH_PORT), dist
        if ip.proto == pk.PROTO_TCP:
            seg = pk.parse_tcp(ip.payload)
            if seg.dport in self.filtered or not seg.flags & pk.SYN or seg.flags & pk.ACK:
                return None
            ack = (seg.seq + 1) % (1 << 32)
            if seg.dport in self.listening:
                reply = pk.tcp_packet(self.target, ip.src, seg.dport, seg.sport, 12345, ack,
                                      pk.SYN | pk.ACK, options=pk.tcp_options(1460))
            else:
                reply = pk.tcp_packet(self.target, ip.src, seg.dport, seg.sport, 0, ack,
                                      pk.RST | pk.ACK)
            return reply, dist
        if ip.proto == pk.PROTO_ICMP:
            msg = pk.parse_icmp(ip.payload)
            if msg.type == pk.ICMP_ECHO_REQUEST:
                return pk.icmp_packet(self.target, ip.src, pk.ICMP_ECHO_REPLY, 0, msg.rest,
                                      msg.payload, df=ip.df), dist
        return None

    def exchange(self, packet: bytes, match: Callable[[bytes], bool],
                 timeout: float) -> tuple[bytes, float] | None:
        t0 = self.now
        self.sent.append(packet)
        out_at = self._transit(packet, "out", t0)
        answer = self._respond(packet) if out_at is not None else None
        if answer is not None:
            response, dist = answer
            back_at = self._transit(response, "in", out_at + 2 * dist * self.hop_delay)
            if back_at is not None and back_at - t0 <= timeout and match(response):
                ip = pk.parse_ip(response)
                kind = "time-exceeded" if ip.proto == pk.PROTO_ICMP and \
                    ip.payload[0] == pk.ICMP_TIME_EXCEEDED else "other"
                self.events.append((back_at, ip.src, kind))
                self.now = back_at
                return response, back_at - t0
        self.now = t0 + timeout
        return None

    def send(self, packet: bytes) -> None:
        self.sent.append(packet)
        self._transit(packet, "out", self.now)

    def sleep(self, seconds: float) -> None:
        self.now += seconds

    @property
    def ttl_exceeded_events(self) -> int:
        return sum(1 for _, _, kind in self.events if kind == "time-exceeded")
