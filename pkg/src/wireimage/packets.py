"""Raw IPv4/IPv6, TCP, UDP and ICMP header construction and parsing.

Everything here works on plain ``bytes`` so the same packets can be written
to a tun device, sent through a raw socket, or pushed through the in-process
path emulator.
"""

from __future__ import annotations

import socket
import struct
import sys
from array import array
from dataclasses import dataclass, field
from typing import Sequence

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_ICMPV6 = 58

FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

IPV4_HEADER = 20
IPV6_HEADER = 40
UDP_HEADER = 8
TCP_HEADER = 20
ICMP_HEADER = 8

ICMP_ECHO_REPLY = 0
ICMP_DEST_UNREACH = 3
ICMP_ECHO_REQUEST = 8
ICMP_TIME_EXCEEDED = 11

UNREACH_PORT = 3
UNREACH_FRAG_NEEDED = 4

_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_IPV6 = struct.Struct("!IHBB16s16s")
_TCP = struct.Struct("!HHIIBBHHH")
_UDP = struct.Struct("!HHHH")
_ICMP = struct.Struct("!BBHHH")


class MalformedPacket(ValueError):
    """Bytes that do not parse as the expected header."""


def checksum(data: bytes | bytearray | memoryview) -> int:
    """Internet one's-complement checksum over ``data``."""
    if len(data) % 2:
        data = bytes(data) + b"\0"
    total = sum(array("H", bytes(data)))
    total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    total = ~total & 0xFFFF
    if sys.byteorder == "little":
        total = ((total & 0xFF) << 8) | (total >> 8)
    return total


def _pseudo_header(src: bytes, dst: bytes, proto: int, length: int) -> bytes:
    if len(src) == 4:
        return src + dst + struct.pack("!BBH", 0, proto, length)
    return src + dst + struct.pack("!IxxxB", length, proto)


def pack_addr(addr: str) -> bytes:
    try:
        return socket.inet_pton(socket.AF_INET, addr)
    except OSError:
        return socket.inet_pton(socket.AF_INET6, addr)


def unpack_addr(raw: bytes) -> str:
    family = socket.AF_INET if len(raw) == 4 else socket.AF_INET6
    return socket.inet_ntop(family, raw)


def is_ipv6(addr: str) -> bool:
    return ":" in addr


@dataclass(frozen=True)
class IPPacket:
    version: int
    src: str
    dst: str
    proto: int
    ttl: int
    header_len: int
    total_len: int
    payload: bytes
    ident: int = 0
    df: bool = False


def parse_ip(data: bytes) -> IPPacket:
    """Parse an IPv4 or IPv6 packet, checking the length fields agree."""
    if len(data) < 1:
        raise MalformedPacket("empty packet")
    version = data[0] >> 4
    if version == 4:
        if len(data) < IPV4_HEADER:
            raise MalformedPacket("truncated IPv4 header")
        (vihl, _tos, total, ident, frag, ttl, proto, _csum,
         src, dst) = _IPV4.unpack_from(data)
        ihl = (vihl & 0x0F) * 4
        if ihl < IPV4_HEADER or total < ihl or total != len(data):
            raise MalformedPacket(f"inconsistent IPv4 lengths (ihl={ihl}, total={total}, got={len(data)})")
        return IPPacket(4, unpack_addr(src), unpack_addr(dst), proto, ttl,
                        ihl, total, bytes(data[ihl:total]), ident, bool(frag & 0x4000))
    if version == 6:
        if len(data) < IPV6_HEADER:
            raise MalformedPacket("truncated IPv6 header")
        _vtf, plen, nxt, hlim, src, dst = _IPV6.unpack_from(data)
        if plen + IPV6_HEADER != len(data):
            raise MalformedPacket(f"inconsistent IPv6 payload length {plen} for {len(data)} bytes")
        return IPPacket(6, unpack_addr(src), unpack_addr(dst), nxt, hlim,
                        IPV6_HEADER, len(data), bytes(data[IPV6_HEADER:]))
    raise MalformedPacket(f"IP version {version}")


def build_ip(src: str, dst: str, proto: int, payload: bytes, *, ttl: int = 64,
             ident: int = 0, df: bool = True, tos: int = 0) -> bytes:
    s, d = pack_addr(src), pack_addr(dst)
    if len(s) == 16:
        return _IPV6.pack(6 << 28, len(payload), proto, ttl, s, d) + payload
    total = IPV4_HEADER + len(payload)
    if total > 0xFFFF:
        raise ValueError(f"IPv4 packet too large: {total}")
    hdr = _IPV4.pack(0x45, tos, total, ident & 0xFFFF, 0x4000 if df else 0,
                     ttl, proto, 0, s, d)
    csum = checksum(hdr)
    return hdr[:10] + struct.pack("!H", csum) + hdr[12:] + payload


# --- TCP ---------------------------------------------------------------------

@dataclass(frozen=True)
class TcpSegment:
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int
    window: int
    payload: bytes
    mss: int | None = None
    wscale: int | None = None
    header_len: int = TCP_HEADER
    sack_ok: bool = False
    sack: tuple[tuple[int, int], ...] = ()

    @property
    def syn(self) -> bool:
        return bool(self.flags & SYN)


def tcp_options(mss: int | None = None, wscale: int | None = None, *,
                sack_permitted: bool = False,
                sack: Sequence[tuple[int, int]] = ()) -> bytes:
    opts = b""
    if mss is not None:
        opts += struct.pack("!BBH", 2, 4, mss)
    if wscale is not None:
        opts += struct.pack("!BBBB", 1, 3, 3, wscale)
    if sack_permitted:
        opts += struct.pack("!BBBB", 1, 1, 4, 2)
    if sack:
        opts += struct.pack("!BBBB", 1, 1, 5, 2 + 8 * len(sack))
        for left, right in sack:
            opts += struct.pack("!II", left & 0xFFFFFFFF, right & 0xFFFFFFFF)
    return opts


def parse_tcp_options(raw: bytes) -> dict[int, tuple[int, bytes]]:
    """Map option kind -> (offset into ``raw``, option body)."""
    out: dict[int, tuple[int, bytes]] = {}
    i = 0
    while i < len(raw):
        kind = raw[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= len(raw):
            raise MalformedPacket("truncated TCP option")
        length = raw[i + 1]
        if length < 2 or i + length > len(raw):
            raise MalformedPacket(f"bad TCP option length {length}")
        out[kind] = (i, raw[i + 2:i + length])
        i += length
    return out


def parse_tcp(data: bytes) -> TcpSegment:
    if len(data) < TCP_HEADER:
        raise MalformedPacket("truncated TCP header")
    sport, dport, seq, ack, off, flags, window, _csum, _urg = _TCP.unpack_from(data)
    hlen = (off >> 4) * 4
    if hlen < TCP_HEADER or hlen > len(data):
        raise MalformedPacket(f"bad TCP data offset {hlen}")
    mss = wscale = None
    sack_ok = False
    sack: tuple[tuple[int, int], ...] = ()
    if hlen > TCP_HEADER:
        opts = parse_tcp_options(data[TCP_HEADER:hlen])
        if 2 in opts and len(opts[2][1]) == 2:
            mss = struct.unpack("!H", opts[2][1])[0]
        if 3 in opts and len(opts[3][1]) == 1:
            wscale = opts[3][1][0]
        sack_ok = 4 in opts
        if 5 in opts and len(opts[5][1]) % 8 == 0:
            body = opts[5][1]
            sack = tuple(struct.unpack_from("!II", body, i) for i in range(0, len(body), 8))
    return TcpSegment(sport, dport, seq, ack, flags, window, bytes(data[hlen:]),
                      mss, wscale, hlen, sack_ok, sack)


def build_tcp(src: str, dst: str, sport: int, dport: int, seq: int, ack: int,
              flags: int, *, window: int = 65535, options: bytes = b"",
              payload: bytes = b"") -> bytes:
    """TCP segment (header + payload) with a valid checksum."""
    if len(options) % 4:
        options += b"\0" * (4 - len(options) % 4)
    hlen = TCP_HEADER + len(options)
    hdr = _TCP.pack(sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                    (hlen // 4) << 4, flags, window, 0, 0) + options
    seg = hdr + payload
    csum = checksum(_pseudo_header(pack_addr(src), pack_addr(dst), PROTO_TCP, len(seg)) + seg)
    return seg[:16] + struct.pack("!H", csum) + seg[18:]


def tcp_packet(src: str, dst: str, sport: int, dport: int, seq: int, ack: int,
               flags: int, *, window: int = 65535, options: bytes = b"",
               payload: bytes = b"", ttl: int = 64, ident: int = 0, df: bool = True) -> bytes:
    seg = build_tcp(src, dst, sport, dport, seq, ack, flags, window=window,
                    options=options, payload=payload)
    return build_ip(src, dst, PROTO_TCP, seg, ttl=ttl, ident=ident, df=df)


def fix_l4_checksum(packet: bytes) -> bytes:
    """Recompute the TCP or UDP checksum of a full IP packet."""
    ip = parse_ip(packet)
    seg = bytearray(ip.payload)
    offset = {PROTO_TCP: 16, PROTO_UDP: 6}.get(ip.proto)
    if offset is None:
        return packet
    seg[offset:offset + 2] = b"\0\0"
    csum = checksum(_pseudo_header(pack_addr(ip.src), pack_addr(ip.dst), ip.proto, len(seg)) + seg)
    if ip.proto == PROTO_UDP and csum == 0:
        csum = 0xFFFF
    seg[offset:offset + 2] = struct.pack("!H", csum)
    return bytes(packet[:ip.header_len]) + bytes(seg)


def l4_checksum_ok(packet: bytes) -> bool:
    ip = parse_ip(packet)
    if ip.proto not in (PROTO_TCP, PROTO_UDP):
        return True
    pseudo = _pseudo_header(pack_addr(ip.src), pack_addr(ip.dst), ip.proto, len(ip.payload))
    return checksum(pseudo + ip.payload) == 0


# --- UDP ---------------------------------------------------------------------

@dataclass(frozen=True)
class UdpDatagram:
    sport: int
    dport: int
    length: int
    payload: bytes


def build_udp(src: str, dst: str, sport: int, dport: int, payload: bytes) -> bytes:
    length = UDP_HEADER + len(payload)
    hdr = _UDP.pack(sport, dport, length, 0)
    csum = checksum(_pseudo_header(pack_addr(src), pack_addr(dst), PROTO_UDP, length) + hdr + payload)
    return _UDP.pack(sport, dport, length, csum or 0xFFFF) + payload


def udp_packet(src: str, dst: str, sport: int, dport: int, payload: bytes, *,
               ttl: int = 64, ident: int = 0, df: bool = True) -> bytes:
    return build_ip(src, dst, PROTO_UDP, build_udp(src, dst, sport, dport, payload),
                    ttl=ttl, ident=ident, df=df)


def parse_udp(data: bytes) -> UdpDatagram:
    if len(data) < UDP_HEADER:
        raise MalformedPacket("truncated UDP header")
    sport, dport, length, _csum = _UDP.unpack_from(data)
    if length < UDP_HEADER or length > len(data):
        raise MalformedPacket(f"bad UDP length {length}")
    return UdpDatagram(sport, dport, length, bytes(data[UDP_HEADER:length]))


# --- ICMP --------------------------------------------------------------------

@dataclass(frozen=True)
class IcmpMessage:
    type: int
    code: int
    rest: int  # the 32-bit field after the checksum (id/seq, next-hop MTU, ...)
    payload: bytes
    quoted: IPPacket | None = field(default=None, compare=False)

    @property
    def ident(self) -> int:
        return self.rest >> 16

    @property
    def sequence(self) -> int:
        return self.rest & 0xFFFF


def build_icmp(type_: int, code: int, rest: int, payload: bytes) -> bytes:
    hdr = _ICMP.pack(type_, code, 0, rest >> 16, rest & 0xFFFF)
    csum = checksum(hdr + payload)
    return _ICMP.pack(type_, code, csum, rest >> 16, rest & 0xFFFF) + payload


def icmp_packet(src: str, dst: str, type_: int, code: int, rest: int,
                payload: bytes, *, ttl: int = 64, ident: int = 0, df: bool = True) -> bytes:
    return build_ip(src, dst, PROTO_ICMP, build_icmp(type_, code, rest, payload),
                    ttl=ttl, ident=ident, df=df)


def parse_quoted_ip(data: bytes) -> IPPacket | None:
    """Parse the (possibly truncated) IPv4 header quoted inside an ICMP error."""
    if len(data) < IPV4_HEADER or data[0] >> 4 != 4:
        return None
    (vihl, _tos, total, ident, frag, ttl, proto, _csum, src, dst) = _IPV4.unpack_from(data)
    ihl = (vihl & 0x0F) * 4
    if ihl < IPV4_HEADER or ihl > len(data):
        return None
    return IPPacket(4, unpack_addr(src), unpack_addr(dst), proto, ttl, ihl, total,
                    bytes(data[ihl:]), ident, bool(frag & 0x4000))


def parse_icmp(data: bytes) -> IcmpMessage:
    if len(data) < ICMP_HEADER:
        raise MalformedPacket("truncated ICMP header")
    type_, code, _csum, hi, lo = _ICMP.unpack_from(data)
    payload = bytes(data[ICMP_HEADER:])
    quoted = None
    if type_ in (ICMP_DEST_UNREACH, ICMP_TIME_EXCEEDED):
        quoted = parse_quoted_ip(payload)
    return IcmpMessage(type_, code, (hi << 16) | lo, payload, quoted)


def icmp_error(router: str, offending: bytes, type_: int, code: int, *,
               rest: int = 0, ttl: int = 64) -> bytes:
    """ICMP error from ``router`` quoting the IP header + 8 bytes of ``offending``."""
    ip = parse_ip(offending)
    quote = offending[:ip.header_len + 8]
    return icmp_packet(router, ip.src, type_, code, rest, quote, ttl=ttl, df=False)
