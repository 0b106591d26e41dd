"""pcap reading/writing and conversion to normalized packet records.

Only classic pcap (not pcapng) is handled, with raw-IP or Ethernet link types.
Tunneled flows are recognised by their outer UDP port and unwrapped so loss
and handshake extraction always work on the inner TCP headers.
"""

from __future__ import annotations

import select
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

from . import packets as pk
from .metrics import PacketRecord, loss_pct

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
_MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = 0xA1B23C4D


@dataclass(frozen=True)
class Captured:
    ts_us: int
    data: bytes  # starts at the IP header


def write_pcap(path: str | Path, packets: Iterable[Captured], snaplen: int = 65535) -> int:
    n = 0
    with open(path, "wb") as f:
        f.write(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, snaplen, LINKTYPE_RAW))
        for p in packets:
            sec, usec = divmod(int(p.ts_us), 1_000_000)
            f.write(struct.pack("<IIII", sec, usec, len(p.data), len(p.data)))
            f.write(p.data)
            n += 1
    return n


def _read(f: BinaryIO) -> Iterator[Captured]:
    head = f.read(24)
    if len(head) < 24:
        raise ValueError("not a pcap file (short header)")
    for endian in "<>":
        magic = struct.unpack(endian + "I", head[:4])[0]
        if magic in (_MAGIC_US, _MAGIC_NS):
            break
    else:
        raise ValueError("not a classic pcap file")
    scale = 1000 if magic == _MAGIC_NS else 1
    linktype = struct.unpack(endian + "I", head[20:24])[0]
    if linktype not in (LINKTYPE_RAW, LINKTYPE_ETHERNET):
        raise ValueError(f"unsupported link type {linktype}")
    rec = struct.Struct(endian + "IIII")
    while True:
        h = f.read(16)
        if len(h) < 16:
            return
        sec, frac, incl, _orig = rec.unpack(h)
        data = f.read(incl)
        if linktype == LINKTYPE_ETHERNET:
            if len(data) < 14 or data[12:14] not in (b"\x08\x00", b"\x86\xdd"):
                continue
            data = data[14:]
        yield Captured(sec * 1_000_000 + frac // scale, data)


def read_pcap(path: str | Path) -> list[Captured]:
    with open(path, "rb") as f:
        return list(_read(f))


def packet_records(captured: Iterable[Captured], local_addr: str,
                   flow: tuple[int, int] | None = None,
                   tunnel_port: int | None = None) -> list[PacketRecord]:
    """TCP packet records seen from ``local_addr``.

    ``flow`` optionally restricts to (local port, remote port).  With
    ``tunnel_port`` set, UDP datagrams on that port are decapsulated and only
    the inner TCP packets are reported; plain TCP packets are then ignored.
    """
    out = []
    for c in captured:
        try:
            ip = pk.parse_ip(c.data)
        except pk.MalformedPacket:
            continue
        outer_src, outer_dst = ip.src, ip.dst
        if tunnel_port is not None:
            if ip.proto != pk.PROTO_UDP:
                continue
            try:
                udp = pk.parse_udp(ip.payload)
                if tunnel_port not in (udp.sport, udp.dport):
                    continue
                ip = pk.parse_ip(udp.payload)
            except pk.MalformedPacket:
                continue
        if ip.proto != pk.PROTO_TCP:
            continue
        try:
            seg = pk.parse_tcp(ip.payload)
        except pk.MalformedPacket:
            continue
        if outer_src == local_addr:
            direction, ports = "out", (seg.sport, seg.dport)
        elif outer_dst == local_addr:
            direction, ports = "in", (seg.dport, seg.sport)
        else:
            continue
        if flow is not None and ports != tuple(flow):
            continue
        out.append(PacketRecord(c.ts_us, direction, seg.seq, len(seg.payload), seg.flags))
    return out


ETH_P_IP = 0x0800
PACKET_OUTGOING = 4


class Sniffer:
    """Live IPv4 capture on every interface through an AF_PACKET socket (needs CAP_NET_RAW).

    Loopback packets are seen twice by the kernel tap; the outgoing copy is
    dropped so each packet is recorded once.  ``keep`` filters packets before
    they are stored.
    """

    def __init__(self, keep=None, snaplen: int = 65535) -> None:
        self.keep = keep
        self.snaplen = snaplen
        self.packets: list[Captured] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._sock = socket.socket(socket.AF_PACKET, socket.SOCK_DGRAM, socket.htons(ETH_P_IP))
        self._thread = threading.Thread(target=self._run, daemon=True, name="sniffer")

    def start(self) -> "Sniffer":
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.is_set():
            ready, _, _ = select.select([self._sock], [], [], 0.1)
            if not ready:
                continue
            try:
                data, addr = self._sock.recvfrom(self.snaplen)
            except OSError:
                continue
            if addr[0] == "lo" and addr[2] == PACKET_OUTGOING:
                continue
            if self.keep is not None and not self.keep(data):
                continue
            with self._lock:
                self.packets.append(Captured(time.time_ns() // 1000, data))

    def snapshot(self) -> list[Captured]:
        with self._lock:
            return list(self.packets)

    def stop(self) -> list[Captured]:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(2.0)
        self._sock.close()
        return self.snapshot()

    def __enter__(self) -> "Sniffer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def port_filter(ports: Iterable[int]):
    """Keep TCP/UDP packets with either port in ``ports``."""
    wanted = set(ports)

    def keep(data: bytes) -> bool:
        try:
            ip = pk.parse_ip(data)
        except pk.MalformedPacket:
            return False
        if ip.proto not in (pk.PROTO_TCP, pk.PROTO_UDP) or len(ip.payload) < 4:
            return False
        sport, dport = struct.unpack("!HH", ip.payload[:4])
        return sport in wanted or dport in wanted

    return keep


def flow_loss(captured: Sequence[Captured], sender_addr: str, server_port: int,
              client_port: int, *, tunneled: bool) -> float | None:
    """Loss of one server-to-client transfer from a capture taken at the sender."""
    recs = packet_records(captured, sender_addr, (server_port, client_port),
                          tunnel_port=server_port if tunneled else None)
    if not recs:
        return None
    return loss_pct(recs)
