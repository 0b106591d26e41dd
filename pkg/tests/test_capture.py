import socket
import struct

import pytest

import netns
from wireimage import capture, tunnel
from wireimage import packets as pk
from wireimage.capture import Captured
from wireimage.metrics import ACK, SYN

SRV, CLI = "10.0.1.1", "10.0.0.1"


def _transfer(n=30, resend=(), tunneled=False, port=443, cport=40000):
    """Server-side view of a transfer: handshake, n data segments, some re-sent."""
    pkts = [pk.tcp_packet(CLI, SRV, cport, port, 0, 0, SYN),
            pk.tcp_packet(SRV, CLI, port, cport, 100, 1, SYN | ACK)]
    segs = [pk.tcp_packet(SRV, CLI, port, cport, 101 + i * 1000, 1, ACK, payload=b"d" * 1000)
            for i in range(n)]
    pkts += segs + [segs[i] for i in resend]
    if tunneled:
        cfg = tunnel.TunnelConfig(SRV, CLI, port)
        rcfg = tunnel.TunnelConfig(CLI, SRV, port)
        pkts = [tunnel.encapsulate(p, cfg if pk.parse_ip(p).src == SRV else rcfg).to_bytes()
                for p in pkts]
    return [Captured(1000 * i, p) for i, p in enumerate(pkts)]


def test_pcap_roundtrip(tmp_path):
    caps = _transfer(5)
    path = tmp_path / "x.pcap"
    assert capture.write_pcap(path, caps) == len(caps)
    assert capture.read_pcap(path) == caps


def test_reads_ethernet_nanosecond_big_endian(tmp_path):
    data = pk.udp_packet("1.1.1.1", "2.2.2.2", 1, 2, b"hey")
    frame = b"\x00" * 12 + b"\x08\x00" + data
    arp = b"\x00" * 12 + b"\x08\x06" + b"\x00" * 28
    raw = struct.pack(">IHHiIII", 0xA1B23C4D, 2, 4, 0, 0, 65535, 1)
    for f in (frame, arp):
        raw += struct.pack(">IIII", 3, 5000, len(f), len(f)) + f
    (tmp_path / "e.pcap").write_bytes(raw)
    assert capture.read_pcap(tmp_path / "e.pcap") == [Captured(3_000_005, data)]


def test_rejects_non_pcap(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x0a\x0d\x0d\x0a" + b"\0" * 40)
    with pytest.raises(ValueError):
        capture.read_pcap(tmp_path / "bad")


@pytest.mark.parametrize("tunneled", [False, True])
@pytest.mark.parametrize("k", [0, 1, 3])
def test_flow_loss_from_sender_capture(tunneled, k):
    caps = _transfer(30, range(k), tunneled)
    assert capture.flow_loss(caps, SRV, 443, 40000, tunneled=tunneled) == 100.0 * k / 30


def test_packet_records_direction_and_filters():
    caps = _transfer(2) + _transfer(2, cport=40001)
    recs = capture.packet_records(caps, SRV, (443, 40000))
    assert [r.direction for r in recs] == ["in", "out", "out", "out"]
    assert capture.packet_records(caps, CLI, (40001, 443))[0].direction == "out"
    assert capture.packet_records(caps, SRV, (443, 40000), tunnel_port=443) == []
    assert capture.flow_loss(caps, SRV, 443, 50000, tunneled=False) is None


def test_port_filter():
    keep = capture.port_filter([443])
    assert keep(pk.udp_packet("1.1.1.1", "2.2.2.2", 5, 443, b""))
    assert not keep(pk.udp_packet("1.1.1.1", "2.2.2.2", 5, 53, b""))
    assert not keep(b"junk")


def _sniff_loopback():
    with capture.Sniffer(capture.port_filter([7777])) as sn:
        rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        rx.bind(("127.0.0.1", 7777))
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as tx:
            for i in range(3):
                tx.sendto(b"x" * i, ("127.0.0.1", 7777))
                rx.recv(10)
            tx.sendto(b"other", ("127.0.0.1", 7778))
        import time
        time.sleep(0.3)
    return [len(c.data) for c in sn.packets]


@pytest.mark.netns
def test_sniffer_records_each_loopback_packet_once(netns_ok):
    assert netns.run_in_netns(_sniff_loopback) == [28, 29, 30]
