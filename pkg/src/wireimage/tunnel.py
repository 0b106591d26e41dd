"""Userspace TCP-over-UDP tunnel endpoint.

Packets read from a tun device are sent verbatim as the payload of a UDP
datagram to the peer endpoint; datagrams from the peer are written back to the
device.  There is no framing: the outer UDP payload *is* the inner IP packet.

The per-packet logic lives in :class:`TunnelCodec` so that the path emulator
and the real datapath apply exactly the same validation, MSS clamping and
counting rules.
"""

from __future__ import annotations

import errno
import fcntl
import ipaddress
import logging
import os
import selectors
import socket
import struct
import threading
from dataclasses import asdict, dataclass, field

from . import packets as pk

log = logging.getLogger(__name__)

IPV4_OVERHEAD = pk.IPV4_HEADER + pk.UDP_HEADER  # 28
IPV6_OVERHEAD = pk.IPV6_HEADER + pk.UDP_HEADER  # 48

TUNSETIFF = 0x400454CA
IFF_TUN = 0x0001
IFF_NO_PI = 0x1000
IFF_UP = 0x1
SIOCGIFFLAGS = 0x8913
SIOCSIFFLAGS = 0x8914
SIOCSIFADDR = 0x8916
SIOCSIFNETMASK = 0x891C
SIOCGIFMTU = 0x8921
SIOCSIFMTU = 0x8922
SIOCGIFINDEX = 0x8933

_GONE_ERRNOS = {errno.EBADFD, errno.EIO, errno.ENODEV, errno.ENXIO, errno.EBADF}


class TunnelError(Exception):
    pass


class ConfigError(TunnelError, ValueError):
    pass


class PrivilegeError(TunnelError, PermissionError):
    pass


class InterfaceCollisionError(TunnelError):
    pass


class PortInUseError(TunnelError):
    pass


class InterfaceGoneError(TunnelError):
    """The virtual interface disappeared under a running datapath."""


class OversizePacket(ValueError):
    pass


def overhead_for(addr: str) -> int:
    return IPV6_OVERHEAD if pk.is_ipv6(addr) else IPV4_OVERHEAD


@dataclass(frozen=True)
class TunnelConfig:
    """Endpoint parameters.

    ``interface_mtu`` is the MTU of the physical path the outer datagrams
    travel on; the tun device itself gets ``interface_mtu - encap_overhead``
    so that no outer datagram can exceed the path MTU.  ``tun_addr`` is the
    inner address (CIDR) assigned to the tun device.
    """

    local_addr: str
    peer_addr: str
    udp_port: int
    virtual_if_name: str = "wi0"
    interface_mtu: int = 1500
    tun_addr: str = "10.77.0.1/24"
    encap_overhead: int = field(init=False)

    def __post_init__(self) -> None:
        for name in ("local_addr", "peer_addr"):
            try:
                ipaddress.ip_address(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if pk.is_ipv6(self.local_addr) != pk.is_ipv6(self.peer_addr):
            raise ConfigError("local_addr and peer_addr must be the same address family")
        if not isinstance(self.udp_port, int) or not 1 <= self.udp_port <= 65535:
            raise ConfigError(f"invalid UDP port {self.udp_port!r}")
        if not self.virtual_if_name or len(self.virtual_if_name.encode()) > 15:
            raise ConfigError(f"invalid interface name {self.virtual_if_name!r}")
        object.__setattr__(self, "encap_overhead", overhead_for(self.peer_addr))
        if self.interface_mtu - self.encap_overhead <= 0:
            raise ConfigError(f"interface_mtu {self.interface_mtu} leaves no room for inner packets")
        try:
            ipaddress.ip_interface(self.tun_addr)
        except ValueError as exc:
            raise ConfigError(f"tun_addr: {exc}") from None

    @property
    def tun_mtu(self) -> int:
        return self.interface_mtu - self.encap_overhead

    @property
    def max_inner_mss(self) -> int:
        """Largest MSS an inner IPv4 TCP flow may use without exceeding the path MTU."""
        return clamp_mss(self.interface_mtu - pk.IPV4_HEADER - pk.TCP_HEADER, self.encap_overhead)


@dataclass(frozen=True)
class OuterDatagram:
    payload: bytes
    src: str
    dst: str
    sport: int
    dport: int

    @property
    def overhead(self) -> int:
        return overhead_for(self.dst)

    @property
    def wire_size(self) -> int:
        return len(self.payload) + self.overhead

    def to_bytes(self, *, ttl: int = 64) -> bytes:
        """Full outer IP/UDP packet, UDP checksum always computed."""
        return pk.udp_packet(self.src, self.dst, self.sport, self.dport, self.payload, ttl=ttl)


def validate_inner(inner: bytes) -> pk.IPPacket:
    if not inner:
        raise pk.MalformedPacket("empty inner packet")
    return pk.parse_ip(inner)


def encapsulate(inner: bytes, config: TunnelConfig) -> OuterDatagram:
    validate_inner(inner)
    if len(inner) > config.tun_mtu:
        raise OversizePacket(
            f"inner packet of {len(inner)} bytes exceeds {config.tun_mtu} "
            f"(interface MTU {config.interface_mtu} - {config.encap_overhead})")
    return OuterDatagram(bytes(inner), config.local_addr, config.peer_addr,
                         config.udp_port, config.udp_port)


def decapsulate(outer: OuterDatagram | bytes) -> bytes:
    payload = outer.payload if isinstance(outer, OuterDatagram) else bytes(outer)
    validate_inner(payload)
    return payload


def clamp_mss(native_mss: int, overhead: int) -> int:
    if native_mss <= overhead:
        raise ValueError(f"MSS {native_mss} does not exceed tunnel overhead {overhead}")
    return native_mss - overhead


def clamp_syn_mss(packet: bytes, max_mss: int) -> bytes:
    """Lower the MSS option of a TCP SYN to ``max_mss``; other packets pass unchanged."""
    ip = pk.parse_ip(packet)
    if ip.proto != pk.PROTO_TCP or len(ip.payload) < pk.TCP_HEADER:
        return packet
    seg = ip.payload
    if not seg[13] & pk.SYN:
        return packet
    hlen = (seg[12] >> 4) * 4
    opts = pk.parse_tcp_options(seg[pk.TCP_HEADER:hlen])
    if 2 not in opts:
        return packet
    offset, body = opts[2]
    if len(body) != 2 or struct.unpack("!H", body)[0] <= max_mss:
        return packet
    at = ip.header_len + pk.TCP_HEADER + offset + 2
    out = bytearray(packet)
    out[at:at + 2] = struct.pack("!H", max_mss)
    return pk.fix_l4_checksum(bytes(out))


def inner_mss_limit(config: TunnelConfig, inner_version: int) -> int:
    hdr = pk.IPV6_HEADER if inner_version == 6 else pk.IPV4_HEADER
    return config.tun_mtu - hdr - pk.TCP_HEADER


# --- counters ----------------------------------------------------------------

@dataclass
class DirectionCounters:
    packets_in: int = 0
    bytes_in: int = 0
    packets_forwarded: int = 0
    bytes_forwarded: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def packets_dropped(self) -> int:
        return sum(self.dropped.values())

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1


@dataclass
class TunnelCounters:
    outbound: DirectionCounters = field(default_factory=DirectionCounters)  # tun -> UDP
    inbound: DirectionCounters = field(default_factory=DirectionCounters)   # UDP -> tun
    errors: int = 0

    def snapshot(self) -> dict:
        out = asdict(self)
        for d in ("outbound", "inbound"):
            out[d]["packets_dropped"] = getattr(self, d).packets_dropped
        return out


class TunnelCodec:
    """Per-packet tunnel logic with counters; shared by the real and emulated paths."""

    def __init__(self, config: TunnelConfig) -> None:
        self.config = config
        self.counters = TunnelCounters()
        self._lock = threading.Lock()

    def _clamp(self, packet: bytes, ip: pk.IPPacket) -> bytes:
        if ip.proto != pk.PROTO_TCP:
            return packet
        return clamp_syn_mss(packet, inner_mss_limit(self.config, ip.version))

    def outbound(self, inner: bytes) -> OuterDatagram | None:
        with self._lock:
            c = self.counters.outbound
            c.packets_in += 1
            c.bytes_in += len(inner)
            try:
                ip = validate_inner(inner)
                dg = encapsulate(self._clamp(inner, ip), self.config)
            except pk.MalformedPacket:
                c.drop("malformed")
                return None
            except OversizePacket:
                c.drop("oversize")
                return None
            c.packets_forwarded += 1
            c.bytes_forwarded += len(dg.payload)
            return dg

    def inbound(self, payload: bytes, source: str) -> bytes | None:
        with self._lock:
            c = self.counters.inbound
            c.packets_in += 1
            c.bytes_in += len(payload)
            if source != self.config.peer_addr:
                c.drop("spoofed")
                return None
            try:
                inner = decapsulate(payload)
                inner = self._clamp(inner, pk.parse_ip(inner))
            except pk.MalformedPacket:
                c.drop("malformed")
                return None
            c.packets_forwarded += 1
            c.bytes_forwarded += len(inner)
            return inner

    def undo_forward(self, direction: str, size: int, reason: str) -> None:
        """Reclassify an already-counted forward as a drop (send/write failed)."""
        with self._lock:
            c = getattr(self.counters, direction)
            c.packets_forwarded -= 1
            c.bytes_forwarded -= size
            c.drop(reason)

    def error(self) -> None:
        with self._lock:
            self.counters.errors += 1

    def snapshot(self) -> dict:
        with self._lock:
            return self.counters.snapshot()


# --- tun device --------------------------------------------------------------

def _ifreq(name: str, fmt: str = "", *values) -> bytes:
    return struct.pack("16s" + fmt, name.encode(), *values).ljust(40, b"\0")


def _sockaddr_in(addr: str) -> bytes:
    return struct.pack("H2s4s8s", socket.AF_INET, b"\0\0", socket.inet_aton(addr), b"\0" * 8)


def interface_exists(name: str) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        try:
            fcntl.ioctl(s, SIOCGIFINDEX, _ifreq(name))
        except OSError:
            return False
    return True


def interface_mtu(name: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        res = fcntl.ioctl(s, SIOCGIFMTU, _ifreq(name, "i", 0))
    return struct.unpack_from("16si", res)[1]


def interface_is_up(name: str) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        res = fcntl.ioctl(s, SIOCGIFFLAGS, _ifreq(name, "H", 0))
    return bool(struct.unpack_from("16sH", res)[1] & IFF_UP)


def configure_interface(name: str, cidr: str | None = None, mtu: int | None = None) -> None:
    """Assign an IPv4 address, set the MTU and bring the interface up."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        if cidr is not None:
            iface = ipaddress.ip_interface(cidr)
            if iface.version == 4:
                fcntl.ioctl(s, SIOCSIFADDR, _ifreq(name)[:16] + _sockaddr_in(str(iface.ip)) + b"\0" * 8)
                fcntl.ioctl(s, SIOCSIFNETMASK, _ifreq(name)[:16] + _sockaddr_in(str(iface.netmask)) + b"\0" * 8)
        if mtu is not None:
            fcntl.ioctl(s, SIOCSIFMTU, _ifreq(name, "i", mtu))
        flags = struct.unpack_from("16sH", fcntl.ioctl(s, SIOCGIFFLAGS, _ifreq(name, "H", 0)))[1]
        fcntl.ioctl(s, SIOCSIFFLAGS, _ifreq(name, "H", flags | IFF_UP))


class TunDevice:
    """A Linux tun device (IFF_TUN | IFF_NO_PI) configured through ioctls."""

    def __init__(self, name: str, tun_addr: str, mtu: int) -> None:
        if interface_exists(name):
            raise InterfaceCollisionError(f"interface {name!r} already exists")
        try:
            self.fd = os.open("/dev/net/tun", os.O_RDWR)
        except PermissionError as exc:
            raise PrivilegeError(f"cannot open /dev/net/tun: {exc}") from None
        except FileNotFoundError:
            raise PrivilegeError("/dev/net/tun is not available") from None
        try:
            res = fcntl.ioctl(self.fd, TUNSETIFF, struct.pack("16sH", name.encode(), IFF_TUN | IFF_NO_PI))
            self.name = res[:16].rstrip(b"\0").decode()
            self._configure(tun_addr, mtu)
        except OSError as exc:
            os.close(self.fd)
            if exc.errno in (errno.EPERM, errno.EACCES):
                raise PrivilegeError(f"cannot create interface {name!r}: {exc}") from None
            if exc.errno == errno.EBUSY:
                raise InterfaceCollisionError(f"interface {name!r} is busy") from None
            raise
        os.set_blocking(self.fd, False)

    def _configure(self, tun_addr: str, mtu: int) -> None:
        configure_interface(self.name, tun_addr, mtu)

    def fileno(self) -> int:
        return self.fd

    def read(self, n: int = 65535) -> bytes:
        return os.read(self.fd, n)

    def write(self, data: bytes) -> int:
        return os.write(self.fd, data)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


# --- endpoint + datapath -----------------------------------------------------

class TunnelEndpoint:
    """A tun device bound to a UDP socket, plus the controls of its datapath.

    ``shutdown()`` and ``snapshot()`` are safe to call from any thread.
    """

    def __init__(self, config: TunnelConfig, device, sock: socket.socket) -> None:
        self.config = config
        self.device = device
        self.sock = sock
        self.codec = TunnelCodec(config)
        self._stop = threading.Event()
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)

    def shutdown(self) -> None:
        self._stop.set()
        try:
            os.write(self._wake_w, b"x")
        except OSError:
            pass

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    def snapshot(self) -> dict:
        return self.codec.snapshot()

    def close(self) -> None:
        self.shutdown()
        for closer in (self.sock.close, self.device.close):
            try:
                closer()
            except OSError:
                pass
        for fd in (self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass

    def __enter__(self) -> "TunnelEndpoint":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def bind_udp(addr: str, port: int) -> socket.socket:
    family = socket.AF_INET6 if pk.is_ipv6(addr) else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_DGRAM)
    try:
        sock.bind((addr, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise PortInUseError(f"UDP {addr}:{port} already bound") from None
        if exc.errno in (errno.EACCES, errno.EPERM):
            raise PrivilegeError(f"cannot bind UDP {addr}:{port}: {exc}") from None
        raise
    sock.setblocking(False)
    return sock


def create_endpoint(config: TunnelConfig, *, device=None, sock: socket.socket | None = None) -> TunnelEndpoint:
    """Create the tun device and bind the tunnel socket.

    ``device`` and ``sock`` may be injected (anything with ``fileno``, ``read``,
    ``write`` and ``close`` works as a device), which is how the datapath is
    exercised without privileges.
    """
    if sock is None:
        sock = bind_udp(config.local_addr, config.udp_port)
    if device is None:
        try:
            device = TunDevice(config.virtual_if_name, config.tun_addr, config.tun_mtu)
        except BaseException:
            sock.close()
            raise
    return TunnelEndpoint(config, device, sock)


def run_datapath(endpoint: TunnelEndpoint, *, bufsize: int = 65535) -> dict:
    """Forward packets in both directions until ``endpoint.shutdown()``.

    Transient socket errors are counted and skipped; losing the interface
    raises :class:`InterfaceGoneError`.  Returns the final counter snapshot.
    """
    codec = endpoint.codec
    sel = selectors.DefaultSelector()
    sel.register(endpoint.device, selectors.EVENT_READ, "dev")
    sel.register(endpoint.sock, selectors.EVENT_READ, "sock")
    sel.register(endpoint._wake_r, selectors.EVENT_READ, "wake")
    try:
        while not endpoint.stopping:
            for key, _ in sel.select():
                if key.data == "dev":
                    _pump_device(endpoint, codec, bufsize)
                elif key.data == "sock":
                    _pump_socket(endpoint, codec, bufsize)
    finally:
        sel.close()
    return codec.snapshot()


def _pump_device(endpoint: TunnelEndpoint, codec: TunnelCodec, bufsize: int) -> None:
    try:
        inner = endpoint.device.read(bufsize)
    except BlockingIOError:
        return
    except OSError as exc:
        if exc.errno in _GONE_ERRNOS:
            raise InterfaceGoneError(f"interface read failed: {exc}") from exc
        codec.error()
        return
    if not inner:
        raise InterfaceGoneError("interface closed")
    dg = codec.outbound(inner)
    if dg is None:
        return
    try:
        endpoint.sock.sendto(dg.payload, (dg.dst, dg.dport))
    except OSError as exc:
        log.debug("tunnel send failed: %s", exc)
        codec.error()
        codec.undo_forward("outbound", len(dg.payload), "send-error")


def _pump_socket(endpoint: TunnelEndpoint, codec: TunnelCodec, bufsize: int) -> None:
    try:
        payload, addr = endpoint.sock.recvfrom(bufsize)
    except BlockingIOError:
        return
    except OSError as exc:
        log.debug("tunnel receive failed: %s", exc)
        codec.error()
        return
    inner = codec.inbound(payload, addr[0])
    if inner is None:
        return
    try:
        endpoint.device.write(inner)
    except OSError as exc:
        if exc.errno in _GONE_ERRNOS:
            raise InterfaceGoneError(f"interface write failed: {exc}") from exc
        codec.error()
        codec.undo_forward("inbound", len(inner), "write-error")
