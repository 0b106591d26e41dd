"""Helpers for tests that run inside fresh network namespaces.

Each namespace lives in a forked child; results come back through a pipe as
JSON.  Veth pairs are created with a raw rtnetlink request since there is no
``ip`` binary to shell out to.
"""

import ctypes
import json
import os
import signal
import socket
import struct
import sys
import time
import traceback

from wireimage.tunnel import configure_interface

CLONE_NEWNET = 0x40000000
_libc = ctypes.CDLL(None, use_errno=True)


def unshare_net() -> None:
    if _libc.unshare(CLONE_NEWNET) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))


def available() -> bool:
    if os.geteuid() != 0 or not os.path.exists("/dev/net/tun"):
        return False
    pid = os.fork()
    if pid == 0:
        try:
            unshare_net()
            os._exit(0)
        except BaseException:
            os._exit(1)
    return os.waitpid(pid, 0)[1] == 0


def _nla(kind: int, data: bytes) -> bytes:
    n = 4 + len(data)
    return struct.pack("HH", n, kind) + data + b"\0" * (-n % 4)


def create_veth(name: str, peer: str, peer_ns_pid: int | None = None) -> None:
    ifi = struct.pack("BxHiII", 0, 0, 0, 0, 0)
    peer_attrs = ifi + _nla(3, peer.encode() + b"\0")  # IFLA_IFNAME
    nsfd = None
    if peer_ns_pid is not None:
        nsfd = os.open(f"/proc/{peer_ns_pid}/ns/net", os.O_RDONLY)
        peer_attrs += _nla(28, struct.pack("I", nsfd))  # IFLA_NET_NS_FD
    nested = 0x8000
    info = _nla(1, b"veth\0") + _nla(2 | nested, _nla(1 | nested, peer_attrs))
    body = ifi + _nla(3, name.encode() + b"\0") + _nla(18 | nested, info)  # IFLA_LINKINFO
    flags = 0x1 | 0x4 | 0x200 | 0x400  # REQUEST | ACK | EXCL | CREATE
    msg = struct.pack("IHHII", 16 + len(body), 16, flags, 1, 0) + body  # RTM_NEWLINK
    try:
        with socket.socket(socket.AF_NETLINK, socket.SOCK_RAW, 0) as s:
            s.send(msg)
            reply = s.recv(4096)
    finally:
        if nsfd is not None:
            os.close(nsfd)
    err = struct.unpack_from("i", reply, 16)[0]
    if err:
        raise OSError(-err, f"RTM_NEWLINK veth: {os.strerror(-err)}")


def lo_up() -> None:
    configure_interface("lo")


class NsChild:
    """A forked child in its own network namespace running ``fn(ctl)``.

    ``ctl`` lets the child wait for and send simple string messages.  The
    child's return value (JSON-serialisable) is available from ``result()``.
    """

    def __init__(self, fn, *args):
        self._down_r, self._down_w = os.pipe()
        self._up_r, self._up_w = os.pipe()
        self.pid = os.fork()
        if self.pid == 0:
            code = 0
            out = os.fdopen(self._up_w, "w")
            try:
                os.close(self._down_w)
                os.close(self._up_r)
                unshare_net()
                lo_up()
                self._down = os.fdopen(self._down_r)
                self._out = out
                value = fn(self, *args)
                out.write(json.dumps({"result": value}) + "\n")
            except BaseException:
                out.write(json.dumps({"error": traceback.format_exc()}) + "\n")
                code = 1
            finally:
                out.flush()
                sys.stdout.flush()
                sys.stderr.flush()
                os._exit(code)
        os.close(self._down_r)
        os.close(self._up_w)
        self._to_child = os.fdopen(self._down_w, "w")
        self._from_child = os.fdopen(self._up_r)

    # inside the child
    def send(self, msg: str) -> None:
        self._out.write(json.dumps({"msg": msg}) + "\n")
        self._out.flush()

    def wait_for(self, msg: str) -> None:
        line = self._down.readline().strip()
        if line != msg:
            raise RuntimeError(f"expected {msg!r} from parent, got {line!r}")

    # in the parent
    def tell(self, msg: str) -> None:
        self._to_child.write(msg + "\n")
        self._to_child.flush()

    def expect(self, msg: str, timeout: float = 20.0) -> None:
        line = self._readline(timeout)
        obj = json.loads(line) if line else {"error": "child exited"}
        if obj.get("msg") != msg:
            raise RuntimeError(f"child said {obj!r}, expected {msg!r}")

    def _readline(self, timeout: float) -> str:
        import select
        ready, _, _ = select.select([self._from_child], [], [], timeout)
        if not ready:
            raise TimeoutError("child did not answer")
        return self._from_child.readline()

    def result(self, timeout: float = 60.0):
        line = self._readline(timeout)
        os.waitpid(self.pid, 0)
        obj = json.loads(line) if line else {"error": "child exited without a result"}
        if "error" in obj:
            raise RuntimeError("child failed:\n" + obj["error"])
        return obj["result"]

    def signal(self, sig=signal.SIGTERM) -> None:
        os.kill(self.pid, sig)

    def kill(self) -> None:
        try:
            os.kill(self.pid, signal.SIGKILL)
            os.waitpid(self.pid, 0)
        except (ProcessLookupError, ChildProcessError):
            pass


def run_in_netns(fn, *args, timeout: float = 60.0):
    child = NsChild(lambda ctl, *a: fn(*a), *args)
    try:
        return child.result(timeout)
    finally:
        child.kill()


def wait_port(addr: str, port: int, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection((addr, port), 0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
