"""A small sans-IO TCP endpoint for the in-process path emulator.

It speaks real IPv4/TCP bytes (MSS, window-scale and SACK options, valid
checksums) and implements slow start from a configurable initial window,
congestion avoidance, SACK-based loss recovery in the style of RFC 6675
(NewReno when the peer does not permit SACK) and an RFC 6298 retransmission
timer.  No delayed ACKs, no timestamps.

Callers feed packets and clock ticks in and drain emitted packets with
:meth:`TcpEndpoint.take_output`; the endpoint never touches a socket.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

from .. import packets as pk
from ..metrics import PacketRecord

MOD = 1 << 32
HALF = 1 << 31


@dataclass(frozen=True)
class TcpParams:
    mtu: int = 1500
    iw_segments: int = 10
    wscale: int = 7
    rcv_buffer: int = 1 << 22
    rto_initial: float = 1.0
    rto_min: float = 0.2
    rto_max: float = 60.0
    max_syn_retries: int = 6
    sack: bool = True

    @property
    def mss(self) -> int:
        return self.mtu - pk.IPV4_HEADER - pk.TCP_HEADER


class TcpEndpoint:
    def __init__(self, local: str, lport: int, remote: str, rport: int,
                 params: TcpParams, isn: int, *, passive: bool = False) -> None:
        self.local, self.lport, self.remote, self.rport = local, lport, remote, rport
        self.p = params
        self.isn = isn % MOD
        self.state = "listen" if passive else "closed"
        self.now = 0.0
        self.out: list[bytes] = []
        self.trace: list[PacketRecord] = []
        self._ident = 0

        # send side, sequence numbers relative to isn (SYN = 0)
        self.data = bytearray()
        self.una = self.nxt = self.max_sent = 0
        self.fin_queued = False
        self.peer_mss = 536
        self.peer_wscale: int | None = None
        self.ws_ok = False
        self.snd_wnd = 65535
        self.cwnd = 0
        self.ssthresh = float("inf")
        self.dupacks = 0
        self.in_recovery = False
        self.recover = 0
        self.srtt: float | None = None
        self.rttvar = 0.0
        self.rto = params.rto_initial
        self.timer_at: float | None = None
        self.probe: tuple[int, float] | None = None  # (end seq, send time)
        self.syn_retries = 0
        self.retransmitted_syn = False
        self.peer_sack = False
        self.sack_ok = False
        self.sacked: list[list[int]] = []  # disjoint sorted [start, end) ranges above una
        self.high_rxt = 0

        # receive side, relative to the peer's isn
        self.irs = 0
        self.rcv_nxt = 0
        self.ooo: dict[int, bytes] = {}
        self.ooo_ranges: list[list[int]] = []  # merged [start, end) of self.ooo
        self.last_ooo = 0
        self.fin_at: int | None = None
        self.received = bytearray()

        self.established_at: float | None = None
        self.peer_closed = False
        self.reset = False
        self.failed = False

    # -- public API -------------------------------------------------------

    @property
    def smss(self) -> int:
        return min(self.p.mss, self.peer_mss)

    @property
    def established(self) -> bool:
        return self.established_at is not None

    @property
    def deadline(self) -> float | None:
        return self.timer_at

    @property
    def data_end(self) -> int:
        return 1 + len(self.data)

    @property
    def all_acked(self) -> bool:
        return self.fin_queued and self.una >= self.data_end + 1

    def open(self, now: float) -> None:
        self.now = now
        self.state = "syn-sent"
        self._send_syn()

    def write(self, data: bytes) -> None:
        if self.fin_queued:
            raise RuntimeError("write after close")
        self.data += data
        if self.state == "established":
            self._send_pending()

    def close(self) -> None:
        self.fin_queued = True
        if self.state == "established":
            self._send_pending()

    def abort(self, *, send_rst: bool = True) -> None:
        if send_rst and self.state in ("established", "syn-rcvd"):
            self._emit(pk.RST | pk.ACK, self.nxt)
        self.state = "closed"
        self.timer_at = None

    def take_output(self) -> list[bytes]:
        out, self.out = self.out, []
        return out

    def poll(self, now: float) -> None:
        self.now = now
        if self.timer_at is not None and now >= self.timer_at:
            self.timer_at = None
            self._on_timeout()

    def receive(self, packet: bytes, now: float) -> None:
        self.now = now
        ip = pk.parse_ip(packet)
        seg = pk.parse_tcp(ip.payload)
        self.trace.append(PacketRecord(int(round(now * 1e6)), "in", seg.seq,
                                       len(seg.payload), seg.flags))
        if self.state == "closed":
            return
        if seg.flags & pk.RST:
            self.reset = True
            self.state = "closed"
            self.timer_at = None
            return
        if self.state == "listen":
            if seg.flags & pk.SYN and not seg.flags & pk.ACK:
                self._accept_syn(seg)
            return
        if self.state == "syn-sent":
            if seg.flags & pk.SYN and seg.flags & pk.ACK:
                self._on_synack(seg)
            return
        if seg.flags & pk.SYN:
            # duplicate SYN or SYN+ACK: our reply was lost
            if self.state == "syn-rcvd":
                self._emit_synack()
            else:
                self._emit_ack()
            return
        if self.state == "syn-rcvd":
            if seg.flags & pk.ACK and self._unwrap_ack(seg.ack) == 1:
                self._become_established()
                self._sample_rtt_handshake()
            else:
                return
        self._on_ack(seg)
        self._on_data(seg)

    # -- handshake --------------------------------------------------------

    def _syn_options(self, reply_ws: bool = True, reply_sack: bool = True) -> bytes:
        return pk.tcp_options(self.p.mss, self.p.wscale if reply_ws else None,
                              sack_permitted=self.p.sack and reply_sack)

    def _send_syn(self) -> None:
        self._emit(pk.SYN, 0, options=self._syn_options())
        self.max_sent = max(self.max_sent, 1)
        self.timer_at = self.now + self.rto
        self._syn_sent_at = self.now

    def _accept_syn(self, seg: pk.TcpSegment) -> None:
        self.irs = seg.seq
        self.rcv_nxt = 1
        self._peer_options(seg)
        self.state = "syn-rcvd"
        self._syn_sent_at = self.now
        self._emit_synack()
        self.max_sent = 1
        self.timer_at = self.now + self.rto

    def _emit_synack(self) -> None:
        self._emit(pk.SYN | pk.ACK, 0, options=self._syn_options(self.peer_wscale is not None,
                                                                  self.peer_sack))

    def _peer_options(self, seg: pk.TcpSegment) -> None:
        if seg.mss:
            self.peer_mss = seg.mss
        self.peer_wscale = seg.wscale
        self.peer_sack = seg.sack_ok
        self.snd_wnd = seg.window

    def _on_synack(self, seg: pk.TcpSegment) -> None:
        if self._unwrap_ack(seg.ack) != 1:
            return
        self.irs = seg.seq
        self.rcv_nxt = 1
        self._peer_options(seg)
        self.una = self.nxt = 1
        self._sample_rtt_handshake()
        self._become_established()
        self._emit_ack()
        self._send_pending()

    def _become_established(self) -> None:
        self.state = "established"
        self.established_at = self.now
        self.ws_ok = self.peer_wscale is not None
        self.sack_ok = self.p.sack and self.peer_sack
        self.una = max(self.una, 1)
        self.nxt = max(self.nxt, 1)
        self.cwnd = self.p.iw_segments * self.smss
        self.timer_at = None
        self.rto = self._computed_rto()

    def _sample_rtt_handshake(self) -> None:
        if not self.retransmitted_syn:
            self._rtt_sample(self.now - self._syn_sent_at)

    # -- sequence helpers --------------------------------------------------

    def _unwrap_ack(self, ack: int) -> int:
        rel = (ack - self.isn) % MOD
        diff = (rel - self.una) % MOD
        if diff >= HALF:
            diff -= MOD
        return self.una + diff

    def _unwrap_seq(self, seq: int) -> int:
        rel = (seq - self.irs) % MOD
        diff = (rel - self.rcv_nxt) % MOD
        if diff >= HALF:
            diff -= MOD
        return self.rcv_nxt + diff

    def _window_field(self, syn: bool) -> int:
        if syn or not self.ws_ok:
            return min(65535, self.p.rcv_buffer)
        return min(65535, self.p.rcv_buffer >> self.p.wscale)

    def _emit(self, flags: int, seq_rel: int, payload: bytes = b"", options: bytes = b"") -> None:
        ack = (self.irs + self.rcv_nxt) % MOD if flags & pk.ACK else 0
        if flags & pk.ACK and not flags & pk.SYN and self.sack_ok and self.ooo:
            options = pk.tcp_options(sack=self._sack_blocks())
        seq = (self.isn + seq_rel) % MOD
        self._ident += 1
        pkt = pk.tcp_packet(self.local, self.remote, self.lport, self.rport, seq, ack, flags,
                            window=self._window_field(bool(flags & pk.SYN)),
                            options=options, payload=payload, ident=self._ident)
        self.out.append(pkt)
        self.trace.append(PacketRecord(int(round(self.now * 1e6)), "out", seq, len(payload), flags))

    def _emit_ack(self) -> None:
        self._emit(pk.ACK, self.nxt)

    # -- sending ------------------------------------------------------------

    def _segment_at(self, seq: int, limit: int | None = None) -> int:
        """Emit the segment starting at ``seq``; returns sequence space used."""
        if seq < self.data_end:
            n = min(self.smss, self.data_end - seq, limit or self.smss)
            flags = pk.ACK | (pk.PSH if seq + n == self.data_end else 0)
            self._emit(flags, seq, bytes(self.data[seq - 1:seq - 1 + n]))
            return n
        if self.fin_queued and seq == self.data_end:
            self._emit(pk.FIN | pk.ACK, seq)
            return 1
        return 0

    def _send_pending(self) -> None:
        if self.state != "established":
            return
        if self.in_recovery and self.sack_ok:
            self._send_recovery()
            return
        while True:
            if self.nxt < self.max_sent:
                # after a timeout: skip what the receiver already holds
                for lo, hi in self.sacked:
                    if lo <= self.nxt < hi:
                        self.nxt = hi
                        break
            wnd = min(self.cwnd, self.snd_wnd)
            flight = self.nxt - self.una
            if self.nxt < self.data_end:
                n = min(self.smss, self.data_end - self.nxt)
                if flight + n > wnd and not (flight == 0 and wnd > 0):
                    break
            elif not (self.fin_queued and self.nxt == self.data_end):
                break
            seq = self.nxt
            if seq < self.max_sent and self.probe and seq < self.probe[0]:
                self.probe = None
            used = self._segment_at(seq)
            if used == 0:
                break
            if seq >= self.max_sent and self.probe is None:
                self.probe = (seq + used, self.now)
            self.nxt += used
            self.max_sent = max(self.max_sent, self.nxt)
            if self.timer_at is None:
                self.timer_at = self.now + self.rto

    # -- SACK scoreboard ----------------------------------------------------

    def _add_ooo_range(self, lo: int, hi: int) -> None:
        i = bisect.bisect_left(self.ooo_ranges, [lo, lo])
        if i and self.ooo_ranges[i - 1][1] >= lo:
            i -= 1
        j = i
        while j < len(self.ooo_ranges) and self.ooo_ranges[j][0] <= hi:
            lo, hi = min(lo, self.ooo_ranges[j][0]), max(hi, self.ooo_ranges[j][1])
            j += 1
        self.ooo_ranges[i:j] = [[lo, hi]]

    def _sack_blocks(self) -> list[tuple[int, int]]:
        ranges = list(self.ooo_ranges)
        # the block holding the latest arrival first, then the highest ones
        latest = self.last_ooo
        ranges.sort(key=lambda r: (not r[0] <= latest < r[1], -r[0]))
        return [((self.irs + a) % MOD, (self.irs + b) % MOD) for a, b in ranges[:3]]

    def _update_scoreboard(self, blocks: Sequence[tuple[int, int]]) -> bool:
        """Merge SACK blocks; returns True when they carried new information."""
        before = self._sacked_bytes()
        for left, right in blocks:
            lo, hi = self._unwrap_ack(left), self._unwrap_ack(right)
            lo, hi = max(lo, self.una), min(hi, self.max_sent)
            if hi <= lo:
                continue
            merged = []
            for a, b in self.sacked:
                if b < lo or a > hi:
                    merged.append([a, b])
                else:
                    lo, hi = min(lo, a), max(hi, b)
            merged.append([lo, hi])
            merged.sort()
            self.sacked = merged
        return self._sacked_bytes() > before

    def _trim_scoreboard(self) -> None:
        self.sacked = [[max(a, self.una), b] for a, b in self.sacked if b > self.una]

    def _sacked_bytes(self) -> int:
        return sum(b - a for a, b in self.sacked)

    def _holes(self) -> list[tuple[int, int]]:
        """Unsacked ranges below the highest SACKed byte (presumed lost)."""
        holes, at = [], self.una
        for a, b in self.sacked:
            if a > at:
                holes.append((at, a))
            at = max(at, b)
        return holes

    def _pipe(self, holes: list[tuple[int, int]] | None = None) -> int:
        """Bytes presumed in flight: outstanding minus SACKed minus lost-not-resent."""
        lost = retx = 0
        for a, b in holes if holes is not None else self._holes():
            lost += b - a
            retx += max(0, min(b, self.high_rxt) - a)
        return (self.max_sent - self.una) - self._sacked_bytes() - lost + retx

    def _next_hole(self) -> tuple[int, int] | None:
        for a, b in self._holes():
            start = max(a, self.high_rxt)
            if start < b:
                return start, b - start
        return None

    def _send_recovery(self) -> None:
        smss = self.smss
        holes = self._holes()
        pipe = self._pipe(holes)
        k = 0
        while pipe + smss <= self.cwnd:
            while k < len(holes) and max(holes[k][0], self.high_rxt) >= holes[k][1]:
                k += 1
            if k < len(holes):
                seq = max(holes[k][0], self.high_rxt)
                used = self._segment_at(seq, holes[k][1] - seq)
                if used == 0:
                    break
                self.high_rxt = seq + used
                pipe += used
                continue
            # no holes left: new data, within the receiver's window
            if self.nxt < self.max_sent:
                self.nxt = self.max_sent
            if self.nxt - self.una + smss > self.snd_wnd and self.nxt < self.data_end:
                break
            used = self._segment_at(self.nxt)
            if used == 0:
                break
            self.nxt += used
            self.max_sent = max(self.max_sent, self.nxt)
            pipe += used
        if self.timer_at is None and self.una < self.max_sent:
            self.timer_at = self.now + self.rto

    def _retransmit_una(self) -> None:
        if self.probe and self.una < self.probe[0]:
            self.probe = None
        self._segment_at(self.una)
        if self.timer_at is None:
            self.timer_at = self.now + self.rto

    def _on_ack(self, seg: pk.TcpSegment) -> None:
        if not seg.flags & pk.ACK:
            return
        ack = self._unwrap_ack(seg.ack)
        if ack > self.max_sent:
            return
        wnd = seg.window << (self.peer_wscale or 0) if self.ws_ok else seg.window
        window_changed = wnd != self.snd_wnd
        self.snd_wnd = wnd
        smss = self.smss
        new_sack = self.sack_ok and bool(seg.sack) and self._update_scoreboard(seg.sack)
        if ack > self.una:
            acked = ack - self.una
            self.una = ack
            self._trim_scoreboard()
            if self.nxt < self.una:
                self.nxt = self.una
            if self.high_rxt < self.una:
                self.high_rxt = self.una
            if self.probe and ack >= self.probe[0]:
                self._rtt_sample(self.now - self.probe[1])
                self.probe = None
            if self.in_recovery:
                if ack >= self.recover:
                    self.in_recovery = False
                    self.cwnd = self.ssthresh
                elif self.sack_ok:
                    pass  # holes are repaired by _send_recovery
                else:
                    self._retransmit_una()
                    self.cwnd = max(self.cwnd - acked + smss, smss)
            elif self.cwnd < self.ssthresh:
                self.cwnd += min(acked, smss)
            else:
                self.cwnd += max(1, smss * smss // self.cwnd)
            self.dupacks = 0
            self.rto = self._computed_rto()
            self.timer_at = self.now + self.rto if self.una < self.max_sent else None
        elif (ack == self.una and not seg.payload and not seg.flags & pk.FIN
              and self.una < self.max_sent and (not window_changed or new_sack)):
            self.dupacks += 1
            if self.dupacks == 3 and not self.in_recovery:
                flight = self.max_sent - self.una
                self.ssthresh = max(flight // 2, 2 * smss)
                self.recover = self.max_sent
                self.in_recovery = True
                if self.sack_ok:
                    self.cwnd = self.ssthresh
                    self.high_rxt = self.una
                    self.nxt = max(self.nxt, self.max_sent)
                    # the first hole goes out regardless of pipe
                    hole = self._next_hole() or (self.una, self.smss)
                    self.high_rxt = hole[0] + self._segment_at(hole[0], hole[1])
                else:
                    self._retransmit_una()
                    self.cwnd = self.ssthresh + 3 * smss
            elif self.in_recovery and not self.sack_ok:
                self.cwnd += smss
        self._send_pending()

    def _on_timeout(self) -> None:
        if self.state in ("syn-sent", "syn-rcvd"):
            self.syn_retries += 1
            self.retransmitted_syn = True
            if self.syn_retries > self.p.max_syn_retries:
                self.failed = True
                self.state = "closed"
                return
            self.rto = min(self.rto * 2, self.p.rto_max)
            if self.state == "syn-sent":
                self._emit(pk.SYN, 0, options=self._syn_options())
            else:
                self._emit_synack()
            self.timer_at = self.now + self.rto
            return
        if self.state != "established" or self.una >= self.max_sent:
            return
        flight = self.max_sent - self.una
        self.ssthresh = max(flight // 2, 2 * self.smss)
        self.cwnd = self.smss
        self.in_recovery = False
        self.recover = self.max_sent
        self.dupacks = 0
        self.nxt = self.una
        self.high_rxt = self.una
        self.probe = None
        self.rto = min(self.rto * 2, self.p.rto_max)
        self._send_pending()
        if self.timer_at is None:
            self.timer_at = self.now + self.rto

    def _rtt_sample(self, r: float) -> None:
        if self.srtt is None:
            self.srtt, self.rttvar = r, r / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - r)
            self.srtt = 0.875 * self.srtt + 0.125 * r

    def _computed_rto(self) -> float:
        if self.srtt is None:
            return self.p.rto_initial
        return min(self.p.rto_max, max(self.p.rto_min, self.srtt + 4 * self.rttvar))

    # -- receiving ----------------------------------------------------------

    def _on_data(self, seg: pk.TcpSegment) -> None:
        if not seg.payload and not seg.flags & pk.FIN:
            return
        seq = self._unwrap_seq(seg.seq)
        if seg.payload:
            end = seq + len(seg.payload)
            if seq <= self.rcv_nxt < end:
                self.received += seg.payload[self.rcv_nxt - seq:]
                self.rcv_nxt = end
                self._drain_ooo()
            elif seq > self.rcv_nxt and len(self.ooo.get(seq, b"")) < len(seg.payload):
                self.ooo[seq] = seg.payload
                self.last_ooo = seq
                self._add_ooo_range(seq, end)
        if seg.flags & pk.FIN:
            self.fin_at = seq + len(seg.payload)
        if self.fin_at is not None and self.fin_at == self.rcv_nxt and not self.peer_closed:
            self.rcv_nxt += 1
            self.peer_closed = True
        self._emit_ack()

    def _drain_ooo(self) -> None:
        while self.ooo_ranges and self.ooo_ranges[0][0] <= self.rcv_nxt:
            _, hi = self.ooo_ranges.pop(0)
            for start in sorted(k for k in self.ooo if k < hi):
                chunk = self.ooo.pop(start)
                end = start + len(chunk)
                if end > self.rcv_nxt:
                    self.received += chunk[self.rcv_nxt - start:]
                    self.rcv_nxt = end
