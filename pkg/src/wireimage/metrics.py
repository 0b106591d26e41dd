"""Bias formulas, trace extraction and aggregation over paired-flow results.

All functions are pure.  Result objects are duck-typed: anything with the
attributes of :class:`wireimage.flowpair.PairResult` works.

Sign conventions: a positive throughput bias or RTT bias favours UDP.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

SYN = 0x02
ACK = 0x10
SEQ_MOD = 1 << 32


class HandshakeIncomplete(ValueError):
    pass


@dataclass(frozen=True)
class PacketRecord:
    """One packet as seen at a capture point.

    ``direction`` is ``"out"`` for packets sent by the capturing host and
    ``"in"`` for packets it received.
    """

    ts_us: int
    direction: str
    seq: int
    payload_len: int
    flags: int


def _positive(name: str, x: float) -> float:
    if not (isinstance(x, (int, float)) and math.isfinite(x) and x > 0):
        raise ValueError(f"{name} must be a positive finite number, got {x!r}")
    return float(x)


def tp_bias(tp_udp: float, tp_tcp: float) -> float:
    """Relative throughput difference in percent of the smaller throughput."""
    u, t = _positive("tp_udp", tp_udp), _positive("tp_tcp", tp_tcp)
    return (u - t) / min(t, u) * 100.0


def rtt_bias(rtt_tcp: float, rtt_udp: float) -> float:
    """Relative initial-RTT difference; positive when UDP is faster."""
    t, u = _positive("rtt_tcp", rtt_tcp), _positive("rtt_udp", rtt_udp)
    return (t - u) / min(t, u) * 100.0


def loss_pct(trace: Sequence[PacketRecord]) -> float:
    """Percentage of flow payload retransmitted, from a sender-side trace.

    Every byte that is sent again counts once per re-send; the denominator is
    the number of distinct payload bytes.  Sequence numbers may wrap.
    """
    if not trace:
        raise ValueError("empty trace")
    data = [r for r in trace if r.direction == "out" and r.payload_len > 0]
    if not data:
        return 0.0
    base = data[0].seq
    starts: list[int] = []  # disjoint, sorted [start, end) intervals
    ends: list[int] = []
    resent = 0
    for r in data:
        off = (r.seq - base) % SEQ_MOD
        if off >= SEQ_MOD // 2:
            off -= SEQ_MOD
        lo, hi = off, off + r.payload_len
        i = bisect.bisect_right(ends, lo)
        j = i
        new_lo, new_hi = lo, hi
        while j < len(starts) and starts[j] <= hi:
            resent += max(0, min(hi, ends[j]) - max(lo, starts[j]))
            new_lo = min(new_lo, starts[j])
            new_hi = max(new_hi, ends[j])
            j += 1
        starts[i:j] = [new_lo]
        ends[i:j] = [new_hi]
    distinct = sum(e - s for s, e in zip(starts, ends))
    return resent / distinct * 100.0


def initial_rtt(trace: Sequence[PacketRecord]) -> float:
    """Milliseconds from the first SYN sent to the first SYN+ACK received."""
    t_syn = None
    for r in trace:
        if r.direction == "out" and r.flags & SYN and not r.flags & ACK:
            t_syn = r.ts_us
            break
    if t_syn is None:
        raise HandshakeIncomplete("no SYN in trace")
    for r in trace:
        if r.direction == "in" and r.flags & SYN and r.flags & ACK and r.ts_us >= t_syn:
            return (r.ts_us - t_syn) / 1000.0
    raise HandshakeIncomplete("no SYN+ACK after the first SYN")


@dataclass(frozen=True)
class Attempt:
    tcp_ok: bool
    udp_ok: bool


def _attempt(a) -> Attempt:
    if isinstance(a, Attempt):
        return a
    if isinstance(a, Mapping):
        return Attempt(bool(a["tcp_ok"]), bool(a["udp_ok"]))
    if hasattr(a, "tcp_ok"):
        return Attempt(bool(a.tcp_ok), bool(a.udp_ok))
    tcp_ok, udp_ok = a
    return Attempt(bool(tcp_ok), bool(udp_ok))


def conn_bias(attempts: Iterable) -> float:
    """UDP success fraction minus TCP success fraction, in [-1, +1]."""
    atts = [_attempt(a) for a in attempts]
    if not atts:
        raise ValueError("conn_bias needs at least one attempt")
    n = len(atts)
    return sum(a.udp_ok for a in atts) / n - sum(a.tcp_ok for a in atts) / n


def classify_blocked(history: Iterable) -> bool:
    """True when UDP never succeeded but TCP did at least once."""
    atts = [_attempt(a) for a in history]
    return not any(a.udp_ok for a in atts) and any(a.tcp_ok for a in atts)


def median(values: Sequence[float]) -> float | None:
    return statistics.median(values) if values else None


def pair_attempt(result) -> Attempt:
    return Attempt(bool(result.tcp.success), bool(result.udp.success))


def _biased(results) -> list:
    return [r for r in results if r.tp_bias is not None and r.rtt_bias is not None]


# --- per-path matrix ---------------------------------------------------------

@dataclass(frozen=True)
class PathSummary:
    src: str
    dst: str
    conn_bias: float
    median_tp_bias: float | None
    median_rtt_bias: float | None
    n_pairs: int

    def __post_init__(self) -> None:
        if not -1.0 - 1e-12 <= self.conn_bias <= 1.0 + 1e-12:
            raise ValueError(f"conn_bias out of range: {self.conn_bias}")


@dataclass
class PathMatrix:
    """Per-(src, dst) summaries plus a node order grouped by region label."""

    nodes: list[str]
    cells: dict[tuple[str, str], PathSummary] = field(default_factory=dict)

    def grid(self, metric: str = "conn_bias") -> list[list[float | None]]:
        """Rows indexed by src, columns by dst, in ``nodes`` order."""
        return [[getattr(self.cells[(s, d)], metric) if (s, d) in self.cells else None
                 for d in self.nodes] for s in self.nodes]

    def rows(self) -> list[dict]:
        return [vars(self.cells[k]).copy() for k in sorted(self.cells, key=self._key)]

    def _key(self, k: tuple[str, str]) -> tuple[int, int]:
        return self.nodes.index(k[0]), self.nodes.index(k[1])


def aggregate_matrix(results: Iterable, regions: Mapping[str, str] | None = None,
                     region_order: Sequence[str] | None = None) -> PathMatrix:
    by_path: dict[tuple[str, str], list] = defaultdict(list)
    for r in results:
        by_path[(r.source, r.spec.destination)].append(r)
    regions = regions or {}
    order = list(region_order or sorted(set(regions.values())))

    def node_key(n: str) -> tuple[int, str]:
        reg = regions.get(n)
        return (order.index(reg) if reg in order else len(order), n)

    nodes = sorted({n for k in by_path for n in k}, key=node_key)
    matrix = PathMatrix(nodes)
    for (src, dst), rs in by_path.items():
        ok = _biased(rs)
        matrix.cells[(src, dst)] = PathSummary(
            src, dst,
            conn_bias([pair_attempt(r) for r in rs]),
            median([r.tp_bias for r in ok]),
            median([r.rtt_bias for r in ok]),
            len(rs),
        )
    return matrix


# --- grouped summaries -------------------------------------------------------

@dataclass(frozen=True)
class GroupedSummary:
    dimension: str  # "throughput" (kB/s) or "latency" (ms)
    threshold: float
    side: str  # "below" (includes equality) or "above"
    n_flows: int
    median_bias: float | None


def split_summary(results: Iterable, tp_threshold: float = 200.0,
                  rtt_threshold: float = 50.0) -> list[GroupedSummary]:
    """Median biases split by the native TCP flow's throughput and initial RTT.

    Samples exactly at a threshold belong to the lower group.
    """
    ok = _biased(results)
    out = []
    for dim, thr, value, bias in (
        ("throughput", tp_threshold, lambda r: r.tcp.throughput, lambda r: r.tp_bias),
        ("latency", rtt_threshold, lambda r: r.tcp.initial_rtt, lambda r: r.rtt_bias),
    ):
        below = [bias(r) for r in ok if value(r) <= thr]
        above = [bias(r) for r in ok if value(r) > thr]
        out.append(GroupedSummary(dim, thr, "below", len(below), median(below)))
        out.append(GroupedSummary(dim, thr, "above", len(above), median(above)))
    return out


def blocked_by_port(results: Iterable) -> dict[int, dict]:
    """Per destination port: how many (src, dst, port) tuples look UDP-blocked."""
    tuples: dict[tuple[str, str, int], list[Attempt]] = defaultdict(list)
    for r in results:
        tuples[(r.source, r.spec.destination, r.spec.port)].append(pair_attempt(r))
    per_port: dict[int, dict] = {}
    for (_s, _d, port), atts in sorted(tuples.items(), key=lambda kv: kv[0][2]):
        row = per_port.setdefault(port, {"port": port, "tuples": 0, "blocked": 0})
        row["tuples"] += 1
        row["blocked"] += classify_blocked(atts)
    for row in per_port.values():
        row["blocked_pct"] = 100.0 * row["blocked"] / row["tuples"]
    return per_port


# --- CDFs --------------------------------------------------------------------

def export_cdf(values: Iterable[float]) -> list[tuple[float, float]]:
    """Sorted (value, fraction of samples <= value) steps."""
    counts = Counter(float(v) for v in values)
    n = sum(counts.values())
    series, seen = [], 0
    for v in sorted(counts):
        seen += counts[v]
        series.append((v, seen / n))
    return series


def cdf_quantile(series: Sequence[tuple[float, float]], q: float) -> float:
    """Smallest value whose cumulative fraction reaches ``q``."""
    if not series:
        raise ValueError("empty CDF")
    for v, frac in series:
        if frac >= q - 1e-12:
            return v
    return series[-1][0]


def to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    if not rows and not columns:
        return ""
    columns = list(columns or rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue()
