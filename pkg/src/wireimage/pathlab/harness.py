"""Named scenarios: a ground-truth profile, a workload, and the checks that must hold.

``harness_run`` drives the workload through the emulator and returns a
:class:`HarnessReport` holding the observed results next to the profile.
Workloads:

``pairs``  a flow-pair campaign toward one destination
``race``   pairs plus connection races (blackhole detection)
``rate``   calibrate on a neutral path, then police UDP at a fraction of TCP
``nat``    idle-gap sweep at the impairment point plus a delayed-response pair
``probe``  TTL-199 probes of every protocol and an MTU sweep
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Callable

from .. import metrics, prober
from ..flowpair import CampaignConfig, FlowSpec, PairResult, RaceCache, race_connect, run_campaign, run_pair
from ..flowpair import TCP as NATIVE_TCP
from ..flowpair import UDP as UDP_TUNNELED
from .net import EmulatedPairTransport, PathConfig
from .probes import EmulatedProbeNetwork
from .profile import ImpairmentProfile, PacketMeta, PathState, transit

DEST = "10.0.1.1"
PORT = 443


@dataclass(frozen=True)
class Scenario:
    name: str
    profile: ImpairmentProfile
    workload: str
    params: dict = field(default_factory=dict)
    description: str = ""


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    expected: str
    observed: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: expected {self.expected}, observed {self.observed}"


@dataclass
class HarnessReport:
    scenario: Scenario
    seed: int
    checks: list[Check] = field(default_factory=list)
    observed: dict = field(default_factory=dict)
    pairs: list[PairResult] = field(default_factory=list)
    probes: list[prober.ProbeResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed: bool, expected: str, observed: str) -> None:
        self.checks.append(Check(name, bool(passed), expected, observed))

    def to_dict(self) -> dict:
        return {
            "kind": "lab-report", "scenario": self.scenario.name, "workload": self.scenario.workload,
            "seed": self.seed, "ground_truth": self.scenario.profile.to_dict(),
            "params": self.scenario.params, "observed": self.observed, "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "expected": c.expected,
                        "observed": c.observed} for c in self.checks],
        }

    def text(self) -> str:
        lines = [f"scenario {self.scenario.name} (seed {self.seed}): "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        lines += ["  " + c.line() for c in self.checks]
        return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.2f}"


def _campaign(transport: EmulatedPairTransport, pairs: dict[int, int],
              delay: float = 1.0) -> list[PairResult]:
    cfg = CampaignConfig(destinations=[DEST], ports=(PORT,), pairs_per_size=pairs,
                         inter_pair_delay=delay)
    return run_campaign(cfg, transport)


def _biases(results: list[PairResult]) -> tuple[list[float], list[float]]:
    ok = [r for r in results if r.tp_bias is not None and r.rtt_bias is not None]
    return [r.tp_bias for r in ok], [r.rtt_bias for r in ok]


def _pairs(sc: Scenario, seed: int, rep: HarnessReport) -> None:
    p = sc.params
    tr = EmulatedPairTransport(sc.profile, seed=seed, path=p.get("path", PathConfig()))
    res = _campaign(tr, p.get("pairs", {1: 20, 3: 20, 30: 20}))
    rep.pairs = res
    tp, rtt = _biases(res)
    med_tp = metrics.median([abs(x) for x in tp])
    med_rtt = metrics.median(rtt)
    med_abs_rtt = metrics.median([abs(x) for x in rtt])
    rep.observed.update(n_pairs=len(res), n_biased=len(tp), median_abs_tp_bias=med_tp,
                        median_tp_bias=metrics.median(tp), median_rtt_bias=med_rtt,
                        median_abs_rtt_bias=med_abs_rtt,
                        conn_bias=metrics.conn_bias(metrics.pair_attempt(r) for r in res),
                        drops=tr.drops(DEST))
    if "max_abs_bias" in p:
        tol = p["max_abs_bias"]
        rep.check("median |tp_bias|", med_tp is not None and med_tp <= tol, f"<= {tol}", _fmt(med_tp))
        rep.check("median |rtt_bias|", med_abs_rtt is not None and med_abs_rtt <= tol,
                  f"<= {tol}", _fmt(med_abs_rtt))
    if "expect_rtt_bias" in p:
        want, tol = p["expect_rtt_bias"], p.get("rtt_tolerance", 10.0)
        rep.check("median rtt_bias", med_rtt is not None and abs(med_rtt - want) <= tol,
                  f"{want} +/- {tol}", _fmt(med_rtt))
    if "expect_udp_loss_above_tcp" in p:
        ok = [r for r in res if r.both_succeeded]
        u = metrics.median([r.udp.loss_pct for r in ok])
        t = metrics.median([r.tcp.loss_pct for r in ok])
        rep.observed.update(median_udp_loss_pct=u, median_tcp_loss_pct=t)
        rep.check("udp loss > tcp loss", u is not None and t is not None and u > t,
                  "udp > tcp", f"udp {_fmt(u)}, tcp {_fmt(t)}")


def _race(sc: Scenario, seed: int, rep: HarnessReport) -> None:
    p = sc.params
    tr = EmulatedPairTransport(sc.profile, seed=seed)
    res = _campaign(tr, {1: p.get("attempts", 5)})
    rep.pairs = res
    atts = [metrics.pair_attempt(r) for r in res]
    cb = metrics.conn_bias(atts)
    blocked = metrics.classify_blocked(atts)
    cache = RaceCache(ttl=600.0, clock=lambda: tr.now)
    first = race_connect(DEST, PORT, 5.0, dialer=tr, cache=cache, network="lab")
    second = race_connect(DEST, PORT, 5.0, dialer=tr, cache=cache, network="lab")
    rep.observed.update(conn_bias=cb, classify_blocked=blocked, attempts=len(atts),
                        race=first.transport, race_decided_after_s=first.decided_after,
                        race_cached=second.transport, race_cached_used_udp=second.udp is not None,
                        failure_reasons=sorted({r.udp.failure_reason.value for r in res}))
    want = p.get("expect")
    if want == "blocked":
        rep.check("conn_bias", cb == -1.0, "-1.0", f"{cb}")
        rep.check("classify_blocked", blocked and len(atts) >= 5, "true after >= 5 attempts",
                  f"{blocked} after {len(atts)}")
        rep.check("race_connect", first.transport == NATIVE_TCP, NATIVE_TCP, first.transport)
        rep.check("cached race skips UDP", second.cached and second.udp is None
                  and second.transport == NATIVE_TCP, "native-tcp without UDP attempt",
                  f"{second.transport}, udp attempted={second.udp is not None}")
    elif want == "open":
        rep.check("conn_bias", cb == 0.0, "0.0", f"{cb}")
        rep.check("race_connect", first.transport == UDP_TUNNELED, UDP_TUNNELED, first.transport)


def _rate(sc: Scenario, seed: int, rep: HarnessReport) -> None:
    p = sc.params
    runs, per_run = p.get("runs", 10), p.get("pairs_per_run", 3)
    fraction, size = p.get("fraction", 0.5), p.get("size_iw", 300)
    threshold = p.get("threshold", -30.0)
    medians, limits = [], []
    for k in range(runs):
        s = seed * 1000 + k
        cal = run_pair(FlowSpec(DEST, PORT, size), EmulatedPairTransport(ImpairmentProfile(), seed=s))
        if not cal.tcp.success:
            rep.check(f"run {k} calibration", False, "native TCP succeeds", cal.tcp.failure_reason.value)
            continue
        limit = fraction * cal.tcp.throughput
        prof = replace(sc.profile, udp_rate_limit=limit)
        tr = EmulatedPairTransport(prof, seed=s)
        res = _campaign(tr, {size: per_run})
        rep.pairs.extend(res)
        tp = [r.tp_bias if r.tp_bias is not None else float("-inf") for r in res if r.tcp.success]
        med = statistics.median(tp) if tp else None
        medians.append(med)
        limits.append(limit)
    ok = [m is not None and m <= threshold for m in medians]
    rep.observed.update(run_median_tp_bias=medians, udp_rate_limits_kBps=limits)
    rep.check("median tp_bias per run", len(ok) == runs and all(ok),
              f"<= {threshold} in {runs}/{runs} runs", f"{sum(ok)}/{runs} runs: "
              + ", ".join(_fmt(m) for m in medians))


def nat_gap_sweep(profile: ImpairmentProfile, gaps: list[float], seed: int = 0) -> dict[str, dict[float, str]]:
    """For each protocol and idle gap: outbound packet, silence, inbound packet -> verdict."""
    out: dict[str, dict[float, str]] = {}
    for proto in ("udp", "tcp"):
        out[proto] = {}
        for g in gaps:
            st = PathState(seed)
            flow = ("10.0.0.1", 40000, DEST, PORT)
            transit(PacketMeta(proto, 100, "out", 0.0, flow), profile, st)
            d = transit(PacketMeta(proto, 100, "in", g, flow), profile, st)
            out[proto][g] = "delivered" if d.delivered else d.reason
    return out


def _timeout_bracket(verdicts: dict[float, str]) -> tuple[float | None, float | None]:
    alive = [g for g, v in verdicts.items() if v == "delivered"]
    dead = [g for g, v in verdicts.items() if v != "delivered"]
    return (max(alive) if alive else None), (min(dead) if dead else None)


def _nat(sc: Scenario, seed: int, rep: HarnessReport) -> None:
    p = sc.params
    gaps = p.get("gaps", [30.0, 120.0, 179.0, 181.0, 300.0, 1800.0, 3599.0, 3601.0])
    sweep = nat_gap_sweep(sc.profile, gaps, seed)
    brackets = {proto: _timeout_bracket(v) for proto, v in sweep.items()}
    delay = p.get("response_delay", 200.0)
    tr = EmulatedPairTransport(sc.profile, seed=seed, response_delay=delay,
                               stall_timeout=p.get("stall_timeout", delay + 120.0))
    pair = run_pair(FlowSpec(DEST, PORT, 1), tr)
    rep.pairs = [pair]
    drops = tr.drops(DEST)
    rep.observed.update(gap_sweep={k: {str(g): v for g, v in d.items()} for k, d in sweep.items()},
                        idle_timeout_bracket_s={k: list(b) for k, b in brackets.items()},
                        pair_tcp_ok=pair.tcp.success, pair_udp_ok=pair.udp.success,
                        pair_udp_failure=pair.udp.failure_reason.value, drops=drops)
    udp_to, tcp_to = sc.profile.nat_udp_idle_timeout, sc.profile.nat_tcp_idle_timeout
    lo, hi = brackets["udp"]
    rep.check("udp mapping expires after idle", hi is not None and sweep["udp"][hi] == "nat-expired"
              and (lo is None or lo <= udp_to) and hi > udp_to,
              f"expiry between probes around {udp_to}s", f"alive <= {lo}s, expired at {hi}s")
    tlo, thi = brackets["tcp"]
    rep.check("tcp mapping survives the udp timeout", tlo is not None and tlo > udp_to
              and (thi is None or thi > tcp_to), f"alive past {udp_to}s up to {tcp_to}s",
              f"alive <= {tlo}s, expired at {thi}s")
    rep.check(f"pair after {delay:.0f}s idle", pair.tcp.success and not pair.udp.success
              and drops.get("nat-expired", 0) >= 1, "tcp ok, udp fails with nat-expired drops",
              f"tcp {pair.tcp.success}, udp {pair.udp.success} "
              f"({pair.udp.failure_reason.value}), nat-expired drops {drops.get('nat-expired', 0)}")


def _probe(sc: Scenario, seed: int, rep: HarnessReport) -> None:
    p = sc.params
    net = EmulatedProbeNetwork(sc.profile, hops=p.get("hops", 8), seed=seed)
    results = [prober.probe(prober.ProbeSpec(net.target, proto, port), net)
               for proto, port in (("udp", None), ("tcp", 80), ("tcp", 81), ("icmp", None))]
    sweep = prober.mtu_sweep(net.target, net, p.get("sizes", prober.SWEEP_SIZES))
    rep.probes = results + [r for row in sweep.rows for r in (row.udp, row.icmp)]
    rep.observed.update(
        probes={f"{r.spec.protocol}:{r.spec.port}": r.outcome for r in results},
        ttl_exceeded_events=net.ttl_exceeded_events,
        sweep=[row.to_dict() for row in sweep.rows])
    want = p.get("expect")
    if want == "reachable":
        rep.check("ttl-199 probes reach the target", all(r.success for r in results),
                  "target-response for udp, tcp, icmp",
                  ", ".join(f"{r.spec.protocol}:{r.outcome}" for r in results))
        rep.check("no path time-exceeded", net.ttl_exceeded_events == 0, "0",
                  str(net.ttl_exceeded_events))
        rep.check("sweep all ok", all(r.udp_ok and r.icmp_ok for r in sweep.rows),
                  "udp and icmp ok at every size",
                  str([(r.size, r.udp_ok, r.icmp_ok) for r in sweep.rows]))
    elif want == "udp-blocked":
        rep.check("udp fail / icmp pass at every size",
                  all(r.udp_fail_icmp_pass for r in sweep.rows), "flagged at all sizes",
                  str([(r.size, r.udp_fail_icmp_pass) for r in sweep.rows]))
        udp = [r for r in rep.probes if r.spec.protocol == "udp"]
        blocked = prober.classify_blocked_origin(udp, [net.target])
        rep.check("origin classified UDP-blocked", blocked, "true", str(blocked))
    elif want == "large-icmp":
        th = sc.profile.large_icmp_block_threshold
        expect = [(r.size, r.size + 28 > th) for r in sweep.rows]
        got = [(r.size, r.icmp_fail_udp_pass) for r in sweep.rows]
        rep.check("large icmp blocked, udp passes", expect == got, str(expect), str(got))


WORKLOADS: dict[str, Callable[[Scenario, int, HarnessReport], None]] = {
    "pairs": _pairs, "race": _race, "rate": _rate, "nat": _nat, "probe": _probe,
}

SCENARIOS: dict[str, Scenario] = {s.name: s for s in [
    Scenario("neutral", ImpairmentProfile(), "pairs",
             {"pairs": {1: 20, 3: 20, 30: 20}, "max_abs_bias": 5.0},
             "unimpaired path: no throughput or latency bias"),
    Scenario("neutral-race", ImpairmentProfile(), "race", {"attempts": 5, "expect": "open"},
             "unimpaired path: both transports connect, racing prefers UDP"),
    Scenario("udp-blackhole", ImpairmentProfile(udp_block=True), "race",
             {"attempts": 5, "expect": "blocked"},
             "all UDP dropped: conn_bias -1, blocked classification, racing falls back"),
    Scenario("udp-ratelimit", ImpairmentProfile(), "rate",
             {"runs": 10, "pairs_per_run": 3, "fraction": 0.5, "size_iw": 300, "threshold": -30.0},
             "UDP policed at half the calibrated TCP throughput (token bucket, 1 s depth)"),
    Scenario("udp-latency", ImpairmentProfile(extra_latency_udp=20.0), "pairs",
             {"pairs": {1: 20}, "expect_rtt_bias": -50.0, "rtt_tolerance": 10.0},
             "+20 ms on outbound UDP over a 40 ms RTT path"),
    Scenario("udp-loss", ImpairmentProfile(loss_rate_udp=0.02), "pairs",
             {"pairs": {30: 10}, "expect_udp_loss_above_tcp": True},
             "2% random UDP loss shows up in the tunneled flow's retransmissions"),
    Scenario("nat-timeout", ImpairmentProfile(nat_udp_idle_timeout=180.0, nat_tcp_idle_timeout=3600.0),
             "nat", {"response_delay": 200.0},
             "NAT idle timeouts of 3 minutes for UDP and 60 minutes for TCP"),
    Scenario("neutral-probe", ImpairmentProfile(), "probe", {"expect": "reachable"},
             "TTL-199 probes and MTU sweep over an unimpaired 8-hop path"),
    Scenario("udp-blocked-probe", ImpairmentProfile(udp_block=True), "probe",
             {"expect": "udp-blocked"}, "MTU sweep on a UDP-blocking access network"),
    Scenario("large-icmp-block", ImpairmentProfile(large_icmp_block_threshold=1000), "probe",
             {"expect": "large-icmp"}, "ICMP packets over 1000 bytes dropped"),
]}


def harness_run(scenario: Scenario | str, seed: int = 0, **overrides) -> HarnessReport:
    """Run a scenario (by name or object); ``overrides`` replace workload params."""
    if isinstance(scenario, str):
        if scenario not in SCENARIOS:
            raise KeyError(f"unknown scenario {scenario!r}; available: {', '.join(SCENARIOS)}")
        scenario = SCENARIOS[scenario]
    if scenario.workload not in WORKLOADS:
        raise ValueError(f"unknown workload {scenario.workload!r}")
    if overrides:
        scenario = replace(scenario, params={**scenario.params, **overrides})
    rep = HarnessReport(scenario, seed)
    WORKLOADS[scenario.workload](scenario, seed, rep)
    return rep
