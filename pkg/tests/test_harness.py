import json
from dataclasses import replace

import pytest

from wireimage.pathlab import ImpairmentProfile
from wireimage.pathlab.harness import SCENARIOS, Scenario, harness_run, nat_gap_sweep

FAST = [n for n in SCENARIOS if n not in ("udp-ratelimit", "neutral")]


@pytest.mark.parametrize("name", FAST)
def test_scenario_passes(name):
    rep = harness_run(name)
    assert rep.checks and rep.passed, rep.text()
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["kind"] == "lab-report" and d["scenario"] == name and d["passed"]
    assert d["ground_truth"] == SCENARIOS[name].profile.to_dict()


def test_reports_are_deterministic():
    a, b = harness_run("udp-loss", seed=3), harness_run("udp-loss", seed=3)
    assert a.to_dict() == b.to_dict()


def test_rate_limit_small():
    rep = harness_run("udp-ratelimit", runs=2, pairs_per_run=1)
    assert rep.passed, rep.text()
    assert len(rep.observed["run_median_tp_bias"]) == 2


def test_harness_notices_a_wrong_expectation():
    # neutral expectations on an impaired path must fail, not pass silently
    sc = replace(SCENARIOS["udp-latency"], params={"pairs": {1: 5}, "max_abs_bias": 5.0})
    rep = harness_run(sc)
    assert not rep.passed
    assert any(c.name == "median |rtt_bias|" and not c.passed for c in rep.checks)
    assert "[FAIL]" in rep.text()
    rep = harness_run("udp-blackhole", expect="open")
    assert not rep.passed


def test_unknown_scenario_and_workload():
    with pytest.raises(KeyError, match="available"):
        harness_run("nope")
    with pytest.raises(ValueError):
        harness_run(Scenario("x", ImpairmentProfile(), "bogus"))


def test_nat_gap_sweep_boundaries():
    prof = ImpairmentProfile(nat_udp_idle_timeout=180.0, nat_tcp_idle_timeout=3600.0)
    sw = nat_gap_sweep(prof, [179.0, 180.0, 181.0, 3600.0, 3601.0])
    assert sw["udp"] == {179.0: "delivered", 180.0: "delivered", 181.0: "nat-expired",
                         3600.0: "nat-expired", 3601.0: "nat-expired"}
    assert sw["tcp"] == {179.0: "delivered", 180.0: "delivered", 181.0: "delivered",
                         3600.0: "delivered", 3601.0: "nat-expired"}
    assert set(nat_gap_sweep(ImpairmentProfile(), [1e6])["udp"].values()) == {"delivered"}
