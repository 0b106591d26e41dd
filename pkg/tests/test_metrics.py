import math
import random

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import bias_oracle, cdf_oracle, loss_oracle, median_oracle
from wireimage import metrics
from wireimage.flowpair import FlowResult, FlowSpec, make_pair
from wireimage.metrics import PacketRecord

positive = st.floats(min_value=1e-3, max_value=1e7, allow_nan=False, allow_infinity=False)


def test_tp_bias_examples():
    assert metrics.tp_bias(200.0, 100.0) == 100.0
    assert metrics.tp_bias(100.0, 200.0) == -100.0
    assert metrics.tp_bias(150.0, 150.0) == 0.0


def test_rtt_bias_sign_favours_faster_udp():
    assert metrics.rtt_bias(40.0, 20.0) == 100.0
    assert metrics.rtt_bias(40.0, 60.0) == -50.0


@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan, math.inf])
def test_bias_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        metrics.tp_bias(bad, 1.0)
    with pytest.raises(ValueError):
        metrics.rtt_bias(1.0, bad)


def test_bias_against_exact_oracle_on_random_pairs():
    rng = random.Random(7)
    for _ in range(2000):
        t = rng.uniform(0.01, 1e5)
        u = rng.uniform(0.01, 1e5)
        assert metrics.tp_bias(u, t) == pytest.approx(bias_oracle(u, t), rel=1e-12, abs=1e-9)
        assert metrics.rtt_bias(t, u) == pytest.approx(bias_oracle(t, u), rel=1e-12, abs=1e-9)


@given(positive, positive)
def test_bias_antisymmetric(a, b):
    assert metrics.tp_bias(a, b) == pytest.approx(-metrics.tp_bias(b, a), rel=1e-12, abs=1e-9)
    assert metrics.rtt_bias(a, b) == pytest.approx(-metrics.rtt_bias(b, a), rel=1e-12, abs=1e-9)


@given(positive, st.floats(min_value=1e-3, max_value=1e3))
def test_bias_scale_invariant(a, k):
    b = a * 1.7
    assume(a * k > 0 and b * k > 0)
    assert metrics.tp_bias(a * k, b * k) == pytest.approx(metrics.tp_bias(a, b), rel=1e-9, abs=1e-9)


@given(positive)
def test_bias_zero_iff_equal(a):
    assert metrics.tp_bias(a, a) == 0.0
    assert metrics.rtt_bias(a, a) == 0.0


def _data(offsets, mss=100, base=1000):
    return [PacketRecord(i, "out", (base + off) % metrics.SEQ_MOD, n, 0x18)
            for i, (off, n) in enumerate(offsets)]


def test_loss_k_of_n_resent():
    n = 30
    for k in (0, 1, 3):
        segs = [(i * 100, 100) for i in range(n)] + [(i * 100, 100) for i in range(k)]
        assert metrics.loss_pct(_data(segs)) == 100.0 * k / n


def test_loss_ignores_inbound_and_empty_segments():
    trace = _data([(0, 100), (100, 100)]) + [PacketRecord(5, "in", 1000, 100, 0x18),
                                                PacketRecord(6, "out", 1000, 0, 0x10)]
    assert metrics.loss_pct(trace) == 0.0
    with pytest.raises(ValueError):
        metrics.loss_pct([])


def test_loss_handles_sequence_wrap():
    segs = [(i * 100, 100) for i in range(10)] + [(500, 100)]
    trace = _data(segs, base=metrics.SEQ_MOD - 450)
    assert metrics.loss_pct(trace) == 10.0


@given(st.lists(st.tuples(st.integers(0, 2000), st.integers(1, 300)), min_size=1, max_size=40))
def test_loss_matches_byte_set_oracle(segments):
    assert metrics.loss_pct(_data(segments)) == pytest.approx(loss_oracle(segments), rel=1e-12)


def test_initial_rtt_from_handshake():
    trace = [PacketRecord(1_000, "out", 0, 0, metrics.SYN),
             PacketRecord(41_500, "in", 0, 0, metrics.SYN | metrics.ACK),
             PacketRecord(42_000, "out", 1, 0, metrics.ACK)]
    assert metrics.initial_rtt(trace) == 40.5


def test_initial_rtt_requires_full_handshake():
    with pytest.raises(metrics.HandshakeIncomplete):
        metrics.initial_rtt([PacketRecord(0, "out", 0, 0, metrics.SYN)])
    with pytest.raises(metrics.HandshakeIncomplete):
        metrics.initial_rtt([PacketRecord(0, "in", 0, 0, metrics.SYN | metrics.ACK)])


def test_conn_bias_and_blocked():
    assert metrics.conn_bias([(True, False)] * 5) == -1.0
    assert metrics.conn_bias([(True, True), (False, True)]) == 0.5
    assert metrics.classify_blocked([(True, False)] * 5)
    assert not metrics.classify_blocked([(True, False)] * 4 + [(True, True)])
    assert not metrics.classify_blocked([(False, False)])
    with pytest.raises(ValueError):
        metrics.conn_bias([])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1))
def test_conn_bias_bounds(atts):
    cb = metrics.conn_bias(atts)
    assert -1.0 <= cb <= 1.0
    assert cb == pytest.approx(sum(u for _, u in atts) / len(atts) - sum(t for t, _ in atts) / len(atts))


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=50))
def test_median_oracle(values):
    assert metrics.median(values) == median_oracle(values)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=200))
def test_cdf_sort_oracle(values):
    series = metrics.export_cdf(values)
    assert series == cdf_oracle(values)
    assert series[-1][1] == 1.0
    assert all(a[0] < b[0] and a[1] < b[1] for a, b in zip(series, series[1:]))


def test_cdf_quantile():
    series = metrics.export_cdf([1, 2, 3, 4])
    assert metrics.cdf_quantile(series, 0.5) == 2.0
    assert metrics.cdf_quantile(series, 1.0) == 4.0
    with pytest.raises(ValueError):
        metrics.cdf_quantile([], 0.5)


def _pair(src, dst, tp_t, tp_u, rtt_t=30.0, rtt_u=30.0, port=443, udp_ok=True):
    spec = FlowSpec(dst, port, 1)
    tcp = FlowResult(True, 14320, 1.0, tp_t, rtt_t, 0.0)
    udp = FlowResult(True, 14320, 1.0, tp_u, rtt_u, 0.0) if udp_ok else \
        FlowResult(False, 0, None, None, None, None)
    return make_pair(spec, tcp, udp, source=src)


def test_matrix_groups_by_path_and_orders_by_region():
    rs = [_pair("a", "b", 100, 110), _pair("a", "b", 100, 90), _pair("b", "a", 100, 100, udp_ok=False)]
    m = metrics.aggregate_matrix(rs, regions={"a": "eu", "b": "us"}, region_order=["us", "eu"])
    assert m.nodes == ["b", "a"]
    ab = m.cells[("a", "b")]
    assert ab.n_pairs == 2 and ab.conn_bias == 0.0
    assert ab.median_tp_bias == pytest.approx((10.0 + -100 * 10 / 90) / 2)
    ba = m.cells[("b", "a")]
    assert ba.conn_bias == -1.0 and ba.median_tp_bias is None
    assert m.grid("conn_bias") == [[None, -1.0], [0.0, None]]


def test_split_summary_threshold_goes_low():
    rs = [_pair("a", "b", 200.0, 220.0), _pair("a", "b", 201.0, 201.0, rtt_t=50.0, rtt_u=40.0)]
    rows = {(g.dimension, g.side): g for g in metrics.split_summary(rs, 200.0, 50.0)}
    assert rows[("throughput", "below")].n_flows == 1
    assert rows[("throughput", "below")].median_bias == pytest.approx(10.0)
    assert rows[("throughput", "above")].median_bias == 0.0
    assert rows[("latency", "below")].n_flows == 2
    assert rows[("latency", "above")].n_flows == 0 and rows[("latency", "above")].median_bias is None


def test_blocked_by_port():
    rs = [_pair("a", "b", 1, 1, port=53, udp_ok=False)] * 3 + [_pair("a", "b", 1, 1, port=443)]
    table = metrics.blocked_by_port(rs)
    assert table[53] == {"port": 53, "tuples": 1, "blocked": 1, "blocked_pct": 100.0}
    assert table[443]["blocked"] == 0


def test_to_csv():
    assert metrics.to_csv([{"a": 1, "b": None}]) == "a,b\n1,\n"
    assert metrics.to_csv([], ["a"]) == "a\n"
