import socket
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wireimage import flowpair as fp
from wireimage.flowpair import FailureReason, FlowResult, FlowSpec
from wireimage.tunnel import PortInUseError


def test_flow_sizes():
    assert FlowSpec("10.0.0.2", 443, 1).payload_bytes == 10 * 1432
    assert FlowSpec("10.0.0.2", 443, 1500).payload_bytes == 1500 * 10 * 1432
    assert FlowSpec("10.0.0.2", 443, 3, iw_segments=4, mss=1000).payload_bytes == 12000
    for bad in ({"size_iw": 0}, {"port": 0}, {"mss": -1}):
        with pytest.raises(ValueError):
            FlowSpec(**{"destination": "x", "port": 443, "size_iw": 1, **bad})


def test_flow_result_constructors():
    ok = FlowResult.completed(20_000, 10.0, 12.0, 35.0)
    assert ok.success and ok.duration == 2.0 and ok.throughput == 10.0
    bad = FlowResult.failed(FailureReason.STALL, 500, 10.0, 40.0, 35.0)
    assert not bad.success and bad.throughput is None and bad.duration == 30.0


def test_make_pair_biases_only_when_both_succeed():
    spec = FlowSpec("d", 443, 1)
    tcp = FlowResult.completed(14320, 0.0, 1.0, 40.0)
    udp = FlowResult.completed(14320, 0.0, 2.0, 60.0)
    p = fp.make_pair(spec, tcp, udp, source="s", src_port=5)
    assert p.tp_bias == -100.0 and p.rtt_bias == -50.0 and p.both_succeeded
    q = fp.make_pair(spec, tcp, FlowResult.failed(FailureReason.CONNECT_TIMEOUT))
    assert q.tp_bias is None and q.rtt_bias is None


flows = st.builds(
    lambda ok, n, d, rtt, loss, reason: FlowResult.completed(n, 100.0, 100.0 + d, rtt, loss) if ok
    else FlowResult.failed(reason, n, 100.0, 100.0 + d, rtt, loss),
    st.booleans(), st.integers(1, 10**8), st.floats(0.001, 100), st.one_of(st.none(), st.floats(0.1, 1000)),
    st.one_of(st.none(), st.floats(0, 100)), st.sampled_from(list(FailureReason)[1:]))


@given(flows, flows, st.integers(1, 1500), st.integers(1, 65535))
def test_pair_record_roundtrip(tcp, udp, size, port):
    p = fp.make_pair(FlowSpec("198.51.100.1", port, size), tcp, udp, source="n1", src_port=4000)
    back = fp.PairResult.from_dict(p.to_dict())
    assert back == p


class FakeTransport:
    source = "fake"

    def __init__(self, outcome=lambda spec: (True, True)):
        self.outcome = outcome
        self.calls: list[FlowSpec] = []
        self.pauses = 0
        self.port = 30000

    def allocate_port(self):
        self.port += 1
        return self.port

    def pause(self, s):
        self.pauses += 1

    def run_flows(self, spec, src_port):
        self.calls.append(spec)
        t_ok, u_ok = self.outcome(spec)
        mk = lambda ok: FlowResult.completed(spec.payload_bytes, 0.0, 1.0, 30.0) if ok \
            else FlowResult.failed(FailureReason.CONNECT_TIMEOUT, 0, 0.0, 10.0)
        return mk(t_ok), mk(u_ok)


def test_campaign_order_counts_and_pauses():
    cfg = fp.CampaignConfig(["a", "b"], (53, 443), {1: 2, 300: 1})
    tr = FakeTransport()
    seen = []
    res = fp.run_campaign(cfg, tr, seen.append)
    assert len(res) == 12 == len(seen)
    assert [(s.destination, s.port, s.size_iw) for s in tr.calls[:3]] == [("a", 53, 1), ("a", 53, 1), ("a", 53, 300)]
    assert tr.pauses == 11
    assert len({r.src_port for r in res}) == 12


def test_campaign_skips_dead_destination_port():
    cfg = fp.CampaignConfig(["a"], (53, 443), {1: 5, 3: 5}, max_dead_pairs=3)
    tr = FakeTransport(lambda spec: (spec.port == 443, False))
    summary = fp.CampaignSummary()
    res = fp.run_campaign(cfg, tr, summary=summary)
    assert sum(1 for r in res if r.spec.port == 53) == 3
    assert sum(1 for r in res if r.spec.port == 443) == 10
    assert summary.skipped == [("a", 53)] and summary.tcp_only == 10 and summary.both_failed == 3


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        fp.CampaignConfig(["a"], (0,))
    with pytest.raises(ValueError):
        fp.CampaignConfig(["a"], (53,), {1: 0})


# --- live server on loopback ---------------------------------------------------

def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def server():
    port = _free_port()
    srv = fp.FlowServer(fp.ListenConfig(("127.0.0.1",), (port,), max_payload=10**7, idle_timeout=2)).start()
    yield srv, port
    srv.shutdown()


def test_live_flow_against_server(server):
    srv, port = server
    r = fp.live_flow("127.0.0.1", port, 1_000_000)
    assert r.success and r.bytes_transferred == 1_000_000 and r.initial_rtt > 0
    assert r.throughput == pytest.approx(1_000_000 / r.duration / 1000)
    assert srv.stats.snapshot()["served"] == 1


def test_oversized_request_is_rejected(server):
    srv, port = server
    r = fp.live_flow("127.0.0.1", port, 10**7 + 1)
    assert not r.success and r.failure_reason == FailureReason.RESET
    assert srv.stats.snapshot()["rejected"] == 1


def test_closed_port_is_reset():
    r = fp.live_flow("127.0.0.1", _free_port(), 100, connect_timeout=1)
    assert r.failure_reason == FailureReason.RESET and r.initial_rtt is None


def test_stall_detected():
    lsock = socket.socket()
    lsock.bind(("127.0.0.1", 0))
    lsock.listen()
    port = lsock.getsockname()[1]
    r = fp.live_flow("127.0.0.1", port, 100, stall_timeout=0.3)
    lsock.close()
    assert r.failure_reason == FailureReason.STALL and r.initial_rtt is not None


def test_port_in_use_names_port(server):
    _, port = server
    with pytest.raises(PortInUseError, match=str(port)):
        fp.FlowServer(fp.ListenConfig(("127.0.0.1",), (port,))).start()


def test_socket_pair_transport_on_loopback():
    port = _free_port()
    srv = fp.FlowServer(fp.ListenConfig(("127.0.0.1", "127.0.0.2"), (port,))).start()
    tr = fp.SocketPairTransport({"127.0.0.1": "127.0.0.2"}, source="me")
    pair = fp.run_pair(FlowSpec("127.0.0.1", port, 3), tr)
    assert pair.both_succeeded and pair.source == "me"
    assert pair.tcp.bytes_transferred == pair.udp.bytes_transferred == 3 * 10 * 1432
    assert pair.tp_bias is not None
    with pytest.raises(KeyError):
        fp.run_pair(FlowSpec("127.0.0.9", port, 1), tr)
    srv.shutdown()


def test_inner_address_lookup():
    peers = {"d": "10.1.0.2", "d:53": "10.0.53.2"}
    assert fp.inner_address(peers, "d", 53) == "10.0.53.2"
    assert fp.inner_address(peers, "d", 443) == "10.1.0.2"


def test_serve_until_stopped():
    stop = threading.Event()
    port = _free_port()
    out = {}
    t = threading.Thread(target=lambda: out.update(stats=fp.serve(fp.ListenConfig(("127.0.0.1",), (port,)), stop)))
    t.start()
    deadline = time.monotonic() + 5
    while True:
        try:
            r = fp.live_flow("127.0.0.1", port, 10)
            if r.success:
                break
        except OSError:
            pass
        assert time.monotonic() < deadline
        time.sleep(0.05)
    stop.set()
    t.join(5)
    assert out["stats"].served == 1


# --- racing --------------------------------------------------------------------

OK = lambda t: fp.DialOutcome(True, t)
FAIL = lambda t: fp.DialOutcome(False, t, "timeout")


@pytest.mark.parametrize("udp,tcp,want,after", [
    (OK(0.05), OK(0.04), fp.UDP, 0.05),
    (OK(0.14), OK(0.04), fp.UDP, 0.14),  # tie at the head start goes to UDP
    (OK(0.20), OK(0.04), fp.TCP, 0.14),
    (FAIL(5.0), OK(0.04), fp.TCP, 0.14),
    (FAIL(0.01), OK(0.04), fp.TCP, 0.04),
    (OK(0.5), FAIL(5.0), fp.UDP, 0.5),
    (None, OK(0.04), fp.TCP, 0.04),
])
def test_choose_transport(udp, tcp, want, after):
    d = fp.choose_transport(udp, tcp, 0.100)
    assert d.transport == want and d.decided_after == pytest.approx(after)


def test_choose_transport_both_fail():
    with pytest.raises(fp.RaceFailed, match="both transports failed"):
        fp.choose_transport(FAIL(1), FAIL(1), 0.1)


class FakeDialer:
    def __init__(self, udp, tcp):
        self.udp, self.tcp, self.calls = udp, tcp, []

    def dial(self, destination, port, timeout, *, udp=True):
        self.calls.append(udp)
        return (self.udp if udp else None), self.tcp


def test_race_cache_remembers_blocked_network():
    now = [0.0]
    cache = fp.RaceCache(ttl=60, clock=lambda: now[0])
    d = FakeDialer(FAIL(5.0), OK(0.03))
    assert fp.race_connect("x", 443, 5, dialer=d, cache=cache, network="wifi").transport == fp.TCP
    second = fp.race_connect("x", 443, 5, dialer=d, cache=cache, network="wifi")
    assert second.cached and second.udp is None and d.calls == [True, False]
    assert fp.race_connect("x", 443, 5, dialer=d, cache=cache, network="lte").udp is not None
    now[0] = 61
    assert not fp.race_connect("x", 443, 5, dialer=d, cache=cache, network="wifi").cached


def test_pairs_from_records_filters_kind():
    p = fp.make_pair(FlowSpec("d", 1, 1), FlowResult.completed(1, 0, 1, 1), FlowResult.completed(1, 0, 1, 1))
    recs = [{"kind": "manifest"}, p.to_dict(), {"kind": "probe"}]
    assert fp.pairs_from_records(recs) == [p]
