import pytest
from hypothesis import given
from hypothesis import strategies as st

from wireimage.pathlab import (ImpairmentProfile, PacketMeta, PathState, ProfileError, TokenBucket,
                               parse_profile, transit)


def meta(proto="udp", size=100, direction="out", t=0.0, flow=("a", 1, "b", 2)):
    return PacketMeta(proto, size, direction, t, flow)


@given(st.sampled_from(["tcp", "udp", "icmp"]), st.integers(1, 65535), st.sampled_from(["out", "in"]),
       st.floats(0, 1e6))
def test_neutral_profile_is_transparent(proto, size, direction, t):
    d = transit(meta(proto, size, direction, t), ImpairmentProfile(), PathState())
    assert d.delivered and d.deliver_at == t


def test_block_is_per_protocol():
    prof = ImpairmentProfile(udp_block=True)
    st_ = PathState()
    assert transit(meta("udp"), prof, st_).reason == "blocked"
    assert transit(meta("tcp"), prof, st_).delivered
    assert st_.drops == {"blocked": 1}


def test_latency_only_outbound_for_its_protocol():
    prof = ImpairmentProfile(extra_latency_udp=20.0)
    s = PathState()
    assert transit(meta("udp", t=1.0), prof, s).deliver_at == pytest.approx(1.02)
    assert transit(meta("udp", direction="in", t=1.0), prof, s).deliver_at == 1.0
    assert transit(meta("tcp", t=1.0), prof, s).deliver_at == 1.0


def test_mtu_and_large_icmp():
    s = PathState()
    assert transit(meta("tcp", 1501), ImpairmentProfile(path_mtu=1500), s).reason == "mtu"
    assert transit(meta("tcp", 1500), ImpairmentProfile(path_mtu=1500), s).delivered
    prof = ImpairmentProfile(large_icmp_block_threshold=600)
    assert transit(meta("icmp", 601), prof, s).reason == "icmp-size"
    assert transit(meta("icmp", 600), prof, s).delivered
    assert transit(meta("udp", 1400), prof, s).delivered


def test_token_bucket():
    b = TokenBucket(rate=1000.0, depth=1500.0)
    assert b.conform(1500, 0.0)
    assert not b.conform(1, 0.0)
    assert not b.conform(600, 0.5)
    assert b.conform(1000, 1.0)


@given(st.lists(st.tuples(st.floats(0, 0.01), st.integers(40, 1500)), min_size=1, max_size=300))
def test_rate_limit_never_exceeds_rate_plus_depth(gaps):
    prof = ImpairmentProfile(udp_rate_limit=100.0)  # 100 kB/s, 1 s of depth
    s = PathState()
    t, passed = 0.0, 0
    for gap, size in gaps:
        t += gap
        if transit(meta("udp", size, t=t), prof, s).delivered:
            passed += size
    assert passed <= 100_000 * (1.0 + t)


def test_rate_limit_only_touches_udp():
    prof = ImpairmentProfile(udp_rate_limit=1.0)
    s = PathState()
    assert all(transit(meta("tcp", 1500, t=i * 1e-4), prof, s).delivered for i in range(100))


def test_loss_rate_and_determinism():
    prof = ImpairmentProfile(loss_rate_udp=0.1)
    s1, s2 = PathState(5), PathState(5)
    a = [transit(meta("udp", t=i), prof, s1).delivered for i in range(5000)]
    b = [transit(meta("udp", t=i), prof, s2).delivered for i in range(5000)]
    assert a == b
    assert 0.08 < a.count(False) / 5000 < 0.12


def test_protocol_streams_are_independent():
    prof = ImpairmentProfile(loss_rate_udp=0.3, loss_rate_tcp=0.3)
    s1, s2 = PathState(1), PathState(1)
    tcp_only = [transit(meta("tcp", t=i), prof, s1).delivered for i in range(200)]
    mixed = []
    for i in range(200):
        transit(meta("udp", t=i), prof, s2)
        mixed.append(transit(meta("tcp", t=i), prof, s2).delivered)
    assert tcp_only == mixed


def test_nat_mapping_lifecycle():
    prof = ImpairmentProfile(nat_udp_idle_timeout=180.0)
    s = PathState()
    assert transit(meta("udp", direction="in", t=0), prof, s).reason == "nat-no-mapping"
    transit(meta("udp", t=1), prof, s)
    assert transit(meta("udp", direction="in", t=181), prof, s).delivered  # exactly 180 s idle
    assert transit(meta("udp", direction="in", t=361.5), prof, s).reason == "nat-expired"
    assert transit(meta("udp", direction="in", t=362), prof, s).reason == "nat-no-mapping"
    assert transit(meta("tcp", direction="in", t=400), prof, s).delivered


def test_timestamps_must_not_go_back():
    s = PathState()
    transit(meta(t=5.0), ImpairmentProfile(), s)
    with pytest.raises(ValueError):
        transit(meta(t=4.0), ImpairmentProfile(), s)


def test_profile_validation_and_text_roundtrip():
    with pytest.raises(ProfileError):
        ImpairmentProfile(loss_rate_udp=1.5)
    with pytest.raises(ProfileError):
        ImpairmentProfile(udp_rate_limit=0)
    prof = ImpairmentProfile(udp_block=True, udp_rate_limit=250.0, path_mtu=1400, nat_tcp_idle_timeout=3600.0)
    assert parse_profile(prof.to_text()) == prof
    assert parse_profile("udp_block = yes  # comment\nextra_latency_udp = 20\n") == \
        ImpairmentProfile(udp_block=True, extra_latency_udp=20.0)
    for bad in ("bogus = 1", "udp_block = maybe", "path_mtu = big", "udp_block = none"):
        with pytest.raises(ProfileError):
            parse_profile(bad)
    assert ImpairmentProfile().is_neutral and not prof.is_neutral
