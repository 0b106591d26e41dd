"""Ground-truth impairment profiles and the per-packet transit decision.

Directions are seen from the measuring client: ``"out"`` leaves the client's
access network, ``"in"`` enters it.  Extra latency is applied to outbound
packets only (egress shaping, like a netem qdisc on the access link), NAT
mappings are created and refreshed by outbound packets and checked for
inbound ones.
"""

from __future__ import annotations

import configparser
import math
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Hashable

PROTOCOLS = ("tcp", "udp", "icmp")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ImpairmentProfile:
    udp_block: bool = False
    tcp_block: bool = False
    udp_rate_limit: float | None = None  # kB/s
    extra_latency_udp: float = 0.0  # ms
    extra_latency_tcp: float = 0.0  # ms
    loss_rate_udp: float = 0.0
    loss_rate_tcp: float = 0.0
    path_mtu: int | None = None  # bytes
    nat_udp_idle_timeout: float | None = None  # s
    nat_tcp_idle_timeout: float | None = None  # s
    large_icmp_block_threshold: int | None = None  # bytes

    def __post_init__(self) -> None:
        for name in ("loss_rate_udp", "loss_rate_tcp"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ProfileError(f"{name} must be a probability, got {p}")
        for name in ("extra_latency_udp", "extra_latency_tcp"):
            if getattr(self, name) < 0:
                raise ProfileError(f"{name} must be >= 0")
        for name in ("udp_rate_limit", "path_mtu", "nat_udp_idle_timeout",
                     "nat_tcp_idle_timeout", "large_icmp_block_threshold"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ProfileError(f"{name} must be positive or none, got {v}")

    @property
    def is_neutral(self) -> bool:
        return self == ImpairmentProfile()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {'none' if v is None else str(v).lower()}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(ImpairmentProfile)}.get(name)
    if kind is None:
        raise ProfileError(f"unknown profile key {name!r}")
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        if "None" not in str(kind):
            raise ProfileError(f"{name} cannot be none")
        return None
    if "bool" in str(kind):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ProfileError(f"{name}: not a boolean: {raw!r}")
    try:
        return int(raw) if "int" in str(kind) else float(raw)
    except ValueError:
        raise ProfileError(f"{name}: not a number: {raw!r}") from None


def parse_profile(text: str) -> ImpairmentProfile:
    """Flat ``key = value`` lines, ``#`` comments, ``none`` for unset values."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string("[profile]\n" + text)
    except configparser.Error as exc:
        raise ProfileError(str(exc)) from None
    return ImpairmentProfile(**{k: _coerce(k, v) for k, v in cp["profile"].items()})


def load_profile(path: str | Path) -> ImpairmentProfile:
    return parse_profile(Path(path).read_text())


@dataclass(frozen=True)
class PacketMeta:
    protocol: str
    size: int
    direction: str
    timestamp: float  # seconds
    flow: Hashable | None = None

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.direction not in ("out", "in"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class Decision:
    deliver_at: float | None = None
    reason: str | None = None

    @property
    def delivered(self) -> bool:
        return self.deliver_at is not None


class TokenBucket:
    """Policer: a packet conforms if the bucket holds at least its size."""

    def __init__(self, rate: float, depth: float, now: float = 0.0) -> None:
        self.rate = rate
        self.depth = depth
        self.tokens = depth
        self.updated = now

    def conform(self, size: int, now: float) -> bool:
        if now > self.updated:
            self.tokens = min(self.depth, self.tokens + (now - self.updated) * self.rate)
            self.updated = now
        if self.tokens >= size:
            self.tokens -= size
            return True
        return False


@dataclass
class PathState:
    """Mutable emulator state for one path; deterministic given ``seed``."""

    seed: int = 0
    buckets: dict[str, TokenBucket] = field(default_factory=dict)
    nat: dict[tuple[str, Hashable], float] = field(default_factory=dict)
    last_ts: dict[str, float] = field(default_factory=dict)
    drops: dict[str, int] = field(default_factory=dict)
    _rngs: dict[str, random.Random] = field(default_factory=dict, repr=False)

    def rng(self, protocol: str) -> random.Random:
        # one stream per protocol: impairing UDP never shifts TCP's loss draws
        if protocol not in self._rngs:
            self._rngs[protocol] = random.Random(f"{self.seed}:{protocol}")
        return self._rngs[protocol]


def _drop(state: PathState, reason: str) -> Decision:
    state.drops[reason] = state.drops.get(reason, 0) + 1
    return Decision(None, reason)


def transit(meta: PacketMeta, profile: ImpairmentProfile, state: PathState) -> Decision:
    """Decide what the impaired path does with one packet."""
    last = state.last_ts.get(meta.direction)
    if last is not None and meta.timestamp < last:
        raise ValueError(f"timestamp {meta.timestamp} precedes {last} ({meta.direction})")
    state.last_ts[meta.direction] = meta.timestamp
    proto, t = meta.protocol, meta.timestamp

    if (proto == "udp" and profile.udp_block) or (proto == "tcp" and profile.tcp_block):
        return _drop(state, "blocked")
    if profile.path_mtu is not None and meta.size > profile.path_mtu:
        return _drop(state, "mtu")
    if (proto == "icmp" and profile.large_icmp_block_threshold is not None
            and meta.size > profile.large_icmp_block_threshold):
        return _drop(state, "icmp-size")
    if proto == "udp" and profile.udp_rate_limit is not None:
        bucket = state.buckets.get(proto)
        if bucket is None:
            rate = profile.udp_rate_limit * 1000.0
            bucket = state.buckets[proto] = TokenBucket(rate, rate * 1.0, t)
        if not bucket.conform(meta.size, t):
            return _drop(state, "rate-limit")
    loss = {"udp": profile.loss_rate_udp, "tcp": profile.loss_rate_tcp}.get(proto, 0.0)
    if loss > 0 and state.rng(proto).random() < loss:
        return _drop(state, "loss")
    timeout = {"udp": profile.nat_udp_idle_timeout,
               "tcp": profile.nat_tcp_idle_timeout}.get(proto)
    if timeout is not None and meta.flow is not None:
        key = (proto, meta.flow)
        if meta.direction == "out":
            state.nat[key] = t
        else:
            seen = state.nat.get(key)
            if seen is None:
                return _drop(state, "nat-no-mapping")
            if t - seen > timeout:
                del state.nat[key]
                return _drop(state, "nat-expired")
            state.nat[key] = t
    extra = {"udp": profile.extra_latency_udp, "tcp": profile.extra_latency_tcp}.get(proto, 0.0)
    if meta.direction == "out" and extra:
        return Decision(t + extra / 1000.0)
    return Decision(t)
