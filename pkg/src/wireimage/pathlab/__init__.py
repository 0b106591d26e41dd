"""In-process path emulator: impairment profiles, a packet-level network and scenarios."""

from .profile import (Decision, ImpairmentProfile, PacketMeta, PathState, ProfileError,
                      TokenBucket, load_profile, parse_profile, transit)
from .net import EmulatedPairTransport, PathConfig

__all__ = ["Decision", "ImpairmentProfile", "PacketMeta", "PathState", "ProfileError",
           "TokenBucket", "load_profile", "parse_profile", "transit",
           "EmulatedPairTransport", "PathConfig"]
