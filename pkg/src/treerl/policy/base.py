"""Backend contract shared by the synthetic and HTTP generators."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

from ..errors import InvalidConfig
from ..gentree import TokenRecord

MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """SplitMix64 finalizer; the fixed mixing function behind every derived seed."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash_ints(values: Sequence[int], seed: int = 0) -> int:
    h = mix64(seed & MASK64)
    for v in values:
        h = mix64(h ^ (v & MASK64))
    return h


def stable_hash(obj) -> int:
    """Platform independent 64-bit hash of an int sequence or any repr-able value."""
    if isinstance(obj, (tuple, list)) and all(isinstance(v, int) for v in obj):
        return hash_ints(obj, seed=len(obj))
    if isinstance(obj, int):
        return mix64(obj & MASK64)
    digest = hashlib.blake2b(repr(obj).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(*parts: int) -> int:
    return hash_ints([p & MASK64 for p in parts], seed=0x5EED)


class FinishReason(enum.Enum):
    END_TOKEN = "end_token"
    LENGTH = "length"


@dataclass(frozen=True)
class GenParams:
    temperature: float = 1.2
    top_p: float = 0.95
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise InvalidConfig("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise InvalidConfig("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise InvalidConfig("max_new_tokens must be positive")

    def with_seed(self, seed: int) -> "GenParams":
        return replace(self, seed=seed & MASK64)

    @classmethod
    def for_http(cls, **kw) -> "GenParams":
        kw.setdefault("max_new_tokens", 8192)
        return cls(**kw)


@dataclass
class Continuation:
    tokens: list[TokenRecord]
    terminal: bool
    finish_reason: FinishReason | None


class Backend(Protocol):
    def sample_continuation(self, prompt, prefix: Sequence[TokenRecord], params: GenParams,
                            limit: int | None = None) -> Continuation: ...

    def grade(self, prompt, tokens: Sequence[TokenRecord]) -> bool: ...
