"""Fixed-length generator used to check leaf-count efficiency empirically.

Every completed sequence has exactly ``length`` tokens no matter where it
was forked, and per-token surprisals are i.i.d. ``Exp(1)`` (the surprisal
of a token whose realized probability is uniform on (0, 1)).  Top-N
selection by surprisal therefore picks fork positions uniformly at random.
"""

from __future__ import annotations

import math
import random
from typing import Sequence

from ..errors import InvalidConfig
from ..gentree import TokenRecord
from .base import Continuation, FinishReason, GenParams, derive_seed, hash_ints, stable_hash


class FixedLengthBackend:
    def __init__(self, length: int, vocab_size: int = 64):
        if length < 2:
            raise InvalidConfig("fixed generation length must be >= 2")
        self.length = length
        self.vocab_size = vocab_size

    def sample_continuation(self, prompt, prefix: Sequence[TokenRecord], params: GenParams,
                            limit: int | None = None) -> Continuation:
        n = self.length - len(prefix)
        if limit is not None:
            n = min(n, limit)
        rng = random.Random(derive_seed(params.seed, stable_hash(prompt),
                                        hash_ints([t.token_id for t in prefix])))
        toks = [TokenRecord(rng.randrange(self.vocab_size), -math.log(1.0 - rng.random()))
                for _ in range(max(n, 0))]
        done = len(prefix) + len(toks) >= self.length
        return Continuation(toks, done, FinishReason.END_TOKEN if done else None)

    def grade(self, prompt, tokens: Sequence[TokenRecord]) -> bool:
        return tokens[-1].token_id % 2 == 0
