"""Tabular softmax policy with exactly computable token probabilities.

Each context (a short tuple of ints chosen by the reader) is keyed by
``context_key``, a SplitMix64 hash of its ints, and owns one row of
logits.  Rows are
created lazily from the reader's ``init_row`` so the table only holds
contexts that were actually visited.
"""

from __future__ import annotations

import json
import math
import random
from bisect import bisect_right
from typing import Sequence

import numpy as np

from ..errors import InvalidBatch, VocabError
from ..gentree import TokenRecord
from .base import Continuation, FinishReason, GenParams, derive_seed, hash_ints, stable_hash

SNAPSHOT_VERSION = 1


class LastTokensReader:
    """Context = last ``order`` tokens of prompt followed by completion (``-1`` padded)."""

    def __init__(self, vocab_size: int, order: int = 2, eos_id: int | None = None):
        self.vocab_size = vocab_size
        self.order = order
        self.eos_id = eos_id

    def context(self, prompt, completion: Sequence[int], j: int) -> tuple[int, ...]:
        stream = list(prompt or ()) + list(completion[:j])
        ctx = stream[-self.order:] if self.order else []
        return (-1,) * (self.order - len(ctx)) + tuple(ctx)

    def init_row(self, ctx) -> np.ndarray:
        return np.zeros(self.vocab_size)

    def grade(self, prompt, ids: Sequence[int]) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"kind": "last_tokens", "vocab_size": self.vocab_size, "order": self.order,
                "eos_id": self.eos_id}


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def context_key(ctx: Sequence[int]) -> int:
    return hash_ints(ctx, seed=len(ctx))


class SynthPolicy:
    def __init__(self, reader, order: int | None = None):
        self.reader = reader
        self.vocab_size = reader.vocab_size
        self.order = reader.order if order is None else order
        self.row_of: dict[int, int] = {}
        self._lookup: dict[tuple[int, ...], int] = {}
        self.contexts: list[tuple[int, ...]] = []
        self.logits = np.zeros((0, self.vocab_size))
        self.reference_logits = np.zeros((0, self.vocab_size))
        self.version = 0
        self._cache: dict = {}

    # -- table --------------------------------------------------------

    def row(self, ctx: tuple[int, ...]) -> int:
        r = self._lookup.get(ctx)
        if r is not None:
            return r
        key = context_key(ctx)
        r = self.row_of.get(key)
        if r is None:
            init = np.asarray(self.reader.init_row(ctx), dtype=float)
            if init.shape != (self.vocab_size,) or not np.all(np.isfinite(init)):
                raise VocabError(f"invalid initial logits for context {ctx}")
            r = len(self.contexts)
            self.row_of[key] = r
            self.contexts.append(tuple(ctx))
            self.logits = np.vstack([self.logits, init])
            self.reference_logits = np.vstack([self.reference_logits, init])
        self._lookup[tuple(ctx)] = r
        return r

    def rows_for(self, prompt, ids: Sequence[int]) -> list[int]:
        for t in ids:
            if not 0 <= t < self.vocab_size:
                raise VocabError(f"token {t} outside vocabulary of size {self.vocab_size}")
        ctx = self.reader.context
        return [self.row(ctx(prompt, ids, j)) for j in range(len(ids))]

    def set_row(self, ctx, logits, reference: bool = True) -> None:
        r = self.row(tuple(ctx))
        self.logits[r] = logits
        if reference:
            self.reference_logits[r] = logits
        self.touch()

    def touch(self) -> None:
        self.version += 1
        self._cache.clear()

    def probs(self, ctx) -> np.ndarray:
        r = self.row(tuple(ctx))  # before touching self.logits: a new row replaces the array
        return softmax(self.logits[r])

    def log_probs(self, ctx) -> np.ndarray:
        r = self.row(tuple(ctx))
        return _log_softmax(self.logits[r])

    def _sampler(self, r: int, temperature: float, top_p: float):
        key = (r, temperature, top_p)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        z = self.logits[r]
        surprisal = np.maximum(-_log_softmax(z), 0.0)
        p = softmax(z / temperature)
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        keep = min(len(order), int(np.searchsorted(cum, top_p, side="left")) + 1)
        toks = order[:keep]
        cdf = np.cumsum(p[toks])
        hit = (toks.tolist(), cdf.tolist(), float(cdf[-1]), surprisal.tolist())
        self._cache[key] = hit
        return hit

    # -- sampling -----------------------------------------------------

    def sample(self, prompt, prefix_ids: Sequence[int], params: GenParams,
               limit: int | None = None) -> tuple[list[int], list[float], FinishReason | None]:
        budget = params.max_new_tokens - len(prefix_ids)
        if limit is not None:
            budget = min(budget, limit)
        rng = random.Random(derive_seed(params.seed, stable_hash(prompt), hash_ints(prefix_ids)))
        ids = list(prefix_ids)
        out_ids, out_s = [], []
        eos = self.reader.eos_id
        ctx_fn = self.reader.context
        reason = None
        for _ in range(max(budget, 0)):
            r = self.row(ctx_fn(prompt, ids, len(ids)))
            toks, cdf, total, sur = self._sampler(r, params.temperature, params.top_p)
            i = bisect_right(cdf, rng.random() * total)
            tok = toks[min(i, len(toks) - 1)]
            ids.append(tok)
            out_ids.append(tok)
            out_s.append(sur[tok])
            if tok == eos:
                reason = FinishReason.END_TOKEN
                break
        else:
            if len(ids) >= params.max_new_tokens:
                reason = FinishReason.LENGTH
        return out_ids, out_s, reason

    # -- snapshots ----------------------------------------------------

    def save(self, path) -> None:
        meta = {"version": SNAPSHOT_VERSION, "vocab_size": self.vocab_size, "order": self.order,
                "reader": self.reader.to_dict()}
        np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)),
                 contexts=np.array(self.contexts, dtype=np.int64).reshape(-1, self.order),
                 logits=self.logits, reference=self.reference_logits)

    @classmethod
    def load(cls, path, reader=None) -> "SynthPolicy":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            if meta["version"] != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {meta['version']}")
            if reader is None:
                reader = reader_from_dict(meta["reader"])
            pol = cls(reader, order=meta["order"])
            for ctx in data["contexts"]:
                ctx = tuple(int(c) for c in ctx)
                pol.row_of[context_key(ctx)] = len(pol.contexts)
                pol.contexts.append(ctx)
            pol.logits = np.array(data["logits"], dtype=float)
            pol.reference_logits = np.array(data["reference"], dtype=float)
        return pol

    def copy(self) -> "SynthPolicy":
        other = SynthPolicy(self.reader, self.order)
        other.row_of = dict(self.row_of)
        other._lookup = dict(self._lookup)
        other.contexts = list(self.contexts)
        other.logits = self.logits.copy()
        other.reference_logits = self.reference_logits.copy()
        return other


def reader_from_dict(d: dict):
    if d["kind"] == "last_tokens":
        return LastTokensReader(d["vocab_size"], d["order"], d.get("eos_id"))
    if d["kind"] == "chainsum":
        from .chainsum import ChainSumTask
        return ChainSumTask.from_dict(d)
    raise ValueError(f"unknown reader kind {d['kind']!r}")


class SynthBackend:
    """Backend adapter: samples from a ``SynthPolicy`` and grades with its reader."""

    def __init__(self, policy: SynthPolicy):
        self.policy = policy
        self.vocab_size = policy.vocab_size

    def sample_continuation(self, prompt, prefix: Sequence[TokenRecord], params: GenParams,
                            limit: int | None = None) -> Continuation:
        prefix_ids = [t.token_id for t in prefix]
        for t in prefix_ids:
            if not 0 <= t < self.vocab_size:
                raise VocabError(f"token {t} outside vocabulary of size {self.vocab_size}")
        ids, sur, reason = self.policy.sample(prompt, prefix_ids, params, limit)
        tokens = [TokenRecord(i, s) for i, s in zip(ids, sur)]
        return Continuation(tokens, reason is not None, reason)

    def grade(self, prompt, tokens: Sequence[TokenRecord]) -> bool:
        return self.policy.reader.grade(prompt, [t.token_id for t in tokens])

    def shannon_entropy(self, prompt, prefix_ids: Sequence[int]) -> float:
        """Entropy of the untempered next-token distribution after ``prefix_ids``."""
        ctx = self.policy.reader.context(prompt, list(prefix_ids), len(prefix_ids))
        lp = self.policy.log_probs(ctx)
        return float(-np.sum(np.exp(lp) * lp))


def _batch_arrays(policy: SynthPolicy, batch):
    rows, toks, advs = [], [], []
    for ex in batch:
        ids = [t.token_id for t in ex.tokens]
        if len(ex.per_token_advantage) != len(ids):
            raise InvalidBatch("advantage list length differs from token list length")
        for a in ex.per_token_advantage:
            if not math.isfinite(a):
                raise InvalidBatch(f"non-finite advantage {a!r}")
        rows.extend(policy.rows_for(ex.prompt, ids))
        toks.extend(ids)
        advs.extend(ex.per_token_advantage)
    return np.asarray(rows, dtype=np.int64), np.asarray(toks, dtype=np.int64), np.asarray(advs, dtype=float)


def surrogate_objective(policy: SynthPolicy, batch) -> float:
    """``sum_i sum_t A_it * log pi(y_it | ctx_it)`` over the batch."""
    rows, toks, advs = _batch_arrays(policy, batch)
    if rows.size == 0:
        return 0.0
    logp = _log_softmax(policy.logits[rows])
    return float(np.sum(advs * logp[np.arange(rows.size), toks]))


def _gradient(policy: SynthPolicy, rows, toks, advs) -> np.ndarray:
    grad = np.zeros_like(policy.logits)
    np.add.at(grad, (rows, toks), advs)
    weight = np.bincount(rows, weights=advs, minlength=len(policy.logits))
    grad -= weight[:, None] * softmax(policy.logits)
    return grad


def surrogate_gradient(policy: SynthPolicy, batch) -> np.ndarray:
    """Analytic gradient of ``surrogate_objective`` with respect to the logits table."""
    rows, toks, advs = _batch_arrays(policy, batch)
    return _gradient(policy, rows, toks, advs)


def kl_rows(policy: SynthPolicy, rows: np.ndarray) -> np.ndarray:
    lp = _log_softmax(policy.logits[rows])
    lq = _log_softmax(policy.reference_logits[rows])
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def apply_policy_gradient(policy: SynthPolicy, batch, lr: float, kl_beta: float = 0.0) -> dict:
    """One ascent step on the surrogate, then a KL step toward the reference rows.

    The KL step moves every context row seen in the batch by
    ``-kl_beta * d KL(pi || pi_ref) / d logits`` once per call.
    Returns ``grad_norm``, ``mean_kl`` (after the update) and ``tokens``.
    """
    if not lr > 0:
        raise InvalidBatch("learning rate must be positive")
    rows, toks, advs = _batch_arrays(policy, batch)
    stats = {"grad_norm": 0.0, "mean_kl": 0.0, "tokens": int(rows.size)}
    if rows.size == 0:
        return stats
    changed = False
    if np.any(advs != 0.0):
        grad = _gradient(policy, rows, toks, advs)
        stats["grad_norm"] = float(np.linalg.norm(grad))
        policy.logits += lr * grad
        changed = True
    visited = np.unique(rows)
    if kl_beta > 0:
        lp = _log_softmax(policy.logits[visited])
        lq = _log_softmax(policy.reference_logits[visited])
        p = np.exp(lp)
        d = lp - lq
        kl_grad = p * (d - np.sum(p * d, axis=-1, keepdims=True))
        policy.logits[visited] -= kl_beta * kl_grad
        changed = True
    if changed:
        policy.touch()
    stats["mean_kl"] = float(np.mean(kl_rows(policy, visited)))
    return stats
