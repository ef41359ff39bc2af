"""ChainSum: a small verifiable arithmetic task for the tabular policy.

Prompt ``a1 + a2 + ... + ak =`` over digits ``0..V-1``.  The intended
completion writes the running sums ``s_j = (a1 + ... + aj) mod V`` one per
token and then ``EOS``; a completion is correct iff the token right before
``EOS`` equals the full sum mod ``V``.

The policy reads the prompt aligned with its own output: the context for
completion position ``j`` is ``(previous completion token, a_{j+1})`` with
``=`` standing in before the first output and after the last operand.
This is what makes the task learnable by a table of order-2 contexts while
every intermediate running sum is a genuine, possibly uncertain, step.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidConfig, NotTerminal, VocabError
from .base import hash_ints
from .synthetic import SynthPolicy, softmax


@dataclass(frozen=True)
class ChainSumTask:
    modulus: int = 5
    k: int = 3
    skill: float = 2.0
    noise: float = 1.0
    eos_bias: float = 0.0
    init_seed: int = 0
    order: int = 2

    def __post_init__(self):
        if self.modulus < 4:
            raise InvalidConfig("ChainSum modulus must be >= 4")
        if self.k < 1:
            raise InvalidConfig("ChainSum needs at least one operand")

    # -- vocabulary ---------------------------------------------------

    @property
    def plus_id(self) -> int:
        return self.modulus

    @property
    def eq_id(self) -> int:
        return self.modulus + 1

    @property
    def eos_id(self) -> int:
        return self.modulus + 2

    @property
    def vocab_size(self) -> int:
        return self.modulus + 3

    def token_text(self, tok: int) -> str:
        if 0 <= tok < self.modulus:
            return str(tok)
        return {self.plus_id: "+", self.eq_id: "=", self.eos_id: "<eos>"}.get(tok, f"<{tok}?>")

    def render(self, ids: Sequence[int]) -> str:
        return " ".join(self.token_text(t) for t in ids)

    # -- prompts ------------------------------------------------------

    def prompt_tokens(self, prompt: Sequence[int]) -> list[int]:
        out = []
        for i, a in enumerate(prompt):
            if i:
                out.append(self.plus_id)
            out.append(int(a))
        out.append(self.eq_id)
        return out

    def answer(self, prompt: Sequence[int]) -> int:
        return sum(prompt) % self.modulus

    def all_prompts(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.modulus), repeat=self.k))

    def split_prompts(self, n_train: int, n_eval: int, seed: int = 0):
        """Disjoint train / held-out prompt lists."""
        total = self.modulus ** self.k
        if n_train + n_eval > total:
            raise InvalidConfig(f"only {total} distinct ChainSum prompts exist")
        rng = np.random.default_rng(seed)
        if total <= 200_000:
            pool = self.all_prompts()
            idx = rng.permutation(total)[: n_train + n_eval]
            chosen = [pool[i] for i in idx]
        else:
            seen, chosen = set(), []
            while len(chosen) < n_train + n_eval:
                p = tuple(int(x) for x in rng.integers(0, self.modulus, self.k))
                if p not in seen:
                    seen.add(p)
                    chosen.append(p)
        return chosen[:n_train], chosen[n_train:]

    def sample_prompts(self, n: int, seed: int = 0) -> list[tuple[int, ...]]:
        rng = np.random.default_rng(seed)
        return [tuple(int(x) for x in row) for row in rng.integers(0, self.modulus, (n, self.k))]

    # -- reader interface ---------------------------------------------

    def aligned(self, prompt: Sequence[int], j: int) -> int:
        return int(prompt[j]) if j < len(prompt) else self.eq_id

    def context(self, prompt, completion: Sequence[int], j: int) -> tuple[int, int]:
        prev = completion[j - 1] if j > 0 else self.eq_id
        return (prev, self.aligned(prompt, j))

    def intended(self, ctx: tuple[int, int]) -> int | None:
        """The token a perfect solver emits in ``ctx`` (``None`` off the solution manifold)."""
        prev, a = ctx
        if a == self.eq_id:
            return self.eos_id if 0 <= prev < self.modulus else None
        if prev == self.eq_id:
            return a
        if 0 <= prev < self.modulus:
            return (prev + a) % self.modulus
        return None

    def init_row(self, ctx) -> np.ndarray:
        """Pre-trained starting logits: a noisy preference for the intended token."""
        rng = np.random.default_rng([self.init_seed, hash_ints(ctx, seed=len(ctx)) & 0xFFFFFFFF])
        row = self.noise * rng.standard_normal(self.vocab_size)
        tgt = self.intended(tuple(ctx))
        if tgt is not None:
            row[tgt] += self.skill
        if ctx[1] != self.eq_id:
            row[self.eos_id] += self.eos_bias
        return row

    def grade(self, prompt, ids: Sequence[int], terminal: bool = True) -> bool:
        """True iff the token before ``EOS`` is the sum mod ``V``."""
        for t in ids:
            if not 0 <= t < self.vocab_size:
                raise VocabError(f"token {t} outside ChainSum vocabulary of size {self.vocab_size}")
        if not terminal:
            raise NotTerminal("cannot grade an unfinished sequence")
        if len(ids) < 2 or ids[-1] != self.eos_id:
            return False
        return ids[-2] == self.answer(prompt)

    def to_dict(self) -> dict:
        return {"kind": "chainsum", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSumTask":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)

    def make_policy(self) -> SynthPolicy:
        return SynthPolicy(self)


def _transition(policy: SynthPolicy, aligned: int, temperature: float, top_p: float) -> np.ndarray:
    """Row ``prev`` -> next-token distribution for a fixed aligned operand."""
    task = policy.reader
    rows = [policy.row((prev, aligned)) for prev in range(task.vocab_size)]
    z = policy.logits[rows]
    if temperature == 1.0 and top_p == 1.0:
        return softmax(z)
    p = softmax(z / temperature)
    if top_p < 1.0:
        for i in range(len(p)):
            order = np.argsort(-p[i], kind="stable")
            cum = np.cumsum(p[i][order])
            keep = min(len(order), int(np.searchsorted(cum, top_p, side="left")) + 1)
            mask = np.zeros(len(order), bool)
            mask[order[:keep]] = True
            p[i] = np.where(mask, p[i], 0.0)
            p[i] /= p[i].sum()
    return p


def exact_accuracy(policy: SynthPolicy, prompts, max_len: int = 64, temperature: float = 1.0,
                   top_p: float = 1.0) -> np.ndarray:
    """Probability that one sampled completion is correct, per prompt.

    Dynamic programming over (position, last token); sequences that reach
    ``max_len`` tokens without ``EOS`` count as wrong.
    """
    task = policy.reader
    eos = task.eos_id
    cache: dict[int, np.ndarray] = {}

    def trans(a):
        if a not in cache:
            cache[a] = _transition(policy, a, temperature, top_p)
        return cache[a]

    out = np.zeros(len(prompts))
    for pi, prompt in enumerate(prompts):
        target = task.answer(prompt)
        state = np.zeros(task.vocab_size)
        state[task.eq_id] = 1.0
        acc = 0.0
        for j in range(max_len):
            P = trans(task.aligned(prompt, j))
            if j > 0:
                acc += state[target] * P[target, eos]
            state = state @ P
            state[eos] = 0.0
            if state.sum() < 1e-15:
                break
        out[pi] = acc
    return out


def greedy_completion(policy: SynthPolicy, prompt, max_len: int = 64) -> list[int]:
    task = policy.reader
    ids: list[int] = []
    for j in range(max_len):
        r = policy.row(task.context(prompt, ids, j))  # may grow the table
        tok = int(np.argmax(policy.logits[r]))
        ids.append(tok)
        if tok == task.eos_id:
            break
    return ids


def greedy_accuracy(policy: SynthPolicy, prompts, max_len: int = 64) -> float:
    task = policy.reader
    hits = [task.grade(p, greedy_completion(policy, p, max_len)) for p in prompts]
    return float(np.mean(hits)) if hits else 0.0
