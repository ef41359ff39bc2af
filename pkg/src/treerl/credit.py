"""Process rewards from generation trees.

Every node's value is the fraction of correct leaves below it.  Rewards
combine a global term (node value minus the value of the virtual root,
i.e. the prompt's overall correct rate) with a local term (node value
minus its parent's value), optionally divided by ``sqrt(n)`` where ``n`` is
the node's leaf count so that prefixes shared by many sequences are not
over-counted.

Leaf counts are kept as integers; each value and advantage is a single
correctly rounded integer division.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

from .errors import InvalidScheme, UngradedLeaf
from .gentree import VIRTUAL_ROOT, GenForest, TokenRecord


class SchemeKind(enum.Enum):
    REWEIGHTED_SUM = "reweighted_sum"
    PLAIN_SUM = "plain_sum"
    GLOBAL_ONLY_REWEIGHTED = "global_only_reweighted"
    GAE = "gae"


@dataclass(frozen=True)
class RewardScheme:
    """How a node's reward is assembled.

    For ``GAE`` the reward is ``sum_j w_j * (V(node) - V(ancestor_j))``:
    ``ancestor_weights[k]`` weights the ancestor ``k + 1`` levels up (parent
    first) and ``root_weight`` weights the virtual root.  When the parent
    *is* the virtual root both weights apply, so ``root_weight=1,
    ancestor_weights=(1,)`` reproduces ``PLAIN_SUM`` on every node.
    """

    kind: SchemeKind = SchemeKind.REWEIGHTED_SUM
    root_weight: float = 0.0
    ancestor_weights: tuple[float, ...] = ()

    def __post_init__(self):
        if not isinstance(self.kind, SchemeKind):
            raise InvalidScheme(f"unknown reward scheme {self.kind!r}")
        ws = (self.root_weight, *self.ancestor_weights)
        if not all(math.isfinite(w) for w in ws):
            raise InvalidScheme("GAE weights must be finite")

    @classmethod
    def parse(cls, name: str, root_weight: float = 1.0, ancestor_weights=(1.0,)) -> "RewardScheme":
        try:
            kind = SchemeKind(name.lower())
        except ValueError:
            raise InvalidScheme(f"unknown reward scheme {name!r}") from None
        if kind is SchemeKind.GAE:
            return cls(kind, float(root_weight), tuple(float(w) for w in ancestor_weights))
        return cls(kind)

    @classmethod
    def gae(cls, root_weight: float, ancestor_weights: Iterable[float]) -> "RewardScheme":
        return cls(SchemeKind.GAE, float(root_weight), tuple(float(w) for w in ancestor_weights))


REWEIGHTED_SUM = RewardScheme(SchemeKind.REWEIGHTED_SUM)
PLAIN_SUM = RewardScheme(SchemeKind.PLAIN_SUM)
GLOBAL_ONLY_REWEIGHTED = RewardScheme(SchemeKind.GLOBAL_ONLY_REWEIGHTED)


@dataclass(frozen=True)
class StepReward:
    node_id: int
    value: float
    global_adv: float
    local_adv: float
    reward: float
    leaf_count: int


@dataclass
class TrainingExample:
    prompt: object
    tokens: list[TokenRecord]
    per_token_advantage: list[float]
    leaf_id: int
    reward: float = 0.0
    meta: dict = field(default_factory=dict)


def _ratio(num: int, den: int) -> float:
    return num / den  # int / int is correctly rounded


class LeafStats:
    """Correct/total leaf counts for every node of one graded forest."""

    def __init__(self, forest: GenForest):
        self.forest = forest
        self.correct: dict[int, int] = {}
        self.total: dict[int, int] = {}
        order = list(forest.iter_subtree())
        for nid in reversed(order):
            node = forest.nodes[nid]
            if node.children:
                self.correct[nid] = sum(self.correct[c] for c in node.children)
                self.total[nid] = sum(self.total[c] for c in node.children)
            else:
                if node.correct is None:
                    raise UngradedLeaf(f"leaf {nid} has no correctness label")
                self.correct[nid] = int(node.correct)
                self.total[nid] = 1
        self.correct[VIRTUAL_ROOT] = sum(self.correct[r] for r in forest.trees)
        self.total[VIRTUAL_ROOT] = sum(self.total[r] for r in forest.trees)

    def counts(self, node_id: int) -> tuple[int, int]:
        if node_id not in self.total:
            self.forest.node(node_id)  # raises UnknownNode
        return self.correct[node_id], self.total[node_id]

    def value(self, node_id: int) -> float:
        c, n = self.counts(node_id)
        return _ratio(c, n)

    def diff(self, a: int, b: int) -> tuple[int, int]:
        """``V(a) - V(b)`` as an integer numerator/denominator pair."""
        ca, na = self.counts(a)
        cb, nb = self.counts(b)
        return ca * nb - cb * na, na * nb

    def step_reward(self, node_id: int, scheme: RewardScheme = REWEIGHTED_SUM) -> StepReward:
        c, n = self.counts(node_id)
        parent = VIRTUAL_ROOT if node_id == VIRTUAL_ROOT else self.forest.nodes[node_id].parent
        g_num, g_den = self.diff(node_id, VIRTUAL_ROOT)
        l_num, l_den = self.diff(node_id, parent)
        kind = scheme.kind
        if kind is SchemeKind.GAE:
            reward = scheme.root_weight * _ratio(g_num, g_den) if scheme.root_weight else 0.0
            anc = parent
            for w in scheme.ancestor_weights:
                if w:
                    num, den = self.diff(node_id, anc)
                    reward += w * _ratio(num, den)
                if anc == VIRTUAL_ROOT:
                    break
                anc = self.forest.nodes[anc].parent
        elif kind is SchemeKind.GLOBAL_ONLY_REWEIGHTED:
            reward = _ratio(g_num, g_den) / math.sqrt(n)
        else:
            s = _ratio(g_num, g_den) + _ratio(l_num, l_den)
            reward = s / math.sqrt(n) if kind is SchemeKind.REWEIGHTED_SUM else s
        return StepReward(node_id, _ratio(c, n), _ratio(g_num, g_den), _ratio(l_num, l_den), reward, n)


def node_value(forest: GenForest, node_id: int) -> float:
    return LeafStats(forest).value(node_id)


def advantages(forest: GenForest, node_id: int) -> tuple[float, float]:
    r = LeafStats(forest).step_reward(node_id, PLAIN_SUM)
    return r.global_adv, r.local_adv


def step_reward(forest: GenForest, node_id: int, scheme: RewardScheme = REWEIGHTED_SUM) -> StepReward:
    return LeafStats(forest).step_reward(node_id, scheme)


def all_step_rewards(forest: GenForest, scheme: RewardScheme = REWEIGHTED_SUM) -> dict[int, StepReward]:
    stats = LeafStats(forest)
    return {nid: stats.step_reward(nid, scheme) for nid in forest.nodes}


def training_batch(forest: GenForest, scheme: RewardScheme = REWEIGHTED_SUM) -> list[TrainingExample]:
    """One example per leaf; each token inherits its segment's reward."""
    stats = LeafStats(forest)
    rewards: dict[int, float] = {}
    out = []
    for leaf in forest.leaves():
        tokens: list[TokenRecord] = []
        adv: list[float] = []
        for nid in forest.path_to(leaf):
            r = rewards.get(nid)
            if r is None:
                r = rewards[nid] = stats.step_reward(nid, scheme).reward
            seg = forest.nodes[nid].tokens
            tokens.extend(seg)
            adv.extend([r] * len(seg))
        out.append(TrainingExample(forest.prompt, tokens, adv, leaf,
                                   reward=float(forest.nodes[leaf].correct)))
    return out


def write_batch(examples: Iterable[TrainingExample], fp: IO[str], prompt_id=None) -> None:
    """Line-delimited records: prompt id, leaf id, token ids, advantages."""
    for ex in examples:
        head = json.dumps({
            "prompt_id": prompt_id, "leaf_id": ex.leaf_id,
            "token_ids": [t.token_id for t in ex.tokens],
        }, sort_keys=True)
        adv = ",".join(format(a, ".17g") for a in ex.per_token_advantage)
        fp.write(f'{head[:-1]}, "advantages": [{adv}]}}\n')


def read_batch(fp: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fp if line.strip()]
