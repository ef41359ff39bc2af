"""Tree and chain samplers that all emit ``GenForest`` objects.

``eptree_search`` grows ``M`` trees: one sampled chain each, then ``L``
rounds in which the ``N`` most surprising unmasked tokens of every tree are
re-sampled ``T`` times from the prefix that precedes them.  ``mcts_search``
is a plain UCT baseline over fixed-size token blocks, and
``multichain_sample`` is the degenerate ``(K, 0, 0, 0)`` tree.

Token accounting only counts freshly sampled tokens; shared prefixes are
never charged twice.
"""

from __future__ import annotations

import enum
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

from .errors import BackendError, InvalidConfig, MaskExhausted, SearchError
from .gentree import VIRTUAL_ROOT, ForkPoint, GenForest, TokenRecord, expected_leaf_count, insert_sequence
from .policy.base import Continuation, GenParams, derive_seed

log = logging.getLogger(__name__)


class ForkStrategy(enum.Enum):
    ENTROPY = "entropy"
    RANDOM = "random"


@dataclass(frozen=True)
class SearchConfig:
    m: int = 6
    n: int = 2
    l: int = 1
    t: int = 2
    mask_tail_fraction: float = 0.2
    fork_strategy: ForkStrategy = ForkStrategy.ENTROPY
    gen: GenParams = field(default_factory=GenParams)
    on_mask_exhausted: str = "error"  # or "skip": record the shortfall and continue
    ranking: str = "surprisal"  # "shannon" (not the default) needs backend.shannon_entropy

    def __post_init__(self):
        if self.m < 1:
            raise InvalidConfig("M must be >= 1")
        if min(self.n, self.l, self.t) < 0:
            raise InvalidConfig("N, L, T must be non-negative")
        if not 0.0 <= self.mask_tail_fraction < 1.0:
            raise InvalidConfig("mask_tail_fraction must lie in [0, 1)")
        if isinstance(self.fork_strategy, str):
            object.__setattr__(self, "fork_strategy", ForkStrategy(self.fork_strategy.lower()))
        if self.on_mask_exhausted not in ("error", "skip"):
            raise InvalidConfig("on_mask_exhausted must be 'error' or 'skip'")
        if self.ranking not in ("surprisal", "shannon"):
            raise InvalidConfig("ranking must be 'surprisal' or 'shannon'")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.m, self.n, self.l, self.t)

    @property
    def expected_leaves(self) -> int:
        return expected_leaf_count(*self.shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fork_strategy"] = self.fork_strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if isinstance(d.get("gen"), dict):
            d["gen"] = GenParams(**d["gen"])
        return cls(**d)


@dataclass(frozen=True)
class MctsConfig:
    block_size: int = 16
    expansion_width: int = 2
    c_uct: float = 1.0
    budget: int = 1024
    gen: GenParams = field(default_factory=GenParams)
    max_stalls: int = 64

    def __post_init__(self):
        if self.budget <= 0:
            raise InvalidConfig("MCTS token budget must be positive")
        if self.block_size < 1 or self.expansion_width < 1:
            raise InvalidConfig("block_size and expansion_width must be >= 1")


@dataclass
class ForkEvent:
    tree_index: int
    iteration: int
    branch_id: int
    branch_pos: int
    branch_length: int
    token_id: int
    surprisal: float

    @property
    def relative_position(self) -> float:
        return self.branch_pos / self.branch_length


@dataclass
class BudgetReport:
    generated_tokens: int
    leaves: int
    distinct_leaves: int
    shortfall: int = 0
    fork_events: list[ForkEvent] = field(default_factory=list)

    @property
    def leaves_per_token(self) -> float:
        return self.leaves / self.generated_tokens if self.generated_tokens else 0.0


def _distinct_leaves(forest: GenForest) -> int:
    return len({tuple(t.token_id for t in forest.root_to_leaf_sequence(l)) for l in forest.leaves()})


def _tree_candidates(forest: GenForest, tree_index: int, rho: float, already_forked):
    """(score-ready) candidate tuples ``(abs_pos, node_id, offset, branch_id, branch_pos)``."""
    root = forest.trees[tree_index]
    out = []
    stack = [(root, 0)]
    while stack:
        nid, depth = stack.pop()
        node = forest.nodes[nid]
        blen = forest.branch_lengths[node.branch_id]
        for off in range(len(node.tokens)):
            pos = node.branch_offset + off
            if nid == root and off == 0:
                continue  # nothing precedes the first token; re-sampling it is a fresh chain
            if pos / blen >= 1.0 - rho:
                continue
            if (node.branch_id, pos) in already_forked:
                continue
            out.append((depth + off, nid, off, node.branch_id, pos))
        for c in reversed(node.children):
            stack.append((c, depth + len(node.tokens)))
    return out


def select_fork_points(forest: GenForest, tree_index: int, n: int, rho: float,
                       strategy: ForkStrategy = ForkStrategy.ENTROPY, already_forked=frozenset(),
                       rng: random.Random | None = None,
                       score: Callable[[int, int], float] | None = None) -> list[ForkPoint]:
    """Pick up to ``n`` token positions of one tree to re-sample.

    Candidates are tokens whose position relative to their branch length is
    below ``1 - rho`` and that were not forked before.  ``ENTROPY`` takes the
    top ``n`` by surprisal (ties: earlier absolute position, then lower node
    id); ``RANDOM`` draws ``n`` distinct candidates uniformly.
    """
    if not forest.trees or tree_index >= len(forest.trees):
        raise InvalidConfig(f"no tree {tree_index}")
    cands = _tree_candidates(forest, tree_index, rho, already_forked)
    if not cands:
        raise MaskExhausted(f"tree {tree_index}: every token position is masked or already forked")
    if score is None:
        def score(nid, off):
            return forest.nodes[nid].tokens[off].surprisal
    if strategy is ForkStrategy.ENTROPY:
        cands.sort(key=lambda c: (-score(c[1], c[2]), c[0], c[1]))
        chosen = cands[:n]
    else:
        rng = rng or random.Random(0)
        chosen = rng.sample(cands, min(n, len(cands)))
    return [ForkPoint(tree_index, nid, off, forest.nodes[nid].tokens[off].surprisal, bid, pos)
            for _, nid, off, bid, pos in chosen]


def _prefix_before(forest: GenForest, node_id: int, offset: int) -> list[TokenRecord]:
    out: list[TokenRecord] = []
    for nid in forest.path_to(node_id)[:-1]:
        out.extend(forest.nodes[nid].tokens)
    out.extend(forest.nodes[node_id].tokens[:offset])
    return out


def _attach_point(forest: GenForest, tree_index: int, node_id: int, offset: int) -> ForkPoint:
    """Fork location that makes the new branch replace token ``offset`` of ``node_id``."""
    if offset == 0:
        node_id = forest.nodes[node_id].parent
        offset = len(forest.nodes[node_id].tokens)
    tok = forest.nodes[node_id].tokens[offset - 1]
    return ForkPoint(tree_index, node_id, offset - 1, tok.surprisal)


def eptree_search(backend, prompt, cfg: SearchConfig, grader=None,
                  executor=None) -> tuple[GenForest, BudgetReport]:
    """Entropy-guided tree search for one prompt.

    ``grader(prompt, tokens)`` overrides ``backend.grade``.  ``executor``
    (anything with an order-preserving ``map``) lets the expansions of one
    iteration run concurrently; results are attached in a fixed order so the
    forest does not depend on it.
    """
    grade = grader or backend.grade
    seed = cfg.gen.seed
    forest = GenForest(prompt, config=cfg.to_dict(), mask_tail_fraction=cfg.mask_tail_fraction)
    used = 0
    events: list[ForkEvent] = []
    mapper = executor.map if executor is not None else map

    def sample(job):
        prefix, key = job
        try:
            cont = backend.sample_continuation(prompt, prefix, cfg.gen.with_seed(derive_seed(seed, *key)))
        except BackendError as exc:
            raise SearchError(f"backend failed: {exc}") from exc
        if not cont.tokens:
            raise SearchError("backend returned an empty continuation")
        return cont

    def label(prefix, cont: Continuation):
        return bool(grade(prompt, list(prefix) + cont.tokens)) if cont.terminal else None

    for i, cont in enumerate(mapper(sample, [([], (0, i)) for i in range(cfg.m)])):
        used += len(cont.tokens)
        forest.add_root_chain(cont.tokens, cont.terminal, label([], cont))

    forked = [set() for _ in range(cfg.m)]
    rng = random.Random(derive_seed(seed, 3))
    score_fn = _shannon_scorer(backend, forest, prompt) if cfg.ranking == "shannon" else None
    shortfall_trees = 0
    if cfg.n and cfg.t:
        for it in range(cfg.l):
            jobs, where = [], []
            for i in range(cfg.m):
                try:
                    points = select_fork_points(forest, i, cfg.n, cfg.mask_tail_fraction,
                                                cfg.fork_strategy, forked[i], rng, score_fn)
                except MaskExhausted:
                    if cfg.on_mask_exhausted == "error":
                        raise
                    shortfall_trees += 1
                    continue
                for fi, pt in enumerate(points):
                    forked[i].add((pt.branch_id, pt.branch_pos))
                    tok = forest.nodes[pt.node_id].tokens[pt.token_offset]
                    events.append(ForkEvent(i, it, pt.branch_id, pt.branch_pos,
                                            forest.branch_lengths[pt.branch_id], tok.token_id, tok.surprisal))
                    prefix = _prefix_before(forest, pt.node_id, pt.token_offset)
                    for b in range(cfg.t):
                        jobs.append((prefix, (1, it, i, fi, b)))
                        where.append((i, pt))
            for (prefix, _), (i, pt), cont in zip(jobs, where, mapper(sample, jobs)):
                used += len(cont.tokens)
                nid, off = forest.locate(pt.branch_id, pt.branch_pos)
                forest.fork(_attach_point(forest, i, nid, off), cont.tokens, cont.terminal, label(prefix, cont))

    leaves = len(forest.leaves())
    report = BudgetReport(used, leaves, _distinct_leaves(forest),
                          shortfall=cfg.expected_leaves - leaves, fork_events=events)
    if shortfall_trees:
        log.info("%d tree iterations had no fork candidates", shortfall_trees)
    return forest, report


def _shannon_scorer(backend, forest: GenForest, prompt):
    if not hasattr(backend, "shannon_entropy"):
        raise InvalidConfig("backend offers no full-distribution entropy")

    def score(nid, off):
        ids = [t.token_id for t in _prefix_before(forest, nid, off)]
        return backend.shannon_entropy(prompt, ids)
    return score


def multichain_sample(backend, prompt, k: int, gen: GenParams | None = None,
                      grader=None, executor=None) -> tuple[GenForest, BudgetReport]:
    """``k`` independent chains: the ``(k, 0, 0, 0)`` tree."""
    if k < 1:
        raise InvalidConfig("K must be >= 1")
    cfg = SearchConfig(k, 0, 0, 0, gen=gen or GenParams())
    return eptree_search(backend, prompt, cfg, grader=grader, executor=executor)


class _UctNode:
    __slots__ = ("prefix", "children", "visits", "value", "terminal", "reward")

    def __init__(self, prefix, terminal=False):
        self.prefix = prefix
        self.children: list[_UctNode] = []
        self.visits = 0
        self.value = 0.0
        self.terminal = terminal
        self.reward = 0.0

    def uct(self, parent_visits: int, c: float) -> float:
        if self.visits == 0:
            return math.inf
        q = self.value / self.visits
        if c == 0:
            return q
        return q + c * math.sqrt(math.log(parent_visits) / self.visits)


def mcts_search(backend, prompt, cfg: MctsConfig, grader=None) -> tuple[GenForest, BudgetReport]:
    """UCT over token blocks; every finished rollout becomes a leaf.

    Steps are blocks of ``block_size`` tokens.  Each iteration selects by
    UCT, expands one block below the selected node, rolls out to the end of
    the sequence and backs up the 0/1 outcome.  Generation stops once the
    token budget is spent; a rollout cut short by the budget is discarded.
    """
    grade = grader or backend.grade
    root = _UctNode([])
    used = 0
    finished: list[tuple[list[TokenRecord], bool]] = []
    stalls = 0
    it = 0
    gen = cfg.gen

    def call(prefix, limit, *key):
        try:
            return backend.sample_continuation(prompt, prefix, gen.with_seed(derive_seed(gen.seed, *key)), limit=limit)
        except BackendError as exc:
            raise SearchError(f"backend failed: {exc}") from exc

    while used < cfg.budget and stalls < cfg.max_stalls:
        it += 1
        node, path = root, [root]
        while not node.terminal and len(node.children) >= cfg.expansion_width:
            parent_visits = max(node.visits, 1)
            node = max(node.children, key=lambda ch: ch.uct(parent_visits, cfg.c_uct))
            path.append(node)
        if node.terminal:
            reward = node.reward
            stalls += 1
        else:
            stalls = 0
            block = call(node.prefix, min(cfg.block_size, cfg.budget - used), 4, it)
            used += len(block.tokens)
            if not block.tokens:
                break
            child = _UctNode(node.prefix + block.tokens, block.terminal)
            node.children.append(child)
            path.append(child)
            full, complete = child.prefix, block.terminal
            if not block.terminal:
                if used >= cfg.budget:
                    break
                roll = call(child.prefix, cfg.budget - used, 5, it)
                used += len(roll.tokens)
                full, complete = child.prefix + roll.tokens, roll.terminal
            if not complete:
                break
            reward = float(bool(grade(prompt, full)))
            if child.terminal:
                child.reward = reward
            finished.append((full, bool(reward)))
        for n in path:
            n.visits += 1
            n.value += reward
    if not finished:
        raise SearchError(f"token budget {cfg.budget} is too small for one rollout")

    forest = GenForest(prompt, config={"sampler": "mcts", **asdict(cfg)})
    for tokens, ok in finished:
        insert_sequence(forest, tokens, True, ok)
    leaves = len(forest.leaves())
    return forest, BudgetReport(used, leaves, _distinct_leaves(forest))
