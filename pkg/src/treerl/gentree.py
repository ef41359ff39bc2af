"""Generation forests: token segments, fork topology and leaf labels.

A forest holds the ``M`` trees grown for one prompt.  Every node is a
segment of consecutive tokens; a leaf together with all of its ancestors
spells out one complete response.  All roots hang off an implicit
``VIRTUAL_ROOT`` (id ``-1``).

Tokens keep track of the sampled continuation ("branch") they came from so
that relative positions inside a branch stay well defined after a segment
is split by a fork.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

from .errors import (
    InvalidConfig,
    InvalidForkPoint,
    InvalidSegment,
    MaskedPosition,
    NotALeaf,
    UnknownNode,
)

VIRTUAL_ROOT = -1
SCHEMA_VERSION = 1


@dataclass(frozen=True, slots=True)
class TokenRecord:
    token_id: int
    surprisal: float
    text: str | None = None

    def __post_init__(self):
        if self.token_id < 0:
            raise InvalidSegment(f"negative token id {self.token_id}")
        if not (self.surprisal >= 0.0 and math.isfinite(self.surprisal)):
            raise InvalidSegment(f"surprisal must be finite and >= 0, got {self.surprisal!r}")


@dataclass(slots=True)
class SegmentNode:
    node_id: int
    parent: int
    tokens: list[TokenRecord]
    children: list[int] = field(default_factory=list)
    terminal: bool = False
    correct: bool | None = None
    tree_index: int = 0
    branch_id: int = 0
    branch_offset: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True, slots=True)
class ForkPoint:
    """A token position chosen for branching.

    ``branch_id``/``branch_pos`` address the same token independently of
    later segment splits; ``GenForest.locate`` maps them back to a node.
    """

    tree_index: int
    node_id: int
    token_offset: int
    surprisal: float
    branch_id: int = -1
    branch_pos: int = -1


def expected_leaf_count(m: int, n: int, l: int, t: int) -> int:
    """Leaves of an ``(M, N, L, T)`` tree without early termination."""
    if m < 1:
        raise InvalidConfig(f"M must be >= 1, got {m}")
    if min(n, l, t) < 0:
        raise InvalidConfig("N, L, T must be non-negative")
    return m * (1 + n * l * t)


class GenForest:
    def __init__(self, prompt=None, config: dict | None = None, mask_tail_fraction: float = 0.0):
        if not 0.0 <= mask_tail_fraction < 1.0:
            raise InvalidConfig("mask_tail_fraction must lie in [0, 1)")
        self.prompt = prompt
        self.config = dict(config or {})
        self.mask_tail_fraction = mask_tail_fraction
        self.trees: list[int] = []
        self.nodes: dict[int, SegmentNode] = {}
        self.branch_lengths: dict[int, int] = {}
        self._branch_nodes: dict[int, list[int]] = {}
        self._next_node = 0
        self._next_branch = 0

    # -- construction -------------------------------------------------

    def _new_branch(self, length: int) -> int:
        bid = self._next_branch
        self._next_branch += 1
        self.branch_lengths[bid] = length
        self._branch_nodes[bid] = []
        return bid

    def _new_node(self, **kw) -> SegmentNode:
        node = SegmentNode(node_id=self._next_node, **kw)
        self._next_node += 1
        self.nodes[node.node_id] = node
        self._branch_nodes[node.branch_id].append(node.node_id)
        return node

    @staticmethod
    def _check_label(terminal: bool, correct):
        if correct is not None and not terminal:
            raise InvalidSegment("only terminal segments can carry a correctness label")

    def add_root_chain(self, tokens: Iterable[TokenRecord], terminal: bool, correct: bool | None = None) -> int:
        tokens = list(tokens)
        if not tokens:
            raise InvalidSegment("root chain needs at least one token")
        self._check_label(terminal, correct)
        bid = self._new_branch(len(tokens))
        node = self._new_node(
            parent=VIRTUAL_ROOT, tokens=tokens, terminal=bool(terminal), correct=correct,
            tree_index=len(self.trees), branch_id=bid, branch_offset=0,
        )
        self.trees.append(node.node_id)
        return node.node_id

    def fork(self, point: ForkPoint, new_tokens: Iterable[TokenRecord], terminal: bool,
             correct: bool | None = None) -> int:
        """Attach a new continuation after token ``point.token_offset``.

        An interior offset splits the segment: the node keeps the tokens up
        to and including the offset, the remainder becomes a fresh suffix
        child, and the new branch is appended as its sibling.
        """
        if point.node_id == VIRTUAL_ROOT:
            raise InvalidForkPoint("cannot fork the virtual root")
        node = self.node(point.node_id)
        off = point.token_offset
        if not 0 <= off < len(node.tokens):
            raise InvalidForkPoint(f"offset {off} outside segment of length {len(node.tokens)}")
        if point.tree_index != node.tree_index:
            raise InvalidForkPoint(f"node {node.node_id} is not in tree {point.tree_index}")
        if self.is_masked(node.node_id, off):
            raise MaskedPosition(f"token {off} of node {node.node_id} lies in the masked tail")
        last = off == len(node.tokens) - 1
        if last and node.is_leaf:
            raise InvalidForkPoint("cannot extend past the end of a leaf")
        new_tokens = list(new_tokens)
        if not new_tokens:
            raise InvalidSegment("fork branch needs at least one token")
        self._check_label(terminal, correct)

        if not last:
            suffix = self._new_node(
                parent=node.node_id, tokens=node.tokens[off + 1:], children=node.children,
                terminal=node.terminal, correct=node.correct, tree_index=node.tree_index,
                branch_id=node.branch_id, branch_offset=node.branch_offset + off + 1,
            )
            for c in suffix.children:
                self.nodes[c].parent = suffix.node_id
            node.tokens = node.tokens[:off + 1]
            node.children = [suffix.node_id]
            node.terminal = False
            node.correct = None

        bid = self._new_branch(len(new_tokens))
        branch = self._new_node(
            parent=node.node_id, tokens=new_tokens, terminal=bool(terminal), correct=correct,
            tree_index=node.tree_index, branch_id=bid, branch_offset=0,
        )
        node.children.append(branch.node_id)
        return branch.node_id

    def set_label(self, leaf_id: int, correct: bool) -> None:
        node = self.node(leaf_id)
        if not node.is_leaf:
            raise NotALeaf(leaf_id)
        if not node.terminal:
            raise InvalidSegment(f"leaf {leaf_id} is not terminal")
        node.correct = bool(correct)

    # -- queries ------------------------------------------------------

    def node(self, node_id: int) -> SegmentNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def children_of(self, node_id: int) -> list[int]:
        if node_id == VIRTUAL_ROOT:
            return self.trees
        return self.node(node_id).children

    def parent_of(self, node_id: int) -> int:
        return self.node(node_id).parent

    def locate(self, branch_id: int, pos: int) -> tuple[int, int]:
        """Map a (branch, position) coordinate to ``(node_id, offset)``."""
        for nid in self._branch_nodes.get(branch_id, ()):
            node = self.nodes[nid]
            if node.branch_offset <= pos < node.branch_offset + len(node.tokens):
                return nid, pos - node.branch_offset
        raise InvalidForkPoint(f"branch {branch_id} has no token at position {pos}")

    def relative_position(self, node_id: int, offset: int) -> float:
        node = self.node(node_id)
        return (node.branch_offset + offset) / self.branch_lengths[node.branch_id]

    def is_masked(self, node_id: int, offset: int, mask_tail_fraction: float | None = None) -> bool:
        rho = self.mask_tail_fraction if mask_tail_fraction is None else mask_tail_fraction
        return self.relative_position(node_id, offset) >= 1.0 - rho

    def iter_subtree(self, node_id: int = VIRTUAL_ROOT) -> Iterator[int]:
        """Pre-order node ids below ``node_id`` (inclusive unless virtual)."""
        stack = list(reversed(self.children_of(node_id)))
        if node_id != VIRTUAL_ROOT:
            stack = [node_id]
        while stack:
            nid = stack.pop()
            yield nid
            stack.extend(reversed(self.nodes[nid].children))

    def leaves_under(self, node_id: int) -> set[int]:
        if node_id != VIRTUAL_ROOT:
            self.node(node_id)
        return {nid for nid in self.iter_subtree(node_id) if not self.nodes[nid].children}

    def leaves(self) -> list[int]:
        """All leaves in depth-first order."""
        return [nid for nid in self.iter_subtree() if not self.nodes[nid].children]

    def path_to(self, node_id: int) -> list[int]:
        path = []
        while node_id != VIRTUAL_ROOT:
            path.append(node_id)
            node_id = self.node(node_id).parent
        path.reverse()
        return path

    def root_to_leaf_sequence(self, leaf_id: int) -> list[TokenRecord]:
        if not self.node(leaf_id).is_leaf:
            raise NotALeaf(leaf_id)
        out: list[TokenRecord] = []
        for nid in self.path_to(leaf_id):
            out.extend(self.nodes[nid].tokens)
        return out

    def token_count(self) -> int:
        return sum(len(n.tokens) for n in self.nodes.values())

    def tree_nodes(self, tree_index: int) -> list[int]:
        return list(self.iter_subtree(self.trees[tree_index]))

    # -- checks -------------------------------------------------------

    def validate(self) -> list[str]:
        """Return a list of invariant violations (empty when consistent)."""
        problems: list[str] = []
        seen: set[int] = set()
        for ti, root in enumerate(self.trees):
            if root not in self.nodes:
                problems.append(f"tree {ti}: root {root} missing")
                continue
            if self.nodes[root].parent != VIRTUAL_ROOT:
                problems.append(f"root {root} has parent {self.nodes[root].parent}")
            stack = [root]
            while stack:
                nid = stack.pop()
                if nid in seen:
                    problems.append(f"node {nid} reached twice (cycle or shared child)")
                    continue
                seen.add(nid)
                node = self.nodes.get(nid)
                if node is None:
                    problems.append(f"dangling child id {nid}")
                    continue
                if node.tree_index != ti:
                    problems.append(f"node {nid} tree_index {node.tree_index} != {ti}")
                for c in node.children:
                    child = self.nodes.get(c)
                    if child is not None and child.parent != nid:
                        problems.append(f"node {c} lists parent {child.parent}, expected {nid}")
                    stack.append(c)
        for nid, node in self.nodes.items():
            if nid not in seen:
                problems.append(f"node {nid} unreachable from any root")
            if not node.tokens:
                problems.append(f"node {nid} has no tokens")
            if node.children:
                if len(node.children) < 2:
                    problems.append(f"internal node {nid} has a single child")
                if node.correct is not None:
                    problems.append(f"internal node {nid} carries a correctness label")
            elif node.terminal and node.correct is None:
                problems.append(f"terminal leaf {nid} is missing its correctness label")
            elif not node.terminal and node.correct is not None:
                problems.append(f"non-terminal leaf {nid} carries a correctness label")
            for tok in node.tokens:
                if not (math.isfinite(tok.surprisal) and tok.surprisal >= 0):
                    problems.append(f"node {nid} has invalid surprisal {tok.surprisal!r}")
                    break
        return problems

    # -- serialization ------------------------------------------------

    def to_lines(self) -> list[str]:
        header = {
            "record": "header", "schema": SCHEMA_VERSION, "prompt": self.prompt,
            "M": len(self.trees), "config": self.config, "trees": self.trees,
            "mask_tail_fraction": self.mask_tail_fraction,
            "branch_lengths": [[b, n] for b, n in sorted(self.branch_lengths.items())],
        }
        lines = [json.dumps(header, sort_keys=True)]
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            rec = {
                "record": "node", "node_id": n.node_id, "parent": n.parent,
                "tree_index": n.tree_index, "branch_id": n.branch_id,
                "branch_offset": n.branch_offset, "terminal": n.terminal,
                "correct": n.correct, "children": n.children,
                "token_ids": [t.token_id for t in n.tokens],
            }
            if any(t.text is not None for t in n.tokens):
                rec["texts"] = [t.text for t in n.tokens]
            body = json.dumps(rec, sort_keys=True)
            sur = ",".join(format(t.surprisal, ".17g") for t in n.tokens)
            lines.append(f'{body[:-1]}, "surprisals": [{sur}]}}')
        return lines

    def dump(self, fp: IO[str]) -> None:
        for line in self.to_lines():
            fp.write(line + "\n")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "GenForest":
        it = (ln for ln in lines if ln.strip())
        header = json.loads(next(it))
        if header.get("record") != "header" or header.get("schema") != SCHEMA_VERSION:
            raise InvalidSegment("missing or unsupported forest header")
        prompt = header["prompt"]
        if isinstance(prompt, list):
            prompt = tuple(prompt)
        forest = cls(prompt, header["config"], header["mask_tail_fraction"])
        forest.trees = list(header["trees"])
        for b, n in header["branch_lengths"]:
            forest.branch_lengths[b] = n
            forest._branch_nodes[b] = []
        for line in it:
            rec = json.loads(line)
            texts = rec.get("texts") or [None] * len(rec["token_ids"])
            tokens = [TokenRecord(i, float(s), tx)
                      for i, s, tx in zip(rec["token_ids"], rec["surprisals"], texts)]
            node = SegmentNode(
                node_id=rec["node_id"], parent=rec["parent"], tokens=tokens,
                children=list(rec["children"]), terminal=rec["terminal"], correct=rec["correct"],
                tree_index=rec["tree_index"], branch_id=rec["branch_id"],
                branch_offset=rec["branch_offset"],
            )
            forest.nodes[node.node_id] = node
            forest._branch_nodes.setdefault(node.branch_id, []).append(node.node_id)
        forest._next_node = max(forest.nodes, default=-1) + 1
        forest._next_branch = max(forest.branch_lengths, default=-1) + 1
        return forest

    @classmethod
    def load(cls, fp: IO[str]) -> "GenForest":
        return cls.from_lines(fp)


def insert_sequence(forest: GenForest, tokens: list[TokenRecord], terminal: bool,
                    correct: bool | None = None) -> int:
    """Merge a complete sequence into ``forest`` along its longest shared prefix.

    Used by samplers that produce whole sequences (e.g. UCT rollouts).  A
    sequence that is entirely shared with an existing path branches off one
    token earlier, so it still ends in its own leaf.  Returns the new leaf id.
    """
    ids = [t.token_id for t in tokens]
    last = None  # (node_id, offset) of the deepest shared token
    shared = 0
    candidates = forest.trees
    while candidates and shared < len(ids):
        node = next((forest.nodes[c] for c in candidates
                     if forest.nodes[c].tokens[0].token_id == ids[shared]), None)
        if node is None:
            break
        k = 0
        while k < len(node.tokens) and shared < len(ids) and node.tokens[k].token_id == ids[shared]:
            k += 1
            shared += 1
        last = (node.node_id, k - 1)
        if k < len(node.tokens):
            break
        candidates = node.children
    if last is None:
        return forest.add_root_chain(tokens, terminal, correct)
    nid, off = last
    node = forest.nodes[nid]
    if shared == len(ids) or (off == len(node.tokens) - 1 and node.is_leaf):
        shared -= 1
        if shared == 0:
            return forest.add_root_chain(tokens, terminal, correct)
        while off == 0:
            nid = forest.nodes[nid].parent
            off = len(forest.nodes[nid].tokens)
        off -= 1
        node = forest.nodes[nid]
    point = ForkPoint(node.tree_index, nid, off, node.tokens[off].surprisal)
    return forest.fork(point, tokens[shared:], terminal, correct)
