"""Evaluation harness: PassRate, sweeps, ablations and fork statistics.

All tables are written as CSV with two ``#`` provenance lines (config hash
and schema version) ahead of a fixed header.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyDataset, EmptyHistogram, InvalidConfig, SearchError
from .gentree import GenForest
from .policy.base import GenParams, derive_seed
from .search import BudgetReport, ForkEvent, ForkStrategy, SearchConfig, eptree_search, multichain_sample

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def passrate(per_prompt: Sequence[Sequence[bool]]) -> float:
    """Fraction of prompts with at least one correct response."""
    if not per_prompt:
        raise EmptyDataset("no prompts")
    hits = 0
    for i, row in enumerate(per_prompt):
        if len(row) == 0:
            raise EmptyDataset(f"prompt {i} has no responses")
        hits += any(row)
    return hits / len(per_prompt)


def leaf_correctness(forest: GenForest) -> list[bool]:
    return [bool(forest.nodes[l].correct) for l in forest.leaves()]


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptyDataset("no values")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    pvalue: float
    alpha: float = 0.05

    @property
    def significant(self) -> bool:
        return self.pvalue < self.alpha


def sign_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> SignTest:
    """One-sided paired sign test of ``a > b``; ties are dropped."""
    if len(a) != len(b):
        raise InvalidConfig("sign test needs paired samples")
    wins = sum(x > y for x, y in zip(a, b))
    losses = sum(x < y for x, y in zip(a, b))
    ties = len(a) - wins - losses
    n = wins + losses
    p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return SignTest(wins, losses, ties, float(p), alpha)


@dataclass
class EvalRecord:
    dataset: str
    correctness: list[list[bool]] = field(default_factory=list)
    reports: list[BudgetReport] = field(default_factory=list)

    @property
    def passrate(self) -> float:
        return passrate(self.correctness)

    @property
    def mean_tokens(self) -> float:
        return float(np.mean([r.generated_tokens for r in self.reports])) if self.reports else 0.0

    @property
    def leaves_per_token(self) -> float:
        tok = sum(r.generated_tokens for r in self.reports)
        return sum(r.leaves for r in self.reports) / tok if tok else 0.0

    @property
    def fork_events(self) -> list[ForkEvent]:
        return [e for r in self.reports for e in r.fork_events]


def run_search(backend, prompts, cfg: SearchConfig, seed: int = 0, dataset: str = "", grader=None) -> EvalRecord:
    rec = EvalRecord(dataset)
    for i, p in enumerate(prompts):
        forest, report = eptree_search(backend, p, replace(cfg, gen=cfg.gen.with_seed(derive_seed(seed, i))), grader)
        rec.correctness.append(leaf_correctness(forest))
        rec.reports.append(report)
    return rec


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray
    chi2: float
    pvalue: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def uniform(self, alpha: float = 0.01) -> bool:
        return self.pvalue >= alpha


def _positions(events) -> tuple[np.ndarray, np.ndarray]:
    pos, length = [], []
    for e in events:
        if isinstance(e, ForkEvent):
            e = (e.branch_pos, e.branch_length)
        pos.append(e[0])
        length.append(e[1])
    return np.asarray(pos), np.asarray(length)


def fork_position_histogram(events: Iterable, bins: int = 20) -> Histogram:
    """Relative fork positions (``pos / branch_length``) binned on [0, 1].

    ``events`` are ``ForkEvent`` objects or ``(position, branch_length)``
    pairs.  Integer coordinates are binned exactly (``pos * bins //
    length``) so no position straddles a float bin edge.  The chi-square
    statistic against a flat histogram is informational only.
    """
    pos, length = _positions(events)
    if pos.size == 0:
        raise EmptyHistogram("no fork events")
    if np.issubdtype(pos.dtype, np.integer) and np.issubdtype(length.dtype, np.integer):
        idx = (pos * bins) // length
    else:
        idx = np.floor(pos / length * bins).astype(np.int64)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    res = stats.chisquare(counts)
    return Histogram(counts, np.linspace(0.0, 1.0, bins + 1), float(res.statistic), float(res.pvalue))


def fork_token_frequency(events: Iterable, top_k: int | None = None) -> list[tuple[object, int]]:
    """Fork tokens by descending count (ties by token order)."""
    c = Counter(e.token_id if isinstance(e, ForkEvent) else e for e in events)
    ranked = sorted(c.items(), key=lambda kv: (-kv[1], str(kv[0])))
    return ranked[:top_k] if top_k is not None else ranked


@dataclass
class SweepRow:
    shape: tuple[int, int, int, int]
    leaves: float
    expected_leaves: int
    passrate: float
    tokens: float
    shortfall: int = 0
    failed: bool = False
    error: str = ""

    HEADER = ("M", "N", "L", "T", "leaves", "passrate", "tokens", "expected_leaves", "shortfall", "failed")

    def csv_row(self) -> list:
        return [*self.shape, _fmt(self.leaves), _fmt(self.passrate), _fmt(self.tokens),
                self.expected_leaves, self.shortfall, int(self.failed)]


def _fmt(x: float) -> str:
    return format(x, ".10g")


def sweep(backend, prompts, configs: Sequence[SearchConfig], seed: int = 0, grader=None) -> list[SweepRow]:
    """One row per config: mean leaves, PassRate and mean generated tokens per prompt."""
    if not configs:
        raise InvalidConfig("sweep needs at least one config")
    rows = []
    for cfg in configs:
        try:
            rec = run_search(backend, prompts, cfg, seed, grader=grader)
        except SearchError as exc:
            log.warning("config %s failed: %s", cfg.shape, exc)
            rows.append(SweepRow(cfg.shape, 0.0, cfg.expected_leaves, 0.0, 0.0, failed=True, error=str(exc)))
            continue
        leaves = [r.leaves for r in rec.reports]
        rows.append(SweepRow(cfg.shape, float(np.mean(leaves)), cfg.expected_leaves, rec.passrate,
                             rec.mean_tokens, shortfall=sum(r.shortfall for r in rec.reports)))
    return rows


@dataclass
class Ablation:
    entropy: EvalRecord
    random: EvalRecord

    @property
    def passrate_delta(self) -> float:
        return self.entropy.passrate - self.random.passrate

    @property
    def token_delta(self) -> float:
        return self.entropy.mean_tokens - self.random.mean_tokens


def ablation_fork_strategy(backend, prompts, cfg: SearchConfig, seed: int = 0, grader=None) -> Ablation:
    """The same search run twice, forking by surprisal and uniformly at random."""
    if cfg.n * cfg.l * cfg.t == 0:
        raise InvalidConfig("the ablation needs N * L * T > 0")
    arms = [run_search(backend, prompts, replace(cfg, fork_strategy=s), seed, s.value, grader)
            for s in (ForkStrategy.ENTROPY, ForkStrategy.RANDOM)]
    return Ablation(*arms)


def chain_passrate_curve(backend, prompts, k_max: int, gen: GenParams, seed: int = 0, grader=None):
    """PassRate and mean tokens of the first ``k`` of ``k_max`` chains, for ``k = 1..k_max``."""
    hits = np.zeros((len(prompts), k_max), dtype=bool)
    toks = np.zeros((len(prompts), k_max))
    for i, p in enumerate(prompts):
        forest, _ = multichain_sample(backend, p, k_max, gen.with_seed(derive_seed(seed, i)), grader)
        for j, root in enumerate(forest.trees):
            hits[i, j] = bool(forest.nodes[root].correct)
            toks[i, j] = len(forest.nodes[root].tokens)
    pr = np.logical_or.accumulate(hits, axis=1).mean(axis=0)
    return np.arange(1, k_max + 1), pr, np.cumsum(toks, axis=1).mean(axis=0)


def passrate_at_tokens(budget: float, tokens: np.ndarray, rates: np.ndarray) -> float:
    """Multi-chain PassRate linearly interpolated in K at a token budget."""
    return float(np.interp(budget, tokens, rates))


def efficiency_ratio(report: BudgetReport, chain_length: int) -> float:
    """Leaves per token relative to independent chains of a fixed length."""
    return report.leaves * chain_length / report.generated_tokens


def efficiency_bridge(shapes, seeds: Sequence[int], length: int = 256, trees_per_seed: int = 32,
                      vocab_size: int = 64) -> dict:
    """Leaves/token of EPTree over matched multi-chain on fixed-length generations.

    Every generated sequence is exactly ``length`` tokens long and
    surprisals are i.i.d., so fork positions are uniform and a chain-only
    sampler obtains ``1 / length`` leaves per token.
    """
    from .policy.fixedlen import FixedLengthBackend

    backend = FixedLengthBackend(length, vocab_size)
    out = {}
    for m, n, l, t in shapes:
        if l > 2:
            raise InvalidConfig("the bridge covers L <= 2 only")
        ratios = []
        for s in seeds:
            leaves = tokens = 0
            for i in range(trees_per_seed):
                cfg = SearchConfig(m, n, l, t, mask_tail_fraction=0.0,
                                   gen=GenParams(max_new_tokens=length, seed=derive_seed(s, i)))
                _, rep = eptree_search(backend, i, cfg)
                leaves += rep.leaves
                tokens += rep.generated_tokens
            ratios.append(leaves * length / tokens)
        out[(m, n, l, t)] = ratios
    return out


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], cfg_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg_hash}\n# schema_version={SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """(provenance, header, rows); rows with the wrong width are dropped with a warning."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        return meta, [], []
    header, good = rows[0], []
    for r in rows[1:]:
        if len(r) != len(header):
            log.warning("%s: skipping malformed row %r", path, r)
            continue
        good.append(r)
    return meta, header, good
