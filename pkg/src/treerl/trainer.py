"""RL loops on the tabular policy: TreeRL (tree search + process rewards)
and ChainRL (independent chains + outcome rewards).

A step draws ``prompts_per_step`` training prompts, samples responses for
each, turns them into ``TrainingExample`` objects and applies a single
policy-gradient update.  Each example is weighted by ``1 / (P * K_p)``
where ``P`` is the number of prompts in the step and ``K_p`` the number of
responses of its prompt, i.e. the update ascends the per-prompt mean of
``A * log pi`` averaged over prompts.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .credit import REWEIGHTED_SUM, RewardScheme, TrainingExample, training_batch
from .errors import InvalidBatch, InvalidConfig, SearchError
from .policy.base import GenParams, derive_seed
from .policy.chainsum import exact_accuracy, greedy_accuracy
from .policy.synthetic import SynthBackend, SynthPolicy, apply_policy_gradient
from .search import SearchConfig, eptree_search, multichain_sample

log = logging.getLogger(__name__)

BASE_LR = 1.5e-6


class Sampler(enum.Enum):
    TREERL = "treerl"
    CHAINRL = "chainrl"


class AdvantageVariant(enum.Enum):
    GRPO = "grpo"
    RLOO = "rloo"


def chain_advantages(rewards: Sequence[float], variant: AdvantageVariant | str = AdvantageVariant.GRPO) -> list[float]:
    """Group-relative advantages for ``K >= 2`` outcome rewards.

    GRPO uses the population standard deviation and returns zeros when all
    rewards are equal; RLOO subtracts the mean of the other ``K - 1``.
    """
    variant = AdvantageVariant(variant)
    k = len(rewards)
    if k < 2:
        raise InvalidBatch(f"{variant.value} needs at least two responses, got {k}")
    r = [float(x) for x in rewards]
    if variant is AdvantageVariant.RLOO:
        total = math.fsum(r)
        return [x - (total - x) / (k - 1) for x in r]
    mean = math.fsum(r) / k
    centered = [x - mean for x in r]
    std = math.sqrt(math.fsum(c * c for c in centered) / k)
    if std == 0.0:
        return [0.0] * k
    return [c / std for c in centered]


@dataclass(frozen=True)
class TrainConfig:
    sampler: Sampler = Sampler.TREERL
    search: SearchConfig = field(default_factory=lambda: SearchConfig(on_mask_exhausted="skip"))
    scheme: RewardScheme = REWEIGHTED_SUM
    k: int = 16
    advantage: AdvantageVariant = AdvantageVariant.RLOO
    prompts_per_step: int = 16
    lr_scale: float = 1e6  # tabular logits need a far larger step than LLM weights
    kl_beta: float = 1e-4
    steps: int = 100
    seed: int = 0
    eval_every: int = 10
    eval_k: int = 16
    length_normalize: bool = False
    snapshot_every: int = 0

    def __post_init__(self):
        for name, enum_cls in (("sampler", Sampler), ("advantage", AdvantageVariant)):
            v = getattr(self, name)
            if isinstance(v, str):
                object.__setattr__(self, name, enum_cls(v.lower()))
        if self.prompts_per_step < 1:
            raise InvalidConfig("prompts_per_step must be >= 1")
        if not self.lr > 0:
            raise InvalidConfig("learning rate must be positive")
        if self.kl_beta < 0:
            raise InvalidConfig("kl_beta must be non-negative")
        if self.steps < 0 or self.eval_every < 1:
            raise InvalidConfig("steps must be >= 0 and eval_every >= 1")
        if self.sampler is Sampler.CHAINRL and self.k < 2:
            raise InvalidConfig("ChainRL needs K >= 2")

    @property
    def lr(self) -> float:
        return BASE_LR * self.lr_scale

    @property
    def gen(self) -> GenParams:
        return self.search.gen

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler.value, "search": self.search.to_dict(),
            "scheme": {"kind": self.scheme.kind.value, "root_weight": self.scheme.root_weight,
                       "ancestor_weights": list(self.scheme.ancestor_weights)},
            "k": self.k, "advantage": self.advantage.value, "prompts_per_step": self.prompts_per_step,
            "lr_scale": self.lr_scale, "kl_beta": self.kl_beta, "steps": self.steps, "seed": self.seed,
            "eval_every": self.eval_every, "eval_k": self.eval_k,
            "length_normalize": self.length_normalize, "snapshot_every": self.snapshot_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("search"), dict):
            d["search"] = SearchConfig.from_dict(d["search"])
        if isinstance(d.get("scheme"), dict):
            s = d["scheme"]
            d["scheme"] = RewardScheme.parse(s["kind"], s.get("root_weight", 1.0), s.get("ancestor_weights", (1.0,)))
        elif isinstance(d.get("scheme"), str):
            d["scheme"] = RewardScheme.parse(d["scheme"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    mean_reward: float
    sequences: int
    tokens: int
    cumulative_tokens: int
    grad_norm: float
    mean_kl: float
    skipped_prompts: int = 0
    heldout_accuracy: float | None = None
    heldout_passrate: float | None = None
    greedy_accuracy: float | None = None


@dataclass
class TrainHistory:
    config: dict
    records: list[StepRecord] = field(default_factory=list)
    initial: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        return [json.dumps(asdict(r), sort_keys=True) for r in self.records]

    def curve(self, key: str = "heldout_accuracy") -> tuple[np.ndarray, np.ndarray]:
        """(cumulative tokens, metric) at every evaluated step, starting from the untrained policy."""
        xs = [0.0] if key in self.initial else []
        ys = [self.initial[key]] if key in self.initial else []
        for r in self.records:
            v = getattr(r, key)
            if v is not None:
                xs.append(float(r.cumulative_tokens))
                ys.append(float(v))
        return np.asarray(xs), np.asarray(ys)

    def at_tokens(self, budget: float, key: str = "heldout_accuracy") -> float:
        """Metric linearly interpolated at a cumulative token budget."""
        xs, ys = self.curve(key)
        if xs.size == 0:
            raise InvalidConfig(f"history has no {key} evaluations")
        return float(np.interp(budget, xs, ys))

    @property
    def final_tokens(self) -> int:
        return self.records[-1].cumulative_tokens if self.records else 0


def _weighted(examples: list[TrainingExample], weight: float, length_normalize: bool) -> list[TrainingExample]:
    out = []
    for ex in examples:
        w = weight / len(ex.tokens) if length_normalize else weight
        out.append(replace(ex, per_token_advantage=[a * w for a in ex.per_token_advantage]))
    return out


def _collect(policy: SynthPolicy, prompts, cfg: TrainConfig, step: int):
    backend = SynthBackend(policy)
    groups, rewards, tokens, skipped = [], [], 0, 0
    for pi, prompt in enumerate(prompts):
        gen = cfg.gen.with_seed(derive_seed(cfg.seed, 7, step, pi))
        try:
            if cfg.sampler is Sampler.TREERL:
                forest, report = eptree_search(backend, prompt, replace(cfg.search, gen=gen))
                batch = training_batch(forest, cfg.scheme)
            else:
                forest, report = multichain_sample(backend, prompt, cfg.k, gen)
                batch = training_batch(forest, cfg.scheme)  # only for tokens/labels
                advs = chain_advantages([ex.reward for ex in batch], cfg.advantage)
                batch = [replace(ex, per_token_advantage=[a] * len(ex.tokens)) for ex, a in zip(batch, advs)]
        except SearchError as exc:
            log.warning("step %d prompt %r skipped: %s", step, prompt, exc)
            skipped += 1
            continue
        tokens += report.generated_tokens
        rewards.extend(ex.reward for ex in batch)
        groups.append(batch)
    return groups, rewards, tokens, skipped


def _step(policy: SynthPolicy, prompts, cfg: TrainConfig, step: int) -> StepRecord:
    groups, rewards, tokens, skipped = _collect(policy, prompts, cfg, step)
    batch: list[TrainingExample] = []
    for g in groups:
        batch.extend(_weighted(g, 1.0 / (len(groups) * len(g)), cfg.length_normalize))
    stats = apply_policy_gradient(policy, batch, cfg.lr, cfg.kl_beta) if batch else \
        {"grad_norm": 0.0, "mean_kl": 0.0}
    if not (math.isfinite(stats["grad_norm"]) and np.all(np.isfinite(policy.logits))):
        raise InvalidBatch(f"non-finite update at step {step}")
    return StepRecord(step, float(np.mean(rewards)) if rewards else 0.0, len(batch), tokens, 0,
                      stats["grad_norm"], stats["mean_kl"], skipped)


def treerl_step(policy: SynthPolicy, prompts, cfg: TrainConfig, step: int = 0) -> StepRecord:
    if cfg.sampler is not Sampler.TREERL:
        raise InvalidConfig("treerl_step needs sampler=treerl")
    return _step(policy, prompts, cfg, step)


def chainrl_step(policy: SynthPolicy, prompts, cfg: TrainConfig, step: int = 0) -> StepRecord:
    if cfg.sampler is not Sampler.CHAINRL:
        raise InvalidConfig("chainrl_step needs sampler=chainrl")
    return _step(policy, prompts, cfg, step)


def evaluate(policy: SynthPolicy, prompts, gen: GenParams, k: int = 16) -> dict:
    """Noise-free held-out metrics from exact completion probabilities."""
    p = exact_accuracy(policy, prompts, max_len=gen.max_new_tokens,
                       temperature=gen.temperature, top_p=gen.top_p)
    return {
        "heldout_accuracy": float(np.mean(p)),
        "heldout_passrate": float(np.mean(1.0 - (1.0 - p) ** k)),
        "greedy_accuracy": greedy_accuracy(policy, prompts, gen.max_new_tokens),
    }


def train(policy: SynthPolicy, cfg: TrainConfig, train_prompts, eval_prompts,
          out_dir: str | Path | None = None, resume: "ResumePoint | None" = None) -> TrainHistory:
    """Run ``cfg.steps`` updates in place on ``policy``.

    Held-out metrics are computed before the first step and every
    ``eval_every`` steps (and on the last).  With ``out_dir`` the history is
    streamed to ``history.jsonl`` and snapshots go to ``snap-<step>.npz``;
    a non-finite update leaves ``snap-failed.npz`` behind before raising.

    ``resume`` continues an earlier run from one of its snapshots: ``policy``
    should be the loaded snapshot, and steps before ``resume.step`` are
    skipped with the prompt stream fast-forwarded, so the remaining records
    match an uninterrupted run.
    """
    if set(map(tuple, train_prompts)) & set(map(tuple, eval_prompts)):
        raise InvalidConfig("held-out prompts overlap the training prompts")
    if not train_prompts:
        raise InvalidConfig("no training prompts")
    history = TrainHistory(cfg.to_dict())
    if cfg.steps == 0:
        return history
    start, cum = (resume.step, resume.cumulative_tokens) if resume is not None else (0, 0)
    if resume is not None:
        history.initial = dict(resume.initial)
        history.records = list(resume.records)
    else:
        history.initial = evaluate(policy, eval_prompts, cfg.gen, cfg.eval_k)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fp = (out / "history.jsonl").open("w") if out is not None else None
    if out is not None:
        (out / "initial.json").write_text(json.dumps(history.initial, sort_keys=True) + "\n")
    if fp is not None:
        for rec in history.records:
            fp.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    rng = random.Random(derive_seed(cfg.seed, 11))
    try:
        for step in range(cfg.steps):
            batch_prompts = [train_prompts[rng.randrange(len(train_prompts))] for _ in range(cfg.prompts_per_step)]
            if step < start:
                continue
            try:
                rec = _step(policy, batch_prompts, cfg, step)
            except InvalidBatch:
                if out is not None:
                    policy.save(out / "snap-failed.npz")
                raise
            cum += rec.tokens
            rec.cumulative_tokens = cum
            if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
                for k, v in evaluate(policy, eval_prompts, cfg.gen, cfg.eval_k).items():
                    setattr(rec, k, v)
            history.records.append(rec)
            if fp is not None:
                fp.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            if out is not None and cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
                policy.save(out / f"snap-{step + 1}.npz")
    finally:
        if fp is not None:
            fp.close()
    return history


@dataclass
class ResumePoint:
    step: int
    cumulative_tokens: int
    records: list[StepRecord]
    initial: dict


def load_resume_point(run_dir: str | Path) -> tuple[SynthPolicy, ResumePoint]:
    """Latest ``snap-<step>.npz`` of a train run plus the history up to it."""
    run_dir = Path(run_dir)
    snaps = sorted((int(p.stem.split("-")[1]), p) for p in run_dir.glob("snap-*.npz")
                   if p.stem.split("-")[1].isdigit())
    if not snaps:
        raise InvalidConfig(f"no snapshots in {run_dir}")
    step, path = snaps[-1]
    records = []
    for line in (run_dir / "history.jsonl").read_text().splitlines():
        if line.strip():
            rec = StepRecord(**json.loads(line))
            if rec.step < step:
                records.append(rec)
    if len(records) != step:
        raise InvalidConfig(f"history in {run_dir} does not reach snapshot step {step}")
    initial = json.loads((run_dir / "initial.json").read_text())
    return SynthPolicy.load(path), ResumePoint(step, records[-1].cumulative_tokens if records else 0,
                                               records, initial)


def compare_at_matched_tokens(a: TrainHistory, b: TrainHistory, key: str = "heldout_accuracy") -> tuple[float, float, float]:
    """Both metrics at the smaller of the two final cumulative budgets."""
    budget = float(min(a.final_tokens, b.final_tokens))
    return budget, a.at_tokens(budget, key), b.at_tokens(budget, key)


@dataclass
class SeedComparison:
    seed: int
    budget: float
    initial: float
    a: float
    b: float


def compare_samplers(task, cfg_a: TrainConfig, cfg_b: TrainConfig, seeds, n_train: int = 200,
                     n_eval: int = 100, split_seed: int = 0) -> list[SeedComparison]:
    """Train two fresh policies per seed and compare held-out accuracy at matched cumulative tokens."""
    train_prompts, eval_prompts = task.split_prompts(n_train, n_eval, seed=split_seed)
    out = []
    for s in seeds:
        ha = train(task.make_policy(), replace(cfg_a, seed=s), train_prompts, eval_prompts)
        hb = train(task.make_policy(), replace(cfg_b, seed=s), train_prompts, eval_prompts)
        budget, xa, xb = compare_at_matched_tokens(ha, hb)
        out.append(SeedComparison(s, budget, ha.initial["heldout_accuracy"], xa, xb))
    return out
