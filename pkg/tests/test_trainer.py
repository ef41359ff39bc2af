import math
import shutil
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treerl import trainer
from treerl.errors import InvalidBatch, InvalidConfig
from treerl.policy import ChainSumTask
from treerl.search import SearchConfig
from treerl.trainer import (AdvantageVariant, TrainConfig, TrainHistory, chain_advantages, chainrl_step,
                            compare_at_matched_tokens, load_resume_point, train, treerl_step)

LONG = ChainSumTask(modulus=5, k=16, eos_bias=-20.0)
EXACT = ChainSumTask(modulus=5, k=3, skill=60.0, noise=0.0)  # always answers correctly


def test_grpo_example():
    assert chain_advantages([1, 0, 0, 1], "grpo") == [1.0, -1.0, -1.0, 1.0]


def test_rloo_example():
    assert chain_advantages([1, 0], "rloo") == [1.0, -1.0]


@pytest.mark.parametrize("variant", list(AdvantageVariant))
def test_uniform_rewards_give_zero(variant):
    assert chain_advantages([1, 1, 1], variant) == [0.0, 0.0, 0.0]
    assert chain_advantages([0, 0], variant) == [0.0, 0.0]


def test_single_response_rejected():
    with pytest.raises(InvalidBatch):
        chain_advantages([1], "rloo")


rewards = st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=64)


@given(rewards)
def test_grpo_standardizes(r):
    a = chain_advantages(r, "grpo")
    if len(set(r)) == 1:
        assert a == [0.0] * len(r)
        return
    assert abs(math.fsum(a)) <= 1e-12
    assert abs(math.fsum(x * x for x in a) / len(a) - 1.0) <= 1e-12


@given(rewards)
def test_rloo_sums_to_zero(r):
    assert abs(math.fsum(chain_advantages(r, "rloo"))) <= 1e-12


def test_treerl_batch_size():
    pol = LONG.make_policy()
    cfg = TrainConfig(search=SearchConfig(6, 2, 1, 2))
    rec = treerl_step(pol, LONG.sample_prompts(16, 1), cfg)
    assert rec.sequences == 480 and rec.skipped_prompts == 0


def test_chainrl_batch_size():
    pol = LONG.make_policy()
    rec = chainrl_step(pol, LONG.sample_prompts(16, 1), TrainConfig(sampler="chainrl", k=16))
    assert rec.sequences == 256


def test_step_kind_checked():
    with pytest.raises(InvalidConfig):
        treerl_step(LONG.make_policy(), [(0,) * 16], TrainConfig(sampler="chainrl"))


def test_all_correct_is_a_zero_gradient_step():
    for cfg in (TrainConfig(sampler="chainrl", kl_beta=0.0),
                TrainConfig(search=SearchConfig(2, 1, 1, 2, on_mask_exhausted="skip"), kl_beta=0.0)):
        pol = EXACT.make_policy()
        prompts = EXACT.sample_prompts(4, 0)
        step = chainrl_step if cfg.sampler.value == "chainrl" else treerl_step
        step(pol, prompts, cfg)  # populate rows
        before = pol.logits.copy()
        rec = step(pol, prompts, cfg, step=1)
        assert rec.mean_reward == 1.0 and rec.grad_norm == 0.0
        assert np.array_equal(before, pol.logits)


def test_treerl_step_moves_logits():
    task = ChainSumTask(modulus=5, k=4)
    pol = task.make_policy()
    before = pol.logits.copy()
    rec = treerl_step(pol, task.sample_prompts(4, 3), TrainConfig())
    assert rec.grad_norm > 0
    common = min(len(before), len(pol.logits))
    assert len(pol.logits) > len(before) or not np.array_equal(before[:common], pol.logits[:common])


def _small(**kw):
    base = dict(steps=6, prompts_per_step=4, eval_every=2, search=SearchConfig(3, 2, 1, 2, on_mask_exhausted="skip"))
    base.update(kw)
    return TrainConfig(**base)


def test_steps_zero_is_a_no_op():
    task = ChainSumTask()
    pol = task.make_policy()
    tr, ev = task.split_prompts(20, 10)
    pol.rows_for(tr[0], [1, 2])
    before = pol.logits.copy()
    hist = train(pol, _small(steps=0), tr, ev)
    assert hist.records == [] and np.array_equal(before, pol.logits)


def test_training_is_deterministic():
    task = ChainSumTask()
    tr, ev = task.split_prompts(30, 10)
    for sampler in ("treerl", "chainrl"):
        a = train(task.make_policy(), _small(sampler=sampler, k=4), tr, ev)
        b = train(task.make_policy(), _small(sampler=sampler, k=4), tr, ev)
        assert a.to_lines() == b.to_lines() and a.initial == b.initial


def test_cumulative_tokens_non_decreasing():
    task = ChainSumTask()
    tr, ev = task.split_prompts(30, 10)
    hist = train(task.make_policy(), _small(), tr, ev)
    cum = [r.cumulative_tokens for r in hist.records]
    assert cum == sorted(cum) and cum[-1] == sum(r.tokens for r in hist.records)
    assert [r.heldout_accuracy is not None for r in hist.records] == [False, True] * 3


def test_overlapping_prompts_rejected():
    task = ChainSumTask()
    tr, ev = task.split_prompts(20, 10)
    with pytest.raises(InvalidConfig):
        train(task.make_policy(), _small(), tr, ev + tr[:1])


def test_kl_stays_bounded():
    task = ChainSumTask(modulus=5, k=4, skill=3.0)
    tr, ev = task.split_prompts(100, 20)
    cfg = _small(steps=200, eval_every=50, sampler="chainrl", k=8)
    hist = train(task.make_policy(), cfg, tr, ev)
    kl_cap = 2.0
    assert max(r.mean_kl for r in hist.records) <= kl_cap


def test_non_finite_update_leaves_snapshot(tmp_path, monkeypatch):
    task = ChainSumTask()
    tr, ev = task.split_prompts(20, 10)
    monkeypatch.setattr(trainer, "apply_policy_gradient",
                        lambda *a, **kw: {"grad_norm": float("nan"), "mean_kl": 0.0})
    with pytest.raises(InvalidBatch):
        train(task.make_policy(), _small(), tr, ev, out_dir=tmp_path)
    assert (tmp_path / "snap-failed.npz").exists()


def test_resume_from_snapshot(tmp_path):
    task = ChainSumTask()
    tr, ev = task.split_prompts(30, 10)
    cfg = _small(steps=6, snapshot_every=2)
    full = train(task.make_policy(), cfg, tr, ev, out_dir=tmp_path / "a")
    (tmp_path / "b").mkdir()
    for name in ("history.jsonl", "initial.json", "snap-2.npz"):
        shutil.copy(tmp_path / "a" / name, tmp_path / "b" / name)
    pol, point = load_resume_point(tmp_path / "b")
    assert point.step == 2
    resumed = train(pol, cfg, tr, ev, out_dir=tmp_path / "b", resume=point)
    assert resumed.to_lines() == full.to_lines()


def test_config_round_trip():
    cfg = TrainConfig(sampler="chainrl", advantage="grpo", k=8, lr_scale=3.0, steps=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.lr == pytest.approx(4.5e-6)
    with pytest.raises(InvalidConfig):
        TrainConfig(prompts_per_step=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(lr_scale=0.0)


def test_matched_token_comparison():
    a, b = TrainHistory({}), TrainHistory({})
    for h, toks, acc in ((a, [100, 200], [0.5, 0.7]), (b, [150, 300], [0.4, 0.9])):
        h.initial = {"heldout_accuracy": 0.1}
        h.records = [trainer.StepRecord(i, 0, 0, 0, t, 0, 0, heldout_accuracy=v)
                     for i, (t, v) in enumerate(zip(toks, acc))]
    budget, xa, xb = compare_at_matched_tokens(a, b)
    assert budget == 200 and xa == 0.7 and xb == pytest.approx(0.4 + 0.5 * 50 / 150)


@pytest.mark.xfail(strict=True, reason="the tail mask and the fixed first token make EPTree branches "
                                       "long, so a (6,2,1,2) step costs about 1.2-1.4x a K=16 step")
def test_budget_parity_within_15_percent():
    task = ChainSumTask()
    pol = task.make_policy()
    prompts = task.sample_prompts(64, 5)
    tree = treerl_step(pol, prompts, TrainConfig()).tokens
    chain = chainrl_step(pol, prompts, TrainConfig(sampler="chainrl")).tokens
    assert abs(tree / chain - 1.0) <= 0.15
