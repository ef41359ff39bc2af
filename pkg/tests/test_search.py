import random
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import chain_forest
from treerl.errors import BackendError, InvalidConfig, MaskExhausted, SearchError
from treerl.gentree import expected_leaf_count
from treerl.policy import ChainSumTask, GenParams, SynthBackend
from treerl.search import (ForkStrategy, MctsConfig, SearchConfig, _UctNode, eptree_search, mcts_search,
                           multichain_sample, select_fork_points)

LONG = ChainSumTask(modulus=5, k=16, eos_bias=-20.0)  # ends by EOS after 17 tokens, far below max length


def long_backend():
    return SynthBackend(LONG.make_policy())


def prompt_of(task, seed=0):
    return task.sample_prompts(1, seed)[0]


class CountingBackend:
    def __init__(self, inner):
        self.inner = inner
        self.total = 0

    def sample_continuation(self, *a, **kw):
        c = self.inner.sample_continuation(*a, **kw)
        self.total += len(c.tokens)
        return c

    def grade(self, *a):
        return self.inner.grade(*a)


class BrokenBackend:
    def sample_continuation(self, *a, **kw):
        raise BackendError("Transport", "down")

    def grade(self, *a):
        return False


def test_fork_selection_example():
    f = chain_forest([0.1, 2.0, 0.5, 3.0, 0.2])
    pts = select_fork_points(f, 0, 2, 0.0)
    assert [p.token_offset for p in pts] == [3, 1]


def test_fork_selection_mask_exhausted():
    f = chain_forest([0.1, 2.0, 0.5, 3.0, 0.2])
    with pytest.raises(MaskExhausted):
        select_fork_points(f, 0, 2, 0.99)


def test_fork_selection_tie_prefers_earlier():
    f = chain_forest([0.1, 1.5, 0.5, 1.5, 0.2])
    assert [p.token_offset for p in select_fork_points(f, 0, 1, 0.0)] == [1]


def test_fork_selection_skips_forked_positions():
    f = chain_forest([0.1, 2.0, 0.5, 3.0, 0.2])
    pts = select_fork_points(f, 0, 2, 0.0, already_forked={(0, 3)})
    assert [p.token_offset for p in pts] == [1, 2]


@given(st.lists(st.floats(0, 20), min_size=2, max_size=40), st.integers(1, 6), st.floats(0, 0.9),
       st.sampled_from(list(ForkStrategy)), st.integers(0, 1000))
def test_fork_points_distinct_and_unmasked(sur, n, rho, strategy, seed):
    f = chain_forest(sur)
    try:
        pts = select_fork_points(f, 0, n, rho, strategy, rng=random.Random(seed))
    except MaskExhausted:
        assert all(p / len(sur) >= 1 - rho for p in range(1, len(sur)))
        return
    offs = [p.token_offset for p in pts]
    assert len(set(offs)) == len(offs) == min(n, sum(1 for p in range(1, len(sur)) if p / len(sur) < 1 - rho))
    assert all(o / len(sur) < 1 - rho for o in offs)
    if strategy is ForkStrategy.ENTROPY:
        rest = [sur[p] for p in range(1, len(sur)) if p not in offs and p / len(sur) < 1 - rho]
        assert all(sur[o] >= r for o in offs for r in rest)


@pytest.mark.parametrize("shape", [(6, 2, 1, 2), (16, 0, 0, 0), (7, 2, 1, 2), (4, 2, 2, 2), (3, 1, 3, 2)])
def test_leaf_count_identity(shape):
    cfg = SearchConfig(*shape, gen=GenParams(seed=11))
    forest, rep = eptree_search(long_backend(), prompt_of(LONG), cfg)
    assert rep.leaves == len(forest.leaves()) == expected_leaf_count(*shape)
    assert rep.shortfall == 0
    assert forest.validate() == []
    assert rep.distinct_leaves <= rep.leaves <= rep.generated_tokens


def test_multichain_shape():
    forest, rep = eptree_search(long_backend(), prompt_of(LONG), SearchConfig(16, 0, 0, 0))
    assert len(forest.trees) == 16
    assert all(not forest.nodes[r].children for r in forest.trees)


def test_deterministic_policy_duplicates():
    task = ChainSumTask(modulus=5, k=3, skill=60.0, noise=0.0)
    forest, rep = eptree_search(SynthBackend(task.make_policy()), (1, 2, 3), SearchConfig(1, 1, 1, 1))
    assert rep.leaves == 2 and rep.distinct_leaves == 1


def test_multichain_deterministic_single():
    task = ChainSumTask(modulus=5, k=3, skill=60.0, noise=0.0)
    forest, rep = multichain_sample(SynthBackend(task.make_policy()), (1, 2, 3), 1)
    assert rep.leaves == 1 and rep.generated_tokens == 4


def test_multichain_matches_degenerate_tree():
    b = long_backend()
    gen = GenParams(seed=5)
    a, ra = multichain_sample(b, prompt_of(LONG), 16, gen)
    t, rt = eptree_search(b, prompt_of(LONG), SearchConfig(16, 0, 0, 0, gen=gen))
    assert a.to_lines() == t.to_lines() and ra == rt


def test_budget_accounting_counts_every_sampled_token():
    b = CountingBackend(long_backend())
    forest, rep = eptree_search(b, prompt_of(LONG), SearchConfig(5, 2, 2, 2, gen=GenParams(seed=2)))
    assert rep.generated_tokens == b.total == forest.token_count()


def test_entropy_and_random_share_topology_counts():
    b = long_backend()
    counts = []
    for s in ForkStrategy:
        forest, rep = eptree_search(b, prompt_of(LONG), SearchConfig(6, 2, 1, 2, fork_strategy=s))
        counts.append((rep.leaves, len(forest.trees)))
    assert counts[0] == counts[1]


def test_search_is_reproducible():
    b = long_backend()
    cfg = SearchConfig(4, 2, 2, 2, gen=GenParams(seed=123), fork_strategy="random")
    a = eptree_search(b, prompt_of(LONG), cfg)
    c = eptree_search(long_backend(), prompt_of(LONG), cfg)
    assert a[0].to_lines() == c[0].to_lines() and a[1] == c[1]


def test_executor_does_not_change_result():
    b = long_backend()
    cfg = SearchConfig(4, 2, 2, 2, gen=GenParams(seed=9))
    serial = eptree_search(b, prompt_of(LONG), cfg)[0].to_lines()
    with ThreadPoolExecutor(4) as pool:
        par = eptree_search(b, prompt_of(LONG), cfg, executor=pool)[0].to_lines()
    assert serial == par


def test_fork_resamples_selected_token():
    forest, rep = eptree_search(long_backend(), prompt_of(LONG), SearchConfig(2, 2, 1, 2, gen=GenParams(seed=1)))
    for ev in rep.fork_events:
        assert 0 < ev.branch_pos and ev.branch_pos / ev.branch_length < 0.8
    # every new branch starts where its fork event's token stood
    depth = {}
    for leaf in forest.leaves():
        path = forest.path_to(leaf)
        branch = forest.nodes[path[-1]]
        if branch.branch_offset == 0 and len(path) > 1:
            depth[branch.branch_id] = sum(len(forest.nodes[n].tokens) for n in path[:-1])
    # with L=1 every fork sits on a root chain, so branch depth equals the re-sampled position
    assert sorted(depth.values()) == sorted(ev.branch_pos for ev in rep.fork_events for _ in range(2))


def test_mask_exhausted_policy():
    task = ChainSumTask(modulus=5, k=1, skill=60.0, noise=0.0)  # two-token chains
    b = SynthBackend(task.make_policy())
    with pytest.raises(MaskExhausted):
        eptree_search(b, (3,), SearchConfig(2, 1, 1, 1, mask_tail_fraction=0.6))
    _, rep = eptree_search(b, (3,), SearchConfig(2, 1, 1, 1, mask_tail_fraction=0.6, on_mask_exhausted="skip"))
    assert rep.shortfall == 2 and rep.leaves == 2


def test_backend_failure_is_search_error():
    with pytest.raises(SearchError) as e:
        eptree_search(BrokenBackend(), (1,), SearchConfig())
    assert isinstance(e.value.__cause__, BackendError)


def test_shannon_ranking_is_optional():
    b = long_backend()
    cfg = SearchConfig(3, 2, 1, 2, ranking="shannon")
    forest, rep = eptree_search(b, prompt_of(LONG), cfg)
    assert rep.leaves == cfg.expected_leaves
    with pytest.raises(InvalidConfig):
        SearchConfig(ranking="max")


def test_config_round_trip():
    cfg = SearchConfig(7, 2, 1, 2, 0.3, "random", GenParams(1.0, 0.9, 32, 5))
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg


# -- MCTS -------------------------------------------------------------------

def test_mcts_single_rollout_budget():
    task = ChainSumTask(modulus=5, k=3, skill=60.0, noise=0.0)
    forest, rep = mcts_search(SynthBackend(task.make_policy()), (1, 2, 3), MctsConfig(budget=4))
    assert rep.leaves == 1 and rep.generated_tokens == 4


def test_mcts_budget_too_small():
    with pytest.raises(SearchError):
        mcts_search(long_backend(), prompt_of(LONG), MctsConfig(budget=5))


def test_uct_zero_exploration_is_greedy():
    parent = _UctNode([])
    a, b = _UctNode([1]), _UctNode([2])
    a.visits, a.value = 10, 9.0
    b.visits, b.value = 1, 0.0
    parent.children = [a, b]
    assert max(parent.children, key=lambda c: c.uct(11, 0.0)) is a
    assert max(parent.children, key=lambda c: c.uct(11, 5.0)) is b


def test_mcts_leaves_are_valid():
    forest, rep = mcts_search(long_backend(), prompt_of(LONG), MctsConfig(block_size=4, budget=400))
    assert forest.validate() == []
    assert rep.leaves == len(forest.leaves()) and rep.generated_tokens <= 400


def _leaf_efficiency_pairs(seeds=range(20)):
    task = ChainSumTask(modulus=5, k=16)
    b = SynthBackend(task.make_policy())
    out = []
    for seed in seeds:
        p = prompt_of(task, seed)
        _, ep = eptree_search(b, p, SearchConfig(gen=GenParams(seed=seed), on_mask_exhausted="skip"))
        _, mc = mcts_search(b, p, MctsConfig(budget=ep.generated_tokens, gen=GenParams(seed=seed)))
        out.append((mc.leaves_per_token, ep.leaves_per_token))
    return out


def test_mcts_comparison_runs_at_matched_budget():
    for mc, ep in _leaf_efficiency_pairs(range(3)):
        assert 0 < mc and 0 < ep


@pytest.mark.xfail(strict=True, reason="plain UCT keeps descending, so its late rollouts are short suffixes "
                                       "and it gets more leaves per token than EPTree")
def test_mcts_less_leaf_efficient_than_eptree():
    pairs = _leaf_efficiency_pairs()
    assert sum(mc for mc, _ in pairs) <= sum(ep for _, ep in pairs)
