import json
import math
import random
from pathlib import Path

import httpx
import numpy as np
import pytest

from treerl.credit import TrainingExample
from treerl.errors import BackendError, InvalidBatch, InvalidConfig, NotTerminal, VocabError
from treerl.gentree import TokenRecord
from treerl.policy import ChainSumTask, FinishReason, GenParams, HttpBackend, SynthBackend, SynthPolicy
from treerl.policy.chainsum import exact_accuracy
from treerl.policy.synthetic import (LastTokensReader, apply_policy_gradient, kl_rows, softmax,
                                     surrogate_gradient, surrogate_objective)

FIXTURES = Path(__file__).parent / "fixtures"


def lt_policy(vocab=8, order=1, eos=None):
    return SynthPolicy(LastTokensReader(vocab, order, eos))


def test_sampling_is_deterministic():
    task = ChainSumTask()
    b = SynthBackend(task.make_policy())
    p = GenParams(seed=42)
    a1 = b.sample_continuation((1, 2, 3), [], p)
    a2 = b.sample_continuation((1, 2, 3), [], p)
    assert a1 == a2
    assert a1.terminal


def test_one_hot_row_has_zero_surprisal():
    pol = lt_policy(8, 1)
    row = np.full(8, -1e4)
    row[3] = 0.0
    pol.set_row((-1,), row)
    c = SynthBackend(pol).sample_continuation(None, [], GenParams(1.0, 1.0, 1, seed=1))
    assert c.tokens[0].token_id == 3
    assert abs(c.tokens[0].surprisal) <= 1e-12


def test_uniform_surprisal_is_ln8():
    pol = lt_policy(8, 2)
    c = SynthBackend(pol).sample_continuation(None, [], GenParams(1.0, 1.0, 40, seed=3))
    assert len(c.tokens) == 40 and c.finish_reason is FinishReason.LENGTH
    for t in c.tokens:
        assert abs(t.surprisal - math.log(8)) <= 1e-12


def test_surprisal_is_untempered():
    task = ChainSumTask()
    pol = task.make_policy()
    c = SynthBackend(pol).sample_continuation((1, 2, 3), [], GenParams(1.7, 0.8, 64, seed=5))
    ids = [t.token_id for t in c.tokens]
    for j, t in enumerate(c.tokens):
        p = pol.probs(task.context((1, 2, 3), ids, j))[t.token_id]
        assert abs(math.exp(-t.surprisal) - p) <= 1e-12


def _draws(pol, params, n):
    b = SynthBackend(pol)
    return np.bincount([b.sample_continuation(None, [], params.with_seed(s)).tokens[0].token_id
                        for s in range(n)], minlength=pol.vocab_size)


def test_empirical_frequencies_match_softmax():
    pol = lt_policy(5, 1)
    row = np.array([0.3, -1.0, 1.2, 0.0, -0.4])
    pol.set_row((-1,), row)
    n = 100_000
    counts = _draws(pol, GenParams(1.0, 1.0, 1), n)
    p = softmax(row)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_nucleus_excludes_tail():
    pol = lt_policy(6, 1)
    row = np.log(np.array([0.5, 0.3, 0.1, 0.05, 0.03, 0.02]))
    pol.set_row((-1,), row)
    counts = _draws(pol, GenParams(1.0, 0.8, 1), 5000)
    assert counts[2:].sum() == 0 and counts[0] > 0 and counts[1] > 0


def test_gen_params_validation():
    with pytest.raises(InvalidConfig):
        GenParams(temperature=0)
    with pytest.raises(InvalidConfig):
        GenParams(top_p=1.5)
    assert GenParams.for_http().max_new_tokens == 8192
    assert GenParams().max_new_tokens == 64


def test_vocab_error_on_prefix():
    pol = lt_policy(4, 1)
    with pytest.raises(VocabError):
        SynthBackend(pol).sample_continuation(None, [TokenRecord(9, 0.0)], GenParams())


def test_grade_examples():
    task = ChainSumTask(modulus=10, k=2)
    assert task.grade((3, 4), [3, 7, task.eos_id])
    assert task.grade((7, 8), [7, 5, task.eos_id])
    assert not task.grade((7, 8), [7, 4, task.eos_id])
    with pytest.raises(VocabError):
        task.grade((7, 8), [15, task.eos_id])
    with pytest.raises(NotTerminal):
        task.grade((3, 4), [3, 7], terminal=False)


def test_grade_matches_reference():
    rng = random.Random(0)
    for _ in range(300):
        v = rng.randint(4, 12)
        task = ChainSumTask(modulus=v, k=rng.randint(1, 6))
        ops = tuple(rng.randrange(v) for _ in range(task.k))
        guess = rng.randrange(v)
        want = guess == sum(ops) % v
        assert task.grade(ops, [rng.randrange(v), guess, task.eos_id]) == want


def test_chainsum_rejects_small_modulus():
    with pytest.raises(InvalidConfig):
        ChainSumTask(modulus=3)


def test_exact_accuracy_matches_sampling():
    task = ChainSumTask(modulus=5, k=3)
    pol = task.make_policy()
    prompts = [(1, 2, 3), (4, 4, 0)]
    exact = exact_accuracy(pol, prompts, 64, 1.2, 0.95)
    b = SynthBackend(pol)
    n = 4000
    for p, e in zip(prompts, exact):
        hits = sum(b.grade(p, b.sample_continuation(p, [], GenParams(seed=s)).tokens) for s in range(n))
        assert abs(hits / n - e) <= 4 * math.sqrt(e * (1 - e) / n) + 1e-9


def example(prompt, ids, advs):
    return TrainingExample(prompt, [TokenRecord(i, 0.0) for i in ids], list(advs), 0)


def test_zero_advantage_leaves_logits_unchanged():
    task = ChainSumTask()
    pol = task.make_policy()
    batch = [example((1, 2, 3), [1, 3, 1, task.eos_id], [0.0] * 4)]
    pol.rows_for((1, 2, 3), [1, 3, 1, task.eos_id])
    before = pol.logits.copy()
    apply_policy_gradient(pol, batch, lr=0.5, kl_beta=0.0)
    assert np.array_equal(before, pol.logits)


def test_positive_advantage_raises_probability():
    pol = lt_policy(5, 1)
    p0 = pol.probs((-1,))[2]
    apply_policy_gradient(pol, [example(None, [2], [1.0])], lr=0.1)
    assert pol.probs((-1,))[2] > p0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    pol = lt_policy(3, 1)
    for ctx in [(-1,), (0,), (1,), (2,)]:
        pol.set_row(ctx, rng.normal(size=3))
    batch = [example(None, [0, 2, 1, 1], [0.7, -1.3, 0.4, 2.0]), example(None, [2, 2, 0], [-0.5, 1.5, 0.9])]
    grad = surrogate_gradient(pol, batch)
    h = 1e-5
    fd = np.zeros_like(pol.logits)
    for idx in np.ndindex(*pol.logits.shape):
        base = pol.logits[idx]
        pol.logits[idx] = base + h
        up = surrogate_objective(pol, batch)
        pol.logits[idx] = base - h
        down = surrogate_objective(pol, batch)
        pol.logits[idx] = base
        fd[idx] = (up - down) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


def test_kl_step_is_contractive():
    rng = np.random.default_rng(1)
    pol = lt_policy(6, 1)
    for c in range(-1, 6):
        pol.set_row((c,), rng.normal(size=6))
    pol.logits += rng.normal(size=pol.logits.shape)
    batch = [example(None, [0, 1, 2, 3, 4, 5], [0.0] * 6)]
    rows = np.arange(len(pol.logits))
    dist = np.linalg.norm(pol.logits - pol.reference_logits)
    kl = kl_rows(pol, rows).sum()
    for _ in range(50):
        apply_policy_gradient(pol, batch, lr=1.0, kl_beta=0.5)
        d = np.linalg.norm(pol.logits - pol.reference_logits)
        k = kl_rows(pol, rows).sum()
        assert d <= dist + 1e-12 and k <= kl + 1e-12
        dist, kl = d, k


def test_non_finite_advantage_rejected():
    pol = lt_policy(3, 1)
    with pytest.raises(InvalidBatch):
        apply_policy_gradient(pol, [example(None, [1], [float("nan")])], lr=0.1)


def test_snapshot_round_trip(tmp_path):
    task = ChainSumTask(modulus=6, k=4)
    pol = task.make_policy()
    b = SynthBackend(pol)
    b.sample_continuation((1, 2, 3, 4), [], GenParams(seed=9))
    pol.logits += 0.25
    pol.save(tmp_path / "p.npz")
    q = SynthPolicy.load(tmp_path / "p.npz")
    assert q.reader == task
    assert np.array_equal(q.logits, pol.logits) and np.array_equal(q.reference_logits, pol.reference_logits)
    for ctx in pol.contexts:
        assert np.array_equal(q.probs(ctx), pol.probs(ctx))
    assert SynthBackend(q).sample_continuation((0, 1, 2, 3), [], GenParams(seed=4)) == \
        SynthBackend(pol).sample_continuation((0, 1, 2, 3), [], GenParams(seed=4))


def test_shannon_entropy_uniform():
    b = SynthBackend(lt_policy(8, 1))
    assert abs(b.shannon_entropy(None, []) - math.log(8)) < 1e-12


# -- HTTP -------------------------------------------------------------------

def http_backend(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpBackend("http://test/v1", "m", client=client, sleep=lambda s: None, **kw)


def test_http_golden_fixture():
    golden = json.loads((FIXTURES / "completion_golden.json").read_text())
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json=golden["response"])

    c = http_backend(handler).http_complete("1+2=", "", GenParams.for_http(seed=3))
    assert [t.token_id for t in c.tokens] == golden["expected_token_ids"]
    assert [t.surprisal for t in c.tokens] == golden["expected_surprisals"]
    assert c.finish_reason.value == golden["expected_finish_reason"] and c.terminal
    assert seen["logprobs"] == 1 and seen["max_tokens"] == 8192 and seen["temperature"] == 1.2
    assert seen["prompt"] == "1+2="


def _payload(reason="stop", logprobs=True):
    choice = {"text": "ab", "finish_reason": reason}
    if logprobs:
        choice["logprobs"] = {"tokens": ["a", "b"], "token_logprobs": [-0.5, -1.0]}
    return {"choices": [choice]}


def test_http_missing_logprobs():
    b = http_backend(lambda r: httpx.Response(200, json=_payload(logprobs=False)))
    with pytest.raises(BackendError) as e:
        b.http_complete("p", "", GenParams.for_http())
    assert e.value.kind == "MissingLogprobs"


def test_http_length_finish_reason():
    b = http_backend(lambda r: httpx.Response(200, json=_payload("length")))
    c = b.http_complete("p", "", GenParams.for_http())
    assert c.terminal and c.finish_reason is FinishReason.LENGTH
    assert [t.token_id for t in c.tokens] == [0, 1]


def test_http_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    with pytest.raises(BackendError):
        http_backend(handler).http_complete("p", "", GenParams.for_http())
    assert len(calls) == 3


def test_http_retry_recovers():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 2:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json=_payload())

    c = http_backend(handler).http_complete("p", "", GenParams.for_http())
    assert len(c.tokens) == 2 and len(calls) == 2


def test_http_malformed_json():
    b = http_backend(lambda r: httpx.Response(200, content=b"{not json"))
    with pytest.raises(BackendError) as e:
        b.http_complete("p", "", GenParams.for_http())
    assert e.value.kind == "MalformedResponse"


def test_http_prefix_text_is_appended():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json=_payload())

    b = http_backend(handler)
    b.sample_continuation("Q:", [TokenRecord(0, 0.1, " x"), TokenRecord(1, 0.2, " y")], GenParams.for_http())
    assert seen["prompt"] == "Q: x y" and seen["max_tokens"] == 8190
