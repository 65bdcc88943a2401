import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avdub.corpus import TGT, UnitSequence
from avdub.duration import (FinetuneConfig, PretrainConfig, accumulated_gradient, build_finetune_items,
                            duration_loss, durations_from_log, expand_durations, finetune_duration,
                            init_duration_predictor, largest_remainder, mean_duration_loss,
                            pretrain_duration, reference_durations, sample_losses, total_loss)
from avdub.nn_core import ParameterSet, as_tensors, checkpoint_bytes, optimizer_step, OptimizerState
from avdub.sync_expert import init_sync_expert


def fraction_largest_remainder(weights, total):
    """Exact-rational largest remainder; zero entries take one frame from the largest entry."""
    weights = [Fraction(w) for w in weights]
    s = sum(weights)
    shares = [w * total / s for w in weights]
    out = [math.floor(x) for x in shares]
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    for i in range(len(out)):
        if out[i] == 0:
            j = max(range(len(out)), key=lambda k: (out[k], -k))
            out[j] -= 1
            out[i] = 1
    return out


# ---------------------------------------------------------------- allocation

def test_reference_duration_examples():
    assert reference_durations(np.array([2, 4]), 6).tolist() == [2, 4]
    assert reference_durations(np.array([2, 4]), 12).tolist() == [4, 8]
    assert reference_durations(np.array([1, 1, 1]), 3).tolist() == [1, 1, 1]
    with pytest.raises(ValueError, match="one frame per unit"):
        reference_durations(np.array([1, 1, 1]), 2)


def test_length_locked_tie_break():
    assert durations_from_log(np.log([1.0, 1.0, 1.0]), 5, "length_locked").tolist() == [2, 2, 1]


def test_free_mode_rounding():
    assert durations_from_log(np.log([2.4, 3.6]), 0, "free").tolist() == [2, 4]
    assert durations_from_log(np.log([0.2]), 0, "free").tolist() == [1]
    with pytest.raises(ValueError):
        durations_from_log(np.zeros(2), 5, "other")


@settings(max_examples=10_000, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=40), st.integers(0, 400))
def test_reference_durations_match_exact_oracle(durs, extra):
    T = len(durs) + extra
    out = reference_durations(np.array(durs), T)
    assert int(out.sum()) == T and out.min() >= 1
    assert out.tolist() == fraction_largest_remainder(durs, T)


@settings(max_examples=10_000, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=40), st.integers(0, 300))
def test_length_locked_expansion_sums_exactly(log_d, extra):
    T = len(log_d) + extra
    out = durations_from_log(np.array(log_d), T, "length_locked")
    assert int(out.sum()) == T and out.min() >= 1


def test_largest_remainder_rejects_overfull():
    with pytest.raises(ValueError):
        largest_remainder(np.ones(4), 3)


# ---------------------------------------------------------------- losses

def test_duration_loss_closed_forms():
    assert duration_loss(np.log([4.0, 2.0]), np.array([2, 4])) == pytest.approx(math.log(2) ** 2, abs=1e-9)
    assert duration_loss(np.log([3.0, 5.0]), np.array([3, 5])) == 0.0
    assert duration_loss(np.array([1.0]), np.array([1])) == 1.0
    t = duration_loss(torch.log(torch.tensor([4.0, 2.0])), np.array([2, 4]))
    assert float(t) == pytest.approx(math.log(2) ** 2, abs=1e-12)
    with pytest.raises(ValueError):
        duration_loss(np.zeros(2), np.ones(3))


def test_total_loss_arithmetic():
    assert total_loss(0.5, 0.1, 10) == 1.5
    assert total_loss(0.7, 0.0, 10) == 0.7
    assert total_loss(0.0, 0.3, 10) == 3.0


def test_duration_loss_gradient_closed_form():
    pred = torch.tensor([0.3, 1.2, 0.9], requires_grad=True)
    ref = np.array([2, 3, 1])
    duration_loss(pred, ref).backward()
    expected = 2 * (pred.detach().numpy() - np.log(ref)) / 3
    np.testing.assert_allclose(pred.grad.numpy(), expected, rtol=0, atol=1e-12)
    eps = 1e-6
    for i in range(3):
        up, dn = pred.detach().numpy().copy(), pred.detach().numpy().copy()
        up[i] += eps
        dn[i] -= eps
        fd = (duration_loss(up, ref) - duration_loss(dn, ref)) / (2 * eps)
        assert abs(fd - expected[i]) < 1e-8


# ---------------------------------------------------------------- fine-tuning mechanics

@pytest.fixture(scope="module")
def ft_setup(pair, small_corpus):
    expert = init_sync_expert(9)
    config = FinetuneConfig(accumulation=4, steps=10, seed=3)
    items = build_finetune_items(small_corpus.train[:12], pair, config, expert)
    start = pretrain_duration(small_corpus.train, pair, PretrainConfig(steps=30), seed=1)
    return expert, config, items, start


def test_total_gradient_is_linear(ft_setup):
    expert, config, items, start = ft_setup
    _, _, _, g_total = accumulated_gradient(start.params, expert, items[:3], config)
    _, _, _, g_sync = accumulated_gradient(start.params, expert, items[:3],
                                           FinetuneConfig(losses="sync_only"))
    _, _, _, g_dur = accumulated_gradient(start.params, expert, items[:3], FinetuneConfig(losses="dur_only"))
    for k in start.params:
        np.testing.assert_allclose(g_total[k], g_sync[k] + config.lam * g_dur[k], rtol=0, atol=1e-10)


def test_accumulation_equals_one_batched_step(ft_setup):
    expert, config, items, start = ft_setup
    batch = items[:8]
    _, _, _, acc = accumulated_gradient(start.params, expert, batch, config)
    tensors = as_tensors(start.params, requires_grad=True)
    expert_p = as_tensors(expert.params)
    losses = []
    for it in batch:
        l_dur, l_sync = sample_losses(tensors, expert_p, it, config)
        losses.append(total_loss(l_sync, l_dur, config.lam))
    torch.stack(losses).mean().backward()
    batched = ParameterSet((k, t.grad.numpy()) for k, t in tensors.items())
    state = OptimizerState.create(start.params, lr=config.lr)
    a, _ = optimizer_step(start.params, acc, state)
    b, _ = optimizer_step(start.params, batched, state)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-10)


def test_lambda_zero_matches_sync_only(pair, small_corpus, ft_setup):
    expert, _, items, start = ft_setup
    a = finetune_duration(start, expert, [], pair, FinetuneConfig(lam=0.0, accumulation=4, steps=10), items=items)
    b = finetune_duration(start, expert, [], pair, FinetuneConfig(losses="sync_only", accumulation=4, steps=10),
                          items=items)
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], rtol=0, atol=1e-12)


def test_dur_only_never_needs_the_expert(pair, ft_setup):
    _, _, items, start = ft_setup
    model = finetune_duration(start, None, [], pair, FinetuneConfig(losses="dur_only", accumulation=4, steps=5),
                              items=items)
    assert all(math.isnan(x) for x in model.log.extra["sync"])


def test_finetune_leaves_expert_untouched(pair, ft_setup):
    expert, config, items, start = ft_setup
    before = checkpoint_bytes(expert.params, expert.meta)
    init_before = checkpoint_bytes(start.params)
    finetune_duration(start, expert, [], pair, config, items=items)
    assert checkpoint_bytes(expert.params, expert.meta) == before
    assert checkpoint_bytes(start.params) == init_before


def test_finetune_config_validation(pair):
    for bad in (dict(lam=-1.0), dict(accumulation=0), dict(losses="sync"), dict(init="warm")):
        with pytest.raises(ValueError):
            FinetuneConfig(**bad).validate()
    with pytest.raises(ValueError, match="sync expert"):
        finetune_duration(init_duration_predictor(40, 0), None, [], pair, FinetuneConfig())


def test_expand_durations_shapes(pair):
    model = init_duration_predictor(40, 0)
    units = np.array([1, 2, 3, 4])
    out = expand_durations(model, units, 17, "length_locked")
    assert len(out) == 4 and out.sum() == 17
    assert len(expand_durations(model, units, 17, "free")) == 4


# ---------------------------------------------------------------- trained behaviour

def test_pretraining_is_deterministic(pair, small_corpus):
    a = pretrain_duration(small_corpus.train, pair, PretrainConfig(steps=20), seed=4)
    b = pretrain_duration(small_corpus.train, pair, PretrainConfig(steps=20), seed=4)
    assert checkpoint_bytes(a.params) == checkpoint_bytes(b.params)


def test_pretraining_learns(paper_runs):
    descended = 0
    for run in paper_runs:
        model = run.pretrained()
        descended += model.log.losses[-1] < model.log.losses[0]
        trained = mean_duration_loss(model, run.test)
        random = mean_duration_loss(init_duration_predictor(run.pair.vocab_size, run.seed), run.test)
        assert trained < 0.5 * random
    assert descended >= 2


def test_finetuning_lowers_lse_d(paper_runs):
    lower = [r.report("Ours").mean("lse_d") < r.report("Dur-only").mean("lse_d") for r in paper_runs]
    assert sum(lower) >= 2


def test_target_with_reference_for_mismatched_lengths():
    from avdub.duration import target_with_reference
    canon = UnitSequence(TGT, np.array([1, 2, 3]), np.array([2, 2, 2]))
    same = target_with_reference(np.array([4, 5, 6]), canon, 6)
    assert same.durations.tolist() == [2, 2, 2]
    other = target_with_reference(np.array([4, 5]), canon, 7)
    assert other.durations.sum() == 7 and other.units.tolist() == [4, 5]
