import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repcurse import transformer
from repcurse.copy_task import corrupt_instance, make_copy_instances
from repcurse.numerics import derive_stream
from repcurse.patching import (
    DegenerateContrast,
    ImportanceMap,
    InductionHeadSet,
    PatchingError,
    causal_importance,
    copy_boost_score,
    identify_induction_heads,
    n_selected,
    patch_trial,
    prefix_match_score,
    repeated_random_sequences,
    run_patch_protocol,
)
from repcurse.transformer import HeadId, HookSet, ModelConfig, ModelWeights, capture_all, run
from repcurse.zoo import INDUCTION_HEAD

from conftest import random_weights

floats = st.floats(-1e3, 1e3, allow_nan=False)


# --- Eq. 1 ------------------------------------------------------------------------


@pytest.mark.parametrize("args,want", [((5.0, 1.0, 5.0), 1.0), ((5.0, 1.0, 1.0), 0.0), ((5.0, 1.0, 3.0), 0.5)])
def test_importance_hand_values(args, want):
    assert causal_importance(*args) == want


def test_degenerate_contrast():
    with pytest.raises(DegenerateContrast):
        causal_importance(1.0, 1.0 + 5e-10, 3.0)


@settings(max_examples=1000, deadline=None)
@given(floats, floats, floats, st.floats(-1e3, 1e3))
def test_importance_shift_invariance(a, b, c, s):
    if abs(a - b) < 1e-3:
        return
    assert causal_importance(a + s, b + s, c + s) == pytest.approx(causal_importance(a, b, c), abs=1e-9, rel=1e-9)


# --- protocol ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def wired_instances(wired):
    return make_copy_instances(100, wired.cfg.vocab_size, derive_stream(0, "wired-patch"), L=16)


def test_wired_oracle_ranking(wired, wired_instances):
    imap = run_patch_protocol(wired, wired_instances, seed=0)
    assert imap.ranked()[0] == INDUCTION_HEAD
    assert imap.importance[INDUCTION_HEAD] > 0.9
    for h, v in imap.importance.items():
        if not wired.W_O[h.layer, h.head].any():
            assert abs(v) < 1e-9


def test_wired_oracle_across_seeds(wired):
    for seed in range(5):
        inst = make_copy_instances(20, wired.cfg.vocab_size, derive_stream(seed, "seeds"), L=12)
        assert run_patch_protocol(wired, inst, seed=seed).ranked()[0] == INDUCTION_HEAD


def test_pass_count_is_heads_plus_two(wired, wired_instances):
    before = transformer.forward_calls()
    run_patch_protocol(wired, wired_instances[:10], seed=0)
    assert transformer.forward_calls() - before == 10 * (wired.cfg.total_heads + 2)


def test_protocol_is_deterministic(small_model):
    inst = make_copy_instances(10, 11, derive_stream(0, "det"), L=6)
    a = run_patch_protocol(small_model, inst, seed=4, keep_raw=True)
    b = run_patch_protocol(small_model, inst, seed=4, keep_raw=True)
    assert a.to_csv() == b.to_csv() and a.raw == b.raw


def test_no_patch_reproduces_corrupt_logits(small_model):
    inst = make_copy_instances(1, 11, derive_stream(0, "np"), L=6)[0]
    bad = corrupt_instance(inst, derive_stream(0, "c"), 11)
    assert np.array_equal(run(small_model, bad.tokens, HookSet()), run(small_model, bad.tokens))


def test_self_patch_with_corrupt_outputs_is_noop(small_model):
    inst = make_copy_instances(1, 11, derive_stream(0, "np"), L=6)[0]
    bad = corrupt_instance(inst, derive_stream(0, "c"), 11)
    ref, cache = capture_all(small_model, bad.tokens)
    for h in small_model.cfg.heads():
        assert np.array_equal(run(small_model, bad.tokens, HookSet(patch={h: cache.z[h]})), ref)


def test_all_degenerate_raises():
    cfg = ModelConfig(2, 2, 8, 4, 11, 12)
    inst = make_copy_instances(3, 11, derive_stream(0, "deg"), L=6)
    with pytest.raises(PatchingError, match="degenerate"):
        run_patch_protocol(ModelWeights.zeros(cfg), inst)


def test_degenerate_trial_costs_two_passes():
    cfg = ModelConfig(2, 2, 8, 4, 11, 12)
    before = transformer.forward_calls()
    res = patch_trial(ModelWeights.zeros(cfg), [1, 2, 3], [1, 4, 3], 2)
    assert res.importance is None and transformer.forward_calls() - before == 2


def test_too_long_instance_rejected():
    w = random_weights(ModelConfig(2, 2, 8, 4, 20, 12), 0)
    inst = make_copy_instances(1, 20, derive_stream(0, "long"), L=10)  # length 14
    with pytest.raises(PatchingError, match="max_seq"):
        run_patch_protocol(w, inst)


def test_importance_csv_round_trip(tmp_path, small_model):
    inst = make_copy_instances(5, 11, derive_stream(0, "csv"), L=6)
    imap = run_patch_protocol(small_model, inst)
    back = ImportanceMap.read_csv(imap.write_csv(tmp_path / "imp.csv"))
    assert back.importance == imap.importance and back.n_trials == imap.n_trials
    assert imap.to_csv().splitlines()[0] == "layer,head,importance,n_trials"


# --- selection -----------------------------------------------------------------------


@pytest.mark.parametrize("p,total,want", [(2, 8, 1), (100, 8, 8), (2, 50, 1), (2, 51, 2), (25, 8, 2), (12.5, 8, 1)])
def test_n_selected(p, total, want):
    assert n_selected(p, total) == want


def test_identify_orders_and_breaks_ties():
    imp = {HeadId(0, 0): 0.5, HeadId(0, 1): 0.9, HeadId(1, 0): 0.5, HeadId(1, 1): 0.1}
    s = identify_induction_heads(ImportanceMap(imp, 1), 75)
    assert s.heads == (HeadId(0, 1), HeadId(0, 0), HeadId(1, 0))
    assert identify_induction_heads(ImportanceMap(imp, 1), 100).heads[-1] == HeadId(1, 1)
    with pytest.raises(PatchingError):
        identify_induction_heads(ImportanceMap({}, 0))
    with pytest.raises(PatchingError):
        identify_induction_heads(ImportanceMap(imp, 1), 0)


def test_head_set_json_round_trip():
    s = InductionHeadSet((HeadId(1, 2), HeadId(0, 3)), 2.0)
    assert s.to_json() == "[[1, 2], [0, 3]]"
    assert InductionHeadSet.from_json(s.to_json()).heads == s.heads


# --- behavioural scores ---------------------------------------------------------------


def test_wired_prefix_match(wired):
    seqs = repeated_random_sequences(32, 12, 20, 0)
    assert prefix_match_score(wired, seqs, INDUCTION_HEAD) >= 0.9


def test_uniform_head_prefix_match_is_one_over_t(small_model):
    w = small_model.replace(W_Q=np.zeros_like(small_model.W_Q), W_K=np.zeros_like(small_model.W_K))
    seq = [1, 2, 3, 4, 5, 1]
    assert prefix_match_score(w, seq, HeadId(1, 0)) == pytest.approx(1 / len(seq), abs=1e-9)


def test_prefix_match_needs_repeat(small_model):
    with pytest.raises(PatchingError):
        prefix_match_score(small_model, [1, 2, 3], HeadId(0, 0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(0, 6), min_size=3, max_size=11))
def test_prefix_match_is_probability(seed, body):
    cfg = ModelConfig(2, 2, 8, 4, 7, 12)
    w = random_weights(cfg, seed % 1000, std=1.0)
    seq = body + [body[0]]
    head = HeadId(seed % 2, (seed // 2) % 2)
    assert 0.0 <= prefix_match_score(w, seq, head) <= 1.0


def test_copy_boost_signs(wired, small_model):
    seqs = repeated_random_sequences(32, 10, 10, 1)
    assert copy_boost_score(wired, seqs, INDUCTION_HEAD) > 0
    assert abs(copy_boost_score(wired, seqs, HeadId(1, 2))) < 1e-9


def test_copy_boost_shift_is_uniform_across_vocabulary(small_model):
    # adding b to every unembedding column moves each token's logit delta by
    # the same amount (x_active - x_ablated) . b, so token comparisons are unchanged
    seq = [1, 2, 3, 4, 1]
    h = HeadId(1, 1)
    b = derive_stream(0, "shift").normal_array((small_model.cfg.d_model, 1))
    shifted = small_model.replace(unembed=small_model.unembed + b)

    def deltas(w):
        return run(w, seq)[-1] - run(w, seq, HookSet(scale={h: 0.0}))[-1]

    moved = deltas(shifted) - deltas(small_model)
    np.testing.assert_allclose(moved, moved[0], atol=1e-9)
    assert copy_boost_score(shifted, seq, h) - copy_boost_score(small_model, seq, h) == pytest.approx(moved[0], abs=1e-9)
