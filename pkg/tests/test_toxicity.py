import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repcurse import transformer
from repcurse.numerics import derive_stream, entropy, softmax
from repcurse.patching import ImportanceMap
from repcurse.toxicity import (
    ToxicityConfig,
    ToxicityError,
    ToxicityTrace,
    check_propagation,
    corrupt_for_step,
    entropy_drop_by_toxicity,
    entropy_trace,
    entropy_upper_bound,
    fit_decay_rate,
    predicted_descaled_toxicity,
    run_trace,
    toxicity_causal_trace,
    toxicity_norm_proxy,
    toxicity_ratio,
)
from repcurse.transformer import HeadId, capture_all
from repcurse.zoo import INDUCTION_HEAD

H = [HeadId(0, 0), HeadId(0, 1), HeadId(1, 0), HeadId(1, 1)]


# --- Eq. 2 ---------------------------------------------------------------------------


def test_ratio_all_heads_is_one():
    imp = dict(zip(H, [0.1, -0.4, 2.0, 0.0]))
    assert toxicity_ratio(imp, H) == 1.0


def test_ratio_hand_value():
    imp = {H[0]: 0.3, H[1]: -0.3, H[2]: 0.2, H[3]: 0.2}
    assert toxicity_ratio(imp, H[:2]) == pytest.approx(0.6, abs=1e-15)


def test_ratio_zero_induction_importance():
    assert toxicity_ratio({H[0]: 0.0, H[1]: 0.5, H[2]: 0.0, H[3]: 0.1}, [H[0], H[2]]) == 0.0


def test_ratio_all_zero_is_undefined():
    with pytest.raises(ToxicityError):
        toxicity_ratio(dict.fromkeys(H, 0.0), H[:1])


@settings(max_examples=500, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.sets(st.integers(0, 3)))
def test_ratio_in_unit_interval(vals, idx):
    imp = dict(zip(H, vals))
    if sum(abs(v) for v in vals) == 0:
        return
    assert 0.0 <= toxicity_ratio(imp, [H[i] for i in idx]) <= 1.0


# --- Eq. 14 ---------------------------------------------------------------------------


def test_predicted_hand_values():
    # ln(t + c) = 2
    assert predicted_descaled_toxicity(0.8, math.e**2 - 2, 2.0) == pytest.approx(2 / 3, abs=1e-12)
    assert predicted_descaled_toxicity(0.0, 5, 2) == 0.0
    assert predicted_descaled_toxicity(1.0, 5, 2) == 1.0


def test_predicted_errors():
    with pytest.raises(ToxicityError):
        predicted_descaled_toxicity(0.5, 0.5, 0.5)
    with pytest.raises(ToxicityError):
        predicted_descaled_toxicity(1.2, 3, 2)


@settings(max_examples=2000, deadline=None)
@given(st.floats(0, 1), st.integers(1, 10_000), st.floats(0.01, 100))
def test_contraction_property(tau, t, c):
    if math.log(t + c) < 1:
        return
    assert predicted_descaled_toxicity(tau, t, c) <= tau + 1e-15


# --- norm proxy -----------------------------------------------------------------------


def test_norm_proxy_wired_only_induction(wired):
    _, cache = capture_all(wired, [3, 4, 5, 3])
    # the previous-token head also writes; with both designated heads as the set the proxy is 1
    assert toxicity_norm_proxy(cache, wired, [HeadId(0, 0), INDUCTION_HEAD]) == 1.0


def test_norm_proxy_equal_norms(small_model):
    W_O = np.zeros_like(small_model.W_O)
    W_O[1, 0] = small_model.W_O[1, 0]
    w = small_model.replace(W_O=W_O)
    # duplicate head 1.0 into 1.1 so both contributions have equal norm
    w = w.replace(
        W_Q=_dup(w.W_Q), W_K=_dup(w.W_K), W_V=_dup(w.W_V), W_O=_dup(W_O),
    )
    _, cache = capture_all(w, [1, 2, 3, 4])
    assert toxicity_norm_proxy(cache, w, [HeadId(1, 0)]) == pytest.approx(0.5, abs=1e-12)


def _dup(arr):
    out = arr.copy()
    out[1, 1] = out[1, 0]
    out[0] = 0.0
    return out


def test_norm_proxy_zero_model_errors(small_cfg):
    from repcurse.transformer import ModelWeights

    w = ModelWeights.zeros(small_cfg)
    _, cache = capture_all(w, [1, 2])
    with pytest.raises(ToxicityError):
        toxicity_norm_proxy(cache, w, [HeadId(0, 0)])


# --- entropy traces --------------------------------------------------------------------


def test_entropy_trace_constant():
    p = softmax([1.0, 2.0, 3.0])
    hs, grads = entropy_trace([p, p, p])
    assert grads == [0.0, 0.0]


def test_entropy_trace_uniform_to_one_hot():
    one_hot = np.zeros(256)
    one_hot[7] = 1.0
    hs, grads = entropy_trace([np.full(256, 1 / 256), one_hot])
    assert grads[0] == pytest.approx(math.log(256), abs=1e-12)


def test_entropy_trace_matches_recomputation():
    rng = derive_stream(0, "et")
    ps = [softmax(rng.normal_array((16,), 2.0)) for _ in range(10)]
    hs, grads = entropy_trace(ps)
    for i, p in enumerate(ps):
        assert hs[i] == -sum(v * math.log(v) for v in p if v > 0) or hs[i] == pytest.approx(
            -sum(v * math.log(v) for v in p if v > 0), abs=1e-14
        )
    assert grads == [hs[i] - hs[i + 1] for i in range(9)]
    with pytest.raises(ToxicityError):
        entropy_trace(ps[:1])


# --- decay fits ----------------------------------------------------------------------


@pytest.mark.parametrize("h0,lam", [(4.8, 1.7), (5.2, 0.3)])
def test_decay_fit_recovers_synthetic_rates(h0, lam):
    series = [h0 * math.exp(-lam * t) for t in range(12)]
    fit = fit_decay_rate(series)
    assert fit.lam == pytest.approx(lam, abs=1e-9)
    assert math.exp(fit.log_h0) == pytest.approx(h0, abs=1e-9)


def test_decay_fit_constant_series():
    assert fit_decay_rate([2.0] * 6).lam == pytest.approx(0.0, abs=1e-15)


def test_decay_fit_drops_non_positive_points():
    series = [5.0 * math.exp(-0.5 * t) for t in range(6)] + [0.0]
    assert fit_decay_rate(series).lam == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ToxicityError):
        fit_decay_rate([1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ToxicityError):
        fit_decay_rate([1.0, 2.0])


# --- propagation ----------------------------------------------------------------------


def test_propagation_increasing():
    taus = [0.1 + 0.05 * i for i in range(18)]
    st_ = check_propagation(taus, 0.65)
    assert st_.onset == 12 and st_.frac_nondecreasing == 1.0 and st_.windowed_monotone


def test_propagation_decreasing_has_no_onset():
    st_ = check_propagation([0.6 - 0.01 * i for i in range(20)], 0.65)
    assert st_.onset is None and st_.frac_nondecreasing is None and st_.windowed_monotone is None


def test_propagation_window_means():
    taus = [0.7] * 8 + [0.9] * 8 + [0.8] * 8
    st_ = check_propagation(taus, 0.65, window=8)
    assert st_.window_means == pytest.approx([0.7, 0.9, 0.8])
    assert st_.windowed_monotone is False


def test_propagation_skips_missing():
    st_ = check_propagation([None, 0.7, None, 0.8, 0.9], 0.65)
    assert st_.onset == 2 and st_.frac_nondecreasing == 1.0


# --- per-step corruption and traces -----------------------------------------------------------


def test_corrupt_for_step_targets_copy_slot():
    seq = [5, 6, 7, 5, 6, 7, 5]
    out, pos = corrupt_for_step(seq, derive_stream(0, "c"), 10)
    assert pos == 4 and out[4] != 6
    assert [i for i in range(7) if out[i] != seq[i]] == [4]
    assert corrupt_for_step([1, 2, 3, 4], derive_stream(0, "c"), 10) is None


def test_wired_causal_trace_is_toxic(wired):
    cfg = ToxicityConfig([INDUCTION_HEAD], method="causal")
    tr = toxicity_causal_trace(wired, [3, 4] * 8, 8, cfg)
    assert tr.tokens == [3, 4] * 4
    assert all(t is not None and t >= 0.9 for t in tr.tau)
    assert all(tr.toxic_flag)


def test_causal_trace_cost(wired):
    cfg = ToxicityConfig([INDUCTION_HEAD], method="causal")
    before = transformer.forward_calls()
    tr = run_trace(wired, [3, 4] * 4, 4, cfg)
    # the clean pass doubles as the generation pass: H + 2 per step
    assert transformer.forward_calls() - before == 4 * (wired.cfg.total_heads + 2)
    assert len(tr.tau) == 4


def test_non_induction_only_model_has_zero_tau(small_model):
    W_O = np.zeros_like(small_model.W_O)
    W_O[0, 1] = small_model.W_O[0, 1]
    w = small_model.replace(W_O=W_O)
    cfg = ToxicityConfig([HeadId(1, 0)], method="causal")
    tr = run_trace(w, [1, 2, 3, 1, 2, 3, 1], 3, cfg)
    assert all(t in (None, 0.0) for t in tr.tau)
    assert any(t == 0.0 for t in tr.tau)


def test_trace_is_deterministic(small_model):
    cfg = ToxicityConfig([HeadId(1, 0)], method="causal", seed=3)
    a = run_trace(small_model, [1, 2, 1, 2], 5, cfg)
    b = run_trace(small_model, [1, 2, 1, 2], 5, cfg)
    assert a.to_csv() == b.to_csv()


def test_trace_csv_columns_and_flags(wired):
    cfg = ToxicityConfig([INDUCTION_HEAD], method="norm", gamma=0.65)
    tr = run_trace(wired, [3, 4] * 4, 5, cfg)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "step,tau,entropy_nats,grad_H,toxic_flag,method"
    assert len(lines) == 6
    for t, f in zip(tr.tau, tr.toxic_flag):
        assert f == (t >= 0.65)
        assert 0.0 <= t <= 1.0
    assert lines[-1].split(",")[3] == ""  # no gradient at the last step


def test_static_method_uses_fixed_map(wired):
    imap = ImportanceMap({h: (1.0 if h == INDUCTION_HEAD else 0.0) for h in wired.cfg.heads()}, 1)
    cfg = ToxicityConfig([INDUCTION_HEAD], method="static", static_map=imap)
    assert run_trace(wired, [1, 2, 1], 3, cfg).tau == [1.0, 1.0, 1.0]
    with pytest.raises(ToxicityError):
        ToxicityConfig([INDUCTION_HEAD], method="static")


def test_config_validation():
    with pytest.raises(ToxicityError):
        ToxicityConfig([INDUCTION_HEAD], gamma=1.0)
    with pytest.raises(ToxicityError):
        ToxicityConfig([INDUCTION_HEAD], method="bogus")


def test_window_overflow_flags_ood(wired):
    tr = run_trace(wired, [1, 2] * 15, 5, ToxicityConfig([INDUCTION_HEAD], method="none"))
    assert tr.ood and len(tr.tokens) == 2


def test_entropy_drop_by_toxicity():
    tr = ToxicityTrace([1, 2, 3, 4], [0.9, 0.1, 0.9, 0.1], [3.0, 1.0, 0.9, 0.5], "causal", 0.65)
    tox, non = entropy_drop_by_toxicity(tr)
    assert tox == pytest.approx((2.0 + 0.4) / 2) and non == pytest.approx(0.1)


# --- entropy bound in the near-deterministic regime ------------------------------------------------


def _top_plus_uniform(eps, V):
    p = np.full(V, eps / (V - 1))
    p[0] = 1 - eps
    return p


@pytest.mark.parametrize("V", [4, 32, 256, 150_000])
@pytest.mark.parametrize("eps", [1e-6, 1e-4, 1e-3, 1e-2])
def test_entropy_upper_bound_holds(eps, V):
    assert entropy(_top_plus_uniform(eps, V)) <= entropy_upper_bound(eps, V) + 1e-9


def test_uncorrected_bound_fails_without_top_term():
    # the top term -(1 - eps) ln(1 - eps) ~ eps is what the shorter bound misses
    eps, V = 1e-2, 256
    h = entropy(_top_plus_uniform(eps, V))
    assert h > eps * (math.log(V) + math.log(1 / eps)) + 1e-9
    assert h <= entropy_upper_bound(eps, V)
