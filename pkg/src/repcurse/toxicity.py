"""Induction-head dominance during generation: toxicity ratio, traces, entropy dynamics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .numerics import RngStream, derive_stream, entropy, softmax
from .patching import ImportanceMap, InductionHeadSet, patch_trial
from .transformer import (
    ActivationCache,
    HeadId,
    HookSet,
    ModelWeights,
    forward,
    head_contribution,
    position_factors,
)

DEFAULT_GAMMA = 0.65


class ToxicityError(ValueError):
    pass


def toxicity_ratio(importances: Mapping[HeadId, float], ind_set) -> float:
    """Share of total absolute importance held by the induction heads."""
    total = sum(abs(v) for v in importances.values())
    if total == 0:
        raise ToxicityError("all head importances are zero; toxicity ratio undefined")
    ind = sum(abs(importances[h]) for h in ind_set)
    return ind / total


def toxicity_norm_proxy(cache: ActivationCache, weights: ModelWeights, ind_set, position: int = -1) -> float:
    """``|c_ind| / (|c_ind| + |c_other|)`` over summed residual contributions at ``position``."""
    ind_vec = np.zeros(weights.cfg.d_model)
    other_vec = np.zeros(weights.cfg.d_model)
    for h in weights.cfg.heads():
        c = head_contribution(cache, weights, h, position)
        if h in ind_set:
            ind_vec += c
        else:
            other_vec += c
    a, b = float(np.linalg.norm(ind_vec)), float(np.linalg.norm(other_vec))
    if a + b == 0:
        raise ToxicityError("both contribution norms are zero")
    return a / (a + b)


def predicted_descaled_toxicity(tau: float, t: float, c: float) -> float:
    """Toxicity ratio after dividing induction importances by ``ln(t + c)``."""
    if not 0.0 <= tau <= 1.0:
        raise ToxicityError(f"tau must be in [0, 1], got {tau}")
    if t + c <= 1:
        raise ToxicityError(f"ln(t + c) <= 0 for t={t}, c={c}")
    return tau / ((1.0 - tau) * math.log(t + c) + tau)


def entropy_trace(step_distributions: Sequence) -> tuple[list[float], list[float]]:
    """Per-step entropies and the drops ``H_t - H_{t+1}``."""
    if len(step_distributions) < 2:
        raise ToxicityError("need at least two distributions")
    hs = [entropy(p) for p in step_distributions]
    return hs, [hs[i] - hs[i + 1] for i in range(len(hs) - 1)]


@dataclass
class DecayFit:
    lam: float
    log_h0: float
    residual: float  # sum of squared residuals in log space
    window: tuple[int, int]
    n_points: int


def fit_decay_rate(h_series: Sequence[float], window: tuple[int, int] | None = None) -> DecayFit:
    """Least-squares fit of ``ln H_t = ln H_0 - lam * t`` over ``window`` (a step slice).

    Steps are indexed from 0; non-positive entropies are dropped.
    """
    h = list(h_series)
    lo, hi = window if window is not None else (0, len(h))
    if hi - lo < 3:
        raise ToxicityError("fit window must span at least 3 steps")
    pts = [(t, math.log(h[t])) for t in range(lo, min(hi, len(h))) if h[t] is not None and h[t] > 0]
    if len(pts) < 3:
        raise ToxicityError(f"only {len(pts)} positive entropies in window {lo}:{hi}")
    t = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts])
    tm, ym = t.mean(), y.mean()
    slope = float(((t - tm) * (y - ym)).sum() / ((t - tm) ** 2).sum())
    intercept = float(ym - slope * tm)
    resid = float(((y - (intercept + slope * t)) ** 2).sum())
    return DecayFit(-slope, intercept, resid, (lo, hi), len(pts))


# --- traces ------------------------------------------------------------------


@dataclass
class ToxicityConfig:
    ind_set: InductionHeadSet | Sequence[HeadId]
    gamma: float = DEFAULT_GAMMA
    method: str = "causal"  # causal | norm | static | none
    static_map: ImportanceMap | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ToxicityError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.method not in ("causal", "norm", "static", "none"):
            raise ToxicityError(f"unknown toxicity method {self.method!r}")
        if self.method == "static" and self.static_map is None:
            raise ToxicityError("static method needs an importance map")

    @property
    def heads(self) -> tuple[HeadId, ...]:
        return tuple(self.ind_set.heads if isinstance(self.ind_set, InductionHeadSet) else self.ind_set)


@dataclass
class ToxicityTrace:
    tokens: list[int]
    tau: list  # float or None per step
    entropy_nats: list[float]
    method: str
    gamma: float
    ood: bool = False
    stopped: bool = False
    factors: list[float] = field(default_factory=list)
    probs: list = field(default_factory=list, repr=False)

    @property
    def grad_h(self) -> list[float]:
        e = self.entropy_nats
        return [e[i] - e[i + 1] for i in range(len(e) - 1)]

    @property
    def toxic_flag(self) -> list[bool]:
        return [t is not None and t >= self.gamma for t in self.tau]

    def present_tau(self) -> list[float]:
        return [t for t in self.tau if t is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "tau", "entropy_nats", "grad_H", "toxic_flag", "method"])
        grads = self.grad_h
        for i, (tau, h, flag) in enumerate(zip(self.tau, self.entropy_nats, self.toxic_flag)):
            g = repr(grads[i]) if i < len(grads) else ""
            w.writerow([i + 1, "" if tau is None else repr(tau), repr(h), g, int(flag), self.method])
        return buf.getvalue()


def corrupt_for_step(seq: Sequence[int], rng: RngStream, vocab_size: int):
    """Corrupt the copy slot for the current final token.

    Finds the most recent earlier occurrence ``j`` of the final token whose
    successor is not the final position itself and replaces ``seq[j + 1]``
    with a uniformly drawn different token.  Returns ``None`` when no such
    occurrence exists.  Also returns the corrupted position.
    """
    n = len(seq)
    last = seq[-1]
    for j in range(n - 3, -1, -1):
        if seq[j] == last:
            pos = j + 1
            old = seq[pos]
            r = rng.randbelow(vocab_size - 1)
            if r >= old:
                r += 1
            out = list(seq)
            out[pos] = r
            return out, pos
    return None


StepScale = Mapping[HeadId, Callable[[int], float]]


def run_trace(
    weights: ModelWeights,
    context: Sequence[int],
    steps: int,
    cfg: ToxicityConfig,
    step_scale: StepScale | None = None,
    stop: Callable[[list[int]], bool] | None = None,
    decode: str | float = "greedy",
    rng: RngStream | None = None,
) -> ToxicityTrace:
    """Generate up to ``steps`` tokens and measure toxicity at every step.

    ``causal`` re-runs the patching protocol against a per-step corruption,
    scoring the token actually chosen next (``H + 2`` passes per step).
    ``norm`` uses the contribution-norm proxy of the clean pass, ``static``
    a fixed importance map, ``none`` records only entropies.  The clean pass is
    the generation pass, so tokens match plain ``generate`` with the same hooks.
    """
    model_cfg = weights.cfg
    context = [int(t) for t in context]
    if not context:
        raise ToxicityError("context must be non-empty")
    if steps < 1:
        raise ToxicityError("steps must be >= 1")
    if decode != "greedy" and rng is None:
        raise ToxicityError("sampled decoding needs an RngStream")
    heads = cfg.heads
    step_scale = dict(step_scale or {})
    room = model_cfg.max_seq - len(context)
    n_steps = min(steps, room)
    ood = steps > room
    static_tau = toxicity_ratio(cfg.static_map.importance, heads) if cfg.method == "static" else None

    seq = list(context)
    out = ToxicityTrace([], [], [], cfg.method, cfg.gamma)
    for t in range(1, n_steps + 1):
        scale = {h: position_factors(fn, len(context), len(seq)) for h, fn in step_scale.items()}
        if step_scale:
            out.factors.append(float(next(iter(step_scale.values()))(t)))
        capture = "all" if cfg.method in ("norm", "causal") else set()
        logits, cache = forward(weights, seq, HookSet(capture=capture, scale=scale))
        p = softmax(logits[-1])
        if decode == "greedy":
            nxt = int(np.argmax(logits[-1]))
        else:
            nxt = rng.categorical(softmax(logits[-1] / float(decode)))

        tau = None
        if cfg.method == "causal":
            bad = corrupt_for_step(seq, derive_stream(cfg.seed, f"step-corrupt/{t}"), model_cfg.vocab_size)
            if bad is not None:
                res = patch_trial(weights, seq, bad[0], nxt, scale=scale, clean_pass=(logits, cache))
                if res.importance is not None:
                    try:
                        tau = toxicity_ratio(res.importance, heads)
                    except ToxicityError:
                        tau = None
        elif cfg.method == "norm":
            try:
                tau = toxicity_norm_proxy(cache, weights, heads, -1)
            except ToxicityError:
                tau = None
        elif cfg.method == "static":
            tau = static_tau

        out.tau.append(tau)
        out.entropy_nats.append(entropy(p))
        out.probs.append(p)
        out.tokens.append(nxt)
        seq.append(nxt)
        if stop is not None and stop(out.tokens):
            out.stopped = True
            break
    out.ood = ood and not out.stopped
    return out


def toxicity_causal_trace(weights: ModelWeights, context, steps: int, cfg: ToxicityConfig, **kw) -> ToxicityTrace:
    if cfg.method != "causal":
        cfg = ToxicityConfig(cfg.ind_set, cfg.gamma, "causal", cfg.static_map, cfg.seed)
    return run_trace(weights, context, steps, cfg, **kw)


# --- propagation and directional checks --------------------------------------------


@dataclass
class PropagationStats:
    onset: int | None  # 1-based step of the first tau >= gamma
    frac_nondecreasing: float | None
    windowed_monotone: bool | None
    window_means: list[float] = field(default_factory=list)


def check_propagation(trace_or_taus, gamma: float = DEFAULT_GAMMA, window: int = 8) -> PropagationStats:
    """Onset of toxicity and whether tau keeps rising afterwards.

    ``frac_nondecreasing`` counts post-onset pairs ``tau_{t+1} >= tau_t`` among
    pairs with both values present.  ``windowed_monotone`` is true when the
    means of consecutive complete ``window``-step blocks after onset never
    decrease (vacuously true with fewer than two blocks).
    """
    taus = list(trace_or_taus.tau if isinstance(trace_or_taus, ToxicityTrace) else trace_or_taus)
    if len(taus) < 2:
        raise ToxicityError("trace needs at least two steps")
    onset = next((i for i, t in enumerate(taus) if t is not None and t >= gamma), None)
    if onset is None:
        return PropagationStats(None, None, None)
    post = taus[onset:]
    pairs = [(a, b) for a, b in zip(post, post[1:]) if a is not None and b is not None]
    frac = sum(b >= a for a, b in pairs) / len(pairs) if pairs else None
    means = []
    for start in range(0, len(post) - window + 1, window):
        block = [t for t in post[start : start + window] if t is not None]
        if block:
            means.append(float(np.mean(block)))
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    return PropagationStats(onset + 1, frac, monotone, means)


def entropy_drop_by_toxicity(trace: ToxicityTrace) -> tuple[float | None, float | None]:
    """Mean entropy drop on toxic steps and on non-toxic steps (``None`` if no such step)."""
    grads = trace.grad_h
    flags = trace.toxic_flag[: len(grads)]
    tox = [g for g, f in zip(grads, flags) if f]
    non = [g for g, f, t in zip(grads, flags, trace.tau) if not f and t is not None]
    return (float(np.mean(tox)) if tox else None, float(np.mean(non)) if non else None)


def entropy_upper_bound(eps: float, vocab_size: int) -> float:
    """Upper bound on the entropy of a distribution with top mass ``1 - eps``.

    ``H <= eps * (1 + ln|V| + ln(1/eps))``: the top term is at most ``eps``
    because ``-ln(1 - eps) <= eps / (1 - eps)``, and the tail is at most
    ``eps * ln(|V| / eps)``.
    """
    if not 0 < eps < 1:
        raise ToxicityError("eps must be in (0, 1)")
    return eps * (1.0 + math.log(vocab_size) + math.log(1.0 / eps))
