"""Step-dependent down-scaling of induction-head outputs during generation.

Policy strings accepted on the command line::

    log:c=<float>     1 / ln(t + c), clipped to 1 unless ",clamp=0" follows
    lin               1 / t
    const:k=<float>   k
    id                1
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

from .numerics import RngStream
from .patching import InductionHeadSet
from .toxicity import ToxicityConfig, ToxicityTrace, run_trace
from .transformer import HeadId, ModelWeights

KINDS = ("logarithmic", "linear", "constant", "identity")

POLICY_USAGE = "policy must be one of: log:c=<float>[,clamp=0|1] | lin | const:k=<float> | id"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingPolicy:
    kind: str = "logarithmic"
    c: float = 2.0
    k_const: float = 0.5
    clamp_to_unity: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind == "logarithmic" and not self.c > 0:
            raise PolicyError(f"logarithmic descaling needs c > 0, got c={self.c}")
        # k = 0 is kept: it is the zero-ablation limit
        if self.kind == "constant" and not (self.k_const >= 0 and math.isfinite(self.k_const)):
            raise PolicyError(f"constant scaling needs k >= 0, got k={self.k_const}")

    def factor(self, t: int) -> float:
        return scale_factor(self, t)

    def __str__(self) -> str:
        if self.kind == "logarithmic":
            return f"log:c={self.c!r}" + ("" if self.clamp_to_unity else ",clamp=0")
        if self.kind == "linear":
            return "lin"
        if self.kind == "constant":
            return f"const:k={self.k_const!r}"
        return "id"


IDENTITY = ScalingPolicy("identity")


def scale_factor(policy: ScalingPolicy, t: int) -> float:
    if t < 1:
        raise PolicyError(f"generation step must be >= 1, got {t}")
    if policy.kind == "logarithmic":
        if t + policy.c <= 1:
            raise PolicyError(f"ln(t + c) <= 0 at t={t}, c={policy.c}")
        f = 1.0 / math.log(t + policy.c)
        return min(1.0, f) if policy.clamp_to_unity else f
    if policy.kind == "linear":
        return 1.0 / t
    if policy.kind == "constant":
        return policy.k_const
    return 1.0


_FLOAT = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_LOG_RE = re.compile(rf"^log:c=({_FLOAT})(?:,clamp=([01]))?$")
_CONST_RE = re.compile(rf"^const:k=({_FLOAT})$")


def parse_policy(text: str) -> ScalingPolicy:
    s = text.strip()
    if s == "lin":
        return ScalingPolicy("linear")
    if s == "id":
        return IDENTITY
    m = _LOG_RE.match(s)
    if m:
        clamp = m.group(2) != "0"
        return ScalingPolicy("logarithmic", c=float(m.group(1)), clamp_to_unity=clamp)
    m = _CONST_RE.match(s)
    if m:
        return ScalingPolicy("constant", k_const=float(m.group(1)))
    raise PolicyError(f"cannot parse policy {text!r}; {POLICY_USAGE}")


def step_scales(policy: ScalingPolicy, heads: Sequence[HeadId]) -> dict:
    """Scale-hook functions for ``heads``; empty for the identity policy."""
    if policy.kind == "identity":
        return {}
    return {h: policy.factor for h in heads}


@dataclass
class DescaledRun:
    tokens: list[int]
    trace: ToxicityTrace
    factors: list[float]


def descaled_generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    steps: int,
    ind_set: InductionHeadSet | Sequence[HeadId],
    policy: ScalingPolicy,
    decode: str | float = "greedy",
    *,
    tau_method: str = "none",
    rng: RngStream | None = None,
    stop=None,
    seed: int = 0,
) -> DescaledRun:
    """Generate with the induction heads scaled by ``policy`` at each generated step."""
    heads = tuple(ind_set.heads if isinstance(ind_set, InductionHeadSet) else ind_set)
    if not heads and policy.kind != "identity":
        raise PolicyError("an empty induction-head set only makes sense with the identity policy")
    cfg = ToxicityConfig(heads, method=tau_method, seed=seed)
    trace = run_trace(weights, prompt, steps, cfg, step_scale=step_scales(policy, heads), stop=stop, decode=decode, rng=rng)
    factors = [policy.factor(t) for t in range(1, len(trace.tokens) + 1)]
    return DescaledRun(list(trace.tokens), trace, factors)


def ablate_c(weights: ModelWeights, c_values: Sequence[float], setup) -> list[dict]:
    """One row per ``c``: repetition statistics and held-out cross-entropy under ``log:c``.

    ``setup`` is a ``harness.AblationSetup``.  Every ``c`` is validated before
    anything is generated.
    """
    from .harness import run_ablation

    bad = [c for c in c_values if not c > 0]
    if bad:
        raise PolicyError(f"c must be positive; rejected {bad} (zero or negative c makes 1/ln(t+c) invalid)")
    return run_ablation(weights, [ScalingPolicy("logarithmic", c=float(c)) for c in c_values], setup)
