"""Three-pass activation patching, head importance, and induction-head selection."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .copy_task import CopyTaskInstance, corrupt_instance
from .numerics import derive_stream
from .transformer import HeadId, HookSet, ModelWeights, forward

DEGENERATE_EPS = 1e-9


class DegenerateContrast(ArithmeticError):
    """Clean and corrupted target logits coincide, so the recovery ratio is undefined."""


class PatchingError(ValueError):
    pass


def causal_importance(l_clean: float, l_corrupt: float, l_patched: float) -> float:
    """Logit recovery ``(patched - corrupt) / (clean - corrupt)``."""
    den = l_clean - l_corrupt
    if abs(den) < DEGENERATE_EPS:
        raise DegenerateContrast(f"|clean - corrupt| = {abs(den):.3e} < {DEGENERATE_EPS}")
    return (l_patched - l_corrupt) / den


@dataclass
class TrialResult:
    l_clean: float
    l_corrupt: float
    importance: dict | None  # HeadId -> float, None when the contrast is degenerate
    clean_logits: np.ndarray
    clean_cache: object


def patch_trial(
    weights: ModelWeights,
    clean: Sequence[int],
    corrupt: Sequence[int],
    target: int,
    scale: Mapping | None = None,
    final_only: bool = False,
    clean_pass: tuple | None = None,
) -> TrialResult:
    """Clean pass, corrupted pass, then one patched pass per head.

    ``scale`` (head -> factor) is active in every pass.  A patched head is
    removed from the scale map and receives its captured clean output, which
    already includes its own scaling.  A degenerate contrast skips the patched
    passes, so a trial costs ``H + 2`` passes or 2 when degenerate.
    ``clean_pass`` reuses an existing ``(logits, cache)`` captured with the
    same hooks, saving one pass.
    """
    if len(clean) != len(corrupt):
        raise PatchingError("clean and corrupted sequences differ in length")
    scale = dict(scale or {})
    if clean_pass is None:
        clean_pass = forward(weights, clean, HookSet(capture="all", scale=scale))
    clean_logits, cache = clean_pass
    corrupt_logits, _ = forward(weights, corrupt, HookSet(scale=scale))
    l_clean = float(clean_logits[-1, target])
    l_corrupt = float(corrupt_logits[-1, target])
    if abs(l_clean - l_corrupt) < DEGENERATE_EPS:
        return TrialResult(l_clean, l_corrupt, None, clean_logits, cache)
    out = {}
    for head in weights.cfg.heads():
        others = {h: f for h, f in scale.items() if h != head}
        hooks = HookSet(patch={head: cache.z[head]}, scale=others, patch_final_only=final_only)
        patched = forward(weights, corrupt, hooks)[0]
        out[head] = causal_importance(l_clean, l_corrupt, float(patched[-1, target]))
    return TrialResult(l_clean, l_corrupt, out, clean_logits, cache)


@dataclass
class ImportanceMap:
    importance: dict  # HeadId -> mean importance over non-degenerate trials
    n_trials: int
    n_degenerate: int = 0
    raw: dict | None = None  # HeadId -> list of per-trial values

    def ranked(self) -> list[HeadId]:
        return sorted(self.importance, key=lambda h: (-self.importance[h], h.layer, h.head))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "importance", "n_trials"])
        for h in sorted(self.importance):
            w.writerow([h.layer, h.head, repr(float(self.importance[h])), self.n_trials])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "ImportanceMap":
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        imp = {HeadId(int(r["layer"]), int(r["head"])): float(r["importance"]) for r in rows}
        n = int(rows[0]["n_trials"]) if rows else 0
        return cls(imp, n)


def run_patch_protocol(
    weights: ModelWeights,
    instances: Sequence[CopyTaskInstance],
    seed: int = 0,
    keep_raw: bool = False,
    final_only: bool = False,
) -> ImportanceMap:
    """Mean per-head logit recovery over copy-task trials.

    Trial ``i`` corrupts with the stream ``derive_stream(seed, "corrupt/i")``.
    """
    if not instances:
        raise PatchingError("need at least one copy-task instance")
    cfg = weights.cfg
    heads = cfg.heads()
    sums = {h: 0.0 for h in heads}
    raw = {h: [] for h in heads} if keep_raw else None
    good = 0
    for i, inst in enumerate(instances):
        if len(inst.clean) > cfg.max_seq:
            raise PatchingError(f"instance {i} has length {len(inst.clean)} > max_seq {cfg.max_seq}")
        bad = corrupt_instance(inst, derive_stream(seed, f"corrupt/{i}"), cfg.vocab_size)
        res = patch_trial(weights, inst.clean, bad.tokens, inst.target, final_only=final_only)
        if res.importance is None:
            continue
        good += 1
        for h in heads:  # fixed aggregation order
            sums[h] += res.importance[h]
            if raw is not None:
                raw[h].append(res.importance[h])
    if good == 0:
        raise PatchingError(f"all {len(instances)} trials in the batch have a degenerate contrast (seed={seed})")
    return ImportanceMap({h: sums[h] / good for h in heads}, good, len(instances) - good, raw)


@dataclass(frozen=True)
class InductionHeadSet:
    heads: tuple[HeadId, ...]
    selection_p: float
    source: str = ""

    def to_json(self) -> str:
        return json.dumps([[h.layer, h.head] for h in self.heads])

    @classmethod
    def from_json(cls, text: str, selection_p: float = float("nan")) -> "InductionHeadSet":
        return cls(tuple(HeadId(int(l), int(h)) for l, h in json.loads(text)), selection_p)

    def __contains__(self, head) -> bool:
        return head in self.heads

    def __len__(self) -> int:
        return len(self.heads)


def n_selected(p: float, total: int) -> int:
    # exact rational arithmetic so that p=2 on 50 heads gives exactly 1
    return max(1, math.ceil(Fraction(str(p)) * total / 100))


def identify_induction_heads(imap: ImportanceMap, p: float = 2.0) -> InductionHeadSet:
    """Top ``max(1, ceil(p% of heads))`` heads by importance, ties by (layer, head)."""
    if not imap.importance:
        raise PatchingError("importance map is empty")
    if not 0 < p <= 100:
        raise PatchingError(f"p must be in (0, 100], got {p}")
    k = n_selected(p, len(imap.importance))
    return InductionHeadSet(tuple(imap.ranked()[:k]), p, imap.digest())


# --- behavioural scores --------------------------------------------------------


def _first_match(seq: Sequence[int]) -> int:
    a = seq[-1]
    for j, t in enumerate(seq[:-1]):
        if t == a:
            return j
    raise PatchingError("final token does not occur earlier in the sequence")


def _as_batch(pattern_seqs) -> list[list[int]]:
    seqs = list(pattern_seqs)
    if seqs and np.isscalar(seqs[0]):
        seqs = [seqs]
    return [[int(t) for t in s] for s in seqs]


def prefix_match_score(weights: ModelWeights, pattern_seqs, head: HeadId, offset: int = 1) -> float:
    """Mean attention from the final ``A`` to the slot ``offset`` after the first ``A``.

    ``offset=1`` scores the induction pattern (the token that followed the
    earlier ``A``); ``offset=0`` scores attention onto the earlier ``A`` itself.
    """
    scores = []
    for seq in _as_batch(pattern_seqs):
        j = _first_match(seq) + offset
        _, cache = forward(weights, seq, HookSet(capture={head}))
        scores.append(float(cache.attn[head][-1, j]))
    return float(np.mean(scores))


def copy_boost_score(weights: ModelWeights, pattern_seqs, head: HeadId) -> float:
    """Mean logit change for ``B`` at the final ``A`` when ``head`` is zero-scaled."""
    deltas = []
    for seq in _as_batch(pattern_seqs):
        b = seq[_first_match(seq) + 1]
        active = forward(weights, seq)[0]
        ablated = forward(weights, seq, HookSet(scale={head: 0.0}))[0]
        deltas.append(float(active[-1, b] - ablated[-1, b]))
    return float(np.mean(deltas))


@dataclass
class HeadBehaviorScores:
    p_match: dict = field(default_factory=dict)
    copy_boost: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["layer,head,p_match,copy_boost"]
        for h in sorted(self.p_match):
            lines.append(f"{h.layer},{h.head},{self.p_match[h]!r},{self.copy_boost[h]!r}")
        return "\n".join(lines) + "\n"


def head_behavior_scores(weights: ModelWeights, pattern_seqs) -> HeadBehaviorScores:
    out = HeadBehaviorScores()
    for h in weights.cfg.heads():
        out.p_match[h] = prefix_match_score(weights, pattern_seqs, h)
        out.copy_boost[h] = copy_boost_score(weights, pattern_seqs, h)
    return out


def repeated_random_sequences(vocab_size: int, half_len: int, count: int, seed: int, label: str = "behavior"):
    """``count`` sequences ``R R[:-?]`` ending on a token whose first occurrence lies in ``R``.

    Each sequence is ``R + R[:m]`` for a random cut ``m`` in ``[1, half_len]``,
    with ``R`` made of distinct tokens, so the final token repeats exactly once.
    """
    rng = derive_stream(seed, label)
    out = []
    for _ in range(count):
        r = rng.sample(range(vocab_size), half_len)
        m = 1 + rng.randbelow(half_len)
        out.append(r + r[:m])
    return out
