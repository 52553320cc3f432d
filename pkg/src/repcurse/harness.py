"""Experiment driver: repetition sweeps, frequency buckets, held-out CE and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from .descale import IDENTITY, ScalingPolicy, parse_policy, step_scales
from .numerics import derive_stream, log_softmax
from .svg import line_chart
from .toxicity import ToxicityConfig, run_trace
from .transformer import HeadId, HookSet, ModelWeights, forward, position_factors

RESULT_COLUMNS = ("k", "token_ids", "policy", "trial", "achieved", "continuation_len", "ood", "mean_tau", "final_entropy")
SEED_CAP = 8


class HarnessError(ValueError):
    pass


def default_k_values(upper: int = 512) -> tuple[int, ...]:
    return tuple(2**i for i in range(1, int(math.log2(upper)) + 1))


@dataclass(frozen=True)
class SweepSpec:
    k_values: tuple[int, ...] = default_k_values()
    pattern_len: int = 2
    token_pool: tuple[int, ...] | None = None  # None: the whole vocabulary
    decode: str = "greedy"
    window: int | None = None  # None: the model's max_seq
    policies: tuple[str, ...] = ("id",)
    trials: int = 4
    master_seed: int = 0
    ind_heads: tuple[tuple[int, int], ...] = ()
    tau_method: str = "norm"

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "policies", tuple(str(parse_policy(p)) for p in self.policies))
        object.__setattr__(self, "ind_heads", tuple((int(l), int(h)) for l, h in self.ind_heads))
        if self.token_pool is not None:
            object.__setattr__(self, "token_pool", tuple(int(t) for t in self.token_pool))
        if not self.k_values or min(self.k_values) < 2:
            raise HarnessError(f"k values must be >= 2, got {self.k_values}")
        if not 1 <= self.pattern_len <= 4:
            raise HarnessError(f"pattern length must be 1..4, got {self.pattern_len}")
        if self.decode != "greedy":
            raise HarnessError("sweeps decode greedily")
        if self.trials < 1:
            raise HarnessError("trials must be >= 1")
        if self.token_pool is not None and len(set(self.token_pool)) < self.pattern_len:
            raise HarnessError("token pool is smaller than the pattern length")
        if not self.policies:
            raise HarnessError("at least one policy is required")

    @property
    def heads(self) -> tuple[HeadId, ...]:
        return tuple(HeadId(l, h) for l, h in self.ind_heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        d["policies"] = list(self.policies)
        d["ind_heads"] = [list(h) for h in self.ind_heads]
        d["token_pool"] = None if self.token_pool is None else list(self.token_pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise HarnessError(f"unknown sweep keys: {sorted(extra)}")
        d = dict(d)
        for key in ("k_values", "policies", "token_pool"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "ind_heads" in d:
            d["ind_heads"] = tuple(tuple(h) for h in d["ind_heads"])
        return cls(**d)


@dataclass
class SweepRow:
    k: int
    token_ids: tuple[int, ...]
    policy: str
    trial: int
    achieved: int
    continuation_len: int
    ood: bool
    mean_tau: float | None
    final_entropy: float | None
    context_len: int = 0
    tau: list = field(default_factory=list, repr=False)
    entropy: list = field(default_factory=list, repr=False)
    tokens: list = field(default_factory=list, repr=False)


@dataclass
class SweepReport:
    spec: SweepSpec
    rows: list[SweepRow]
    window: int
    model_digest: str = ""
    model_path: str = ""
    digests: dict = field(default_factory=dict)

    def cell(self, k: int, policy: str) -> list[SweepRow]:
        return [r for r in self.rows if r.k == k and r.policy == policy]

    def aggregates(self) -> dict:
        out = {}
        for pol in self.spec.policies:
            per_k = {}
            for k in self.spec.k_values:
                rows = self.cell(k, pol)
                per_k[str(k)] = {
                    "median_achieved": float(median(r.achieved for r in rows)),
                    "median_continuation": float(median(r.continuation_len for r in rows)),
                    "ood_fraction": sum(r.ood for r in rows) / len(rows),
                }
            out[pol] = per_k
        return out


def measure_achieved_repetitions(tokens: Sequence[int], pattern: Sequence[int]) -> int:
    """Number of whole consecutive copies of ``pattern`` at the start of ``tokens``."""
    pattern = list(pattern)
    if not pattern:
        raise HarnessError("pattern must be non-empty")
    m, n = len(pattern), 0
    tokens = list(tokens)
    while tokens[n * m : (n + 1) * m] == pattern:
        n += 1
    return n


def seeded_context(pattern: Sequence[int], k: int) -> list[int]:
    return list(pattern) * min(k, SEED_CAP)


def trial_pattern(spec: SweepSpec, vocab_size: int, trial: int) -> tuple[int, ...]:
    pool = list(spec.token_pool) if spec.token_pool is not None else list(range(vocab_size))
    bad = [t for t in pool if not 0 <= t < vocab_size]
    if bad:
        raise HarnessError(f"pattern tokens out of vocabulary [0, {vocab_size}): {bad[:5]}")
    rng = derive_stream(spec.master_seed, f"sweep-pattern/{trial}")
    return tuple(rng.sample(sorted(set(pool)), spec.pattern_len))


def _run_cell(weights, context, pattern, policy: ScalingPolicy, spec: SweepSpec, window: int) -> dict:
    m = len(pattern)
    n_ctx = len(context)

    def broke(gen):
        i = n_ctx + len(gen) - 1
        return gen[-1] != pattern[i % m]

    heads = spec.heads
    method = spec.tau_method if heads else "none"
    cfg = ToxicityConfig(heads, method=method, seed=spec.master_seed)
    trace = run_trace(weights, context, window - n_ctx, cfg, step_scale=step_scales(policy, heads), stop=broke)
    cont = len(trace.tokens) - 1 if trace.stopped else len(trace.tokens)
    taus = trace.present_tau()
    return {
        "achieved": measure_achieved_repetitions(context + trace.tokens, pattern),
        "continuation_len": cont,
        "ood": not trace.stopped,
        "mean_tau": float(np.mean(taus)) if taus else None,
        "final_entropy": trace.entropy_nats[-1] if trace.entropy_nats else None,
        "tau": list(trace.tau),
        "entropy": list(trace.entropy_nats),
        "tokens": list(trace.tokens),
    }


def run_repetition_sweep(weights: ModelWeights, spec: SweepSpec, *, model_path: str = "") -> SweepReport:
    """Seed ``min(k, 8)`` pattern copies and generate until the pattern breaks or the window fills."""
    from .zoo.checkpoint import weights_digest

    cfg = weights.cfg
    window = spec.window or cfg.max_seq
    if window > cfg.max_seq:
        raise HarnessError(f"window {window} exceeds the model context {cfg.max_seq}")
    for l, h in spec.ind_heads:
        if not (0 <= l < cfg.n_layers and 0 <= h < cfg.n_heads):
            raise HarnessError(f"head L{l}H{h} is not in the model")
    if SEED_CAP * spec.pattern_len >= window:
        raise HarnessError("window too short for the seeded context")
    memo: dict = {}
    rows = []
    for pol_text in spec.policies:
        policy = parse_policy(pol_text)
        for k in spec.k_values:
            for trial in range(spec.trials):
                pattern = trial_pattern(spec, cfg.vocab_size, trial)
                context = seeded_context(pattern, k)
                key = (tuple(context), pol_text)
                if key not in memo:
                    memo[key] = _run_cell(weights, context, pattern, policy, spec, window)
                r = memo[key]
                rows.append(SweepRow(k, pattern, pol_text, trial, context_len=len(context), **r))
    return SweepReport(spec, rows, window, weights_digest(weights), model_path)


# --- frequency buckets ----------------------------------------------------------


@dataclass
class FrequencyBuckets:
    counts: dict[int, int]
    top_set: list[int]
    bottom_set: list[int]
    top_pct: float
    bottom_pct: float


def frequency_buckets(corpus, top_pct: float, bottom_pct: float, vocab_size: int | None = None) -> FrequencyBuckets:
    """Most and least frequent tokens; each set holds ``max(1, floor(pct * N / 100))`` tokens.

    ``N`` is ``vocab_size`` when given (unseen tokens count 0), else the number
    of distinct tokens seen.  Ties go to the smaller token id in both
    directions, and the bottom set never reuses a top token.
    """
    flat = [int(t) for t in np.asarray(corpus, dtype=np.int64).ravel()]
    if not flat:
        raise HarnessError("corpus is empty")
    for pct in (top_pct, bottom_pct):
        if not 0 < pct <= 50:
            raise HarnessError(f"percentile must be in (0, 50], got {pct}")
    counts = Counter(flat)
    universe = range(vocab_size) if vocab_size is not None else sorted(counts)
    full = {t: counts.get(t, 0) for t in universe}
    n = len(full)
    n_top = max(1, math.floor(top_pct * n / 100))
    n_bot = max(1, math.floor(bottom_pct * n / 100))
    top = sorted(full, key=lambda t: (-full[t], t))[:n_top]
    taken = set(top)
    bottom = [t for t in sorted(full, key=lambda t: (full[t], t)) if t not in taken][:n_bot]
    return FrequencyBuckets(full, sorted(top), sorted(bottom), top_pct, bottom_pct)


# --- held-out cross-entropy ----------------------------------------------------------


def held_out_ce(
    weights: ModelWeights,
    policy: ScalingPolicy,
    eval_set,
    ind_heads: Sequence[HeadId] = (),
    prompt_len: int | None = None,
) -> dict:
    """Teacher-forced CE on the second part of each sequence with descaling active.

    The first ``prompt_len`` tokens (default half the sequence) act as the
    prompt; the prediction of token ``q + 1`` uses step index
    ``q - prompt_len + 2``, exactly as during generation.
    """
    batch = np.asarray(eval_set, dtype=np.int64)
    if batch.ndim != 2 or batch.size == 0:
        raise HarnessError("eval set must be a non-empty [N, T] array")
    T = batch.shape[1]
    P = T // 2 if prompt_len is None else int(prompt_len)
    if not 1 <= P < T:
        raise HarnessError(f"prompt length must be in [1, {T}), got {P}")
    scales = step_scales(policy, [HeadId(*h) for h in ind_heads])
    hooks = HookSet(scale={h: position_factors(fn, P, T) for h, fn in scales.items()})
    total, n = 0.0, 0
    for seq in batch:
        logits, _ = forward(weights, seq, hooks)
        lp = log_softmax(logits[P - 1 : T - 1])
        total -= float(lp[np.arange(T - P), seq[P:]].sum())
        n += T - P
    ce = total / n
    return {"cross_entropy_nats": ce, "perplexity": math.exp(ce), "n_tokens": n}


# --- c ablation ------------------------------------------------------------


@dataclass
class AblationSetup:
    sweep: SweepSpec
    eval_set: np.ndarray
    prompt_len: int | None = None


def run_ablation(weights: ModelWeights, policies: Sequence[ScalingPolicy], setup: AblationSetup) -> list[dict]:
    out = []
    base = setup.sweep.to_dict()
    for pol in policies:
        spec = SweepSpec.from_dict({**base, "policies": (str(pol),)})
        rep = run_repetition_sweep(weights, spec)
        rows = rep.rows
        ce = held_out_ce(weights, pol, setup.eval_set, spec.heads, setup.prompt_len)
        out.append(
            {
                "policy": str(pol),
                "c": pol.c if pol.kind == "logarithmic" else None,
                "median_achieved": float(median(r.achieved for r in rows)),
                "median_continuation": float(median(r.continuation_len for r in rows)),
                "ood_fraction": sum(r.ood for r in rows) / len(rows),
                "cross_entropy_nats": ce["cross_entropy_nats"],
                "perplexity": ce["perplexity"],
            }
        )
    return out


def ablation_csv(rows: list[dict]) -> str:
    cols = ["policy", "c", "median_achieved", "median_continuation", "ood_fraction", "cross_entropy_nats", "perplexity"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


# --- reports -----------------------------------------------------------------


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def results_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in report.rows:
        w.writerow(
            [r.k, " ".join(map(str, r.token_ids)), r.policy, r.trial, r.achieved, r.continuation_len,
             int(r.ood), _num(r.mean_tau), _num(r.final_entropy)]
        )
    return buf.getvalue()


def read_results_csv(text: str) -> list[dict]:
    """Strict parser for ``results.csv``; raises on any malformed row."""
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if tuple(header) != RESULT_COLUMNS:
        raise HarnessError(f"unexpected header {header}")
    rows = []
    for i, rec in enumerate(rd, start=2):
        if len(rec) != len(RESULT_COLUMNS):
            raise HarnessError(f"line {i}: expected {len(RESULT_COLUMNS)} fields, got {len(rec)}")
        d = dict(zip(RESULT_COLUMNS, rec))
        if d["ood"] not in ("0", "1"):
            raise HarnessError(f"line {i}: bad ood flag {d['ood']!r}")
        rows.append(
            {
                "k": int(d["k"]),
                "token_ids": tuple(int(t) for t in d["token_ids"].split()),
                "policy": d["policy"],
                "trial": int(d["trial"]),
                "achieved": int(d["achieved"]),
                "continuation_len": int(d["continuation_len"]),
                "ood": d["ood"] == "1",
                "mean_tau": float(d["mean_tau"]) if d["mean_tau"] else None,
                "final_entropy": float(d["final_entropy"]) if d["final_entropy"] else None,
            }
        )
    return rows


def build_digest() -> str:
    """sha256 over the package sources, in path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _charts(report: SweepReport) -> dict[str, str]:
    agg = report.aggregates()
    rep_series = [
        (pol, [(int(k), v["median_achieved"]) for k, v in per_k.items()]) for pol, per_k in agg.items()
    ]
    k_max = max(report.spec.k_values)
    tau_series, h_series = [], []
    for pol in report.spec.policies:
        row = next(r for r in report.rows if r.k == k_max and r.policy == pol and r.trial == 0)
        tau_series.append((pol, [(i + 1, t) for i, t in enumerate(row.tau)]))
        h_series.append((pol, [(i + 1, h) for i, h in enumerate(row.entropy)]))
    charts = {
        "repetitions_vs_k.svg": line_chart(
            rep_series, "Achieved repetitions vs seeded count", "seeded repetitions k", "median achieved repetitions", log_x=True
        ),
        "entropy_trace.svg": line_chart(h_series, f"Entropy per step (k={k_max}, trial 0)", "generation step t", "entropy H_t (nats)"),
    }
    if any(t is not None for _, pts in tau_series for _, t in pts):
        charts["tau_trace.svg"] = line_chart(
            tau_series, f"Toxicity per step (k={k_max}, trial 0)", "generation step t", "toxicity ratio tau_t"
        )
    return charts


def _write(path: Path, text: str) -> str:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return hashlib.sha256(text.encode()).hexdigest()


def emit_report(report: SweepReport, out_dir: str | Path) -> dict[str, Path]:
    """Write results.csv, every chart and summary.json (which lists the other files' digests)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    files = {"results.csv": results_csv(report), **_charts(report)}
    digests = {name: _write(out / name, text) for name, text in sorted(files.items())}
    report.digests = digests
    summary = {
        "config": report.spec.to_dict(),
        "master_seed": report.spec.master_seed,
        "window": report.window,
        "model": {"path": report.model_path, "sha256": report.model_digest},
        "build_digest": build_digest(),
        "aggregates": report.aggregates(),
        "files": digests,
    }
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {name: out / name for name in [*sorted(files), "summary.json"]}


def load_summary(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise HarnessError(f"cannot read summary {path}: {e}") from e


__all__ = [
    "AblationSetup",
    "FrequencyBuckets",
    "HarnessError",
    "IDENTITY",
    "RESULT_COLUMNS",
    "SweepReport",
    "SweepRow",
    "SweepSpec",
    "build_digest",
    "default_k_values",
    "emit_report",
    "frequency_buckets",
    "held_out_ce",
    "load_summary",
    "measure_achieved_repetitions",
    "read_results_csv",
    "results_csv",
    "run_ablation",
    "run_repetition_sweep",
]
