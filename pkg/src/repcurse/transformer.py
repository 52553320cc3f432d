"""Attention-only decoder transformer with per-head capture, patch and scale hooks.

Every analysis forward pass is evaluated at the fixed shape ``max_seq``: the
token sequence is right-padded and results are sliced back.  Row ``i`` of every
intermediate then goes through identical arithmetic whatever the true length,
which is what makes causality and hook neutrality hold bitwise rather than to
rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .numerics import RngStream, softmax


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    max_seq: int

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_head) < 1:
            raise ModelError(f"non-positive dimension in {self}")
        if self.n_heads * self.d_head != self.d_model:
            raise ModelError(f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")
        if self.max_seq < 2:
            raise ModelError("max_seq must be at least 2")
        if self.vocab_size < 4:
            raise ModelError("vocab_size must be at least 4")

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def heads(self) -> list["HeadId"]:
        return [HeadId(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
        }


class HeadId(NamedTuple):
    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"


PARAM_NAMES = ("token_embed", "pos_embed", "W_Q", "W_K", "W_V", "W_O", "unembed")


@dataclass
class ModelWeights:
    """Parameters, per-head matrices stacked as ``[layer, head, ...]``.

    ``W_Q``, ``W_K``, ``W_V`` are ``[L, H, d_model, d_head]`` and ``W_O`` is
    ``[L, H, d_head, d_model]``.  Treated as immutable once built.
    """

    cfg: ModelConfig
    token_embed: np.ndarray
    pos_embed: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    unembed: np.ndarray

    def __post_init__(self):
        c = self.cfg
        expected = {
            "token_embed": (c.vocab_size, c.d_model),
            "pos_embed": (c.max_seq, c.d_model),
            "W_Q": (c.n_layers, c.n_heads, c.d_model, c.d_head),
            "W_K": (c.n_layers, c.n_heads, c.d_model, c.d_head),
            "W_V": (c.n_layers, c.n_heads, c.d_model, c.d_head),
            "W_O": (c.n_layers, c.n_heads, c.d_head, c.d_model),
            "unembed": (c.d_model, c.vocab_size),
        }
        for name, shape in expected.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelWeights":
        L, H, d, dh = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head
        return cls(
            cfg,
            np.zeros((cfg.vocab_size, d)),
            np.zeros((cfg.max_seq, d)),
            np.zeros((L, H, d, dh)),
            np.zeros((L, H, d, dh)),
            np.zeros((L, H, d, dh)),
            np.zeros((L, H, dh, d)),
            np.zeros((d, cfg.vocab_size)),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **arrays) -> "ModelWeights":
        p = self.params()
        p.update(arrays)
        return ModelWeights(self.cfg, **p)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.cfg, **{k: v.copy() for k, v in self.params().items()})

    def equals(self, other: "ModelWeights") -> bool:
        return self.cfg == other.cfg and all(
            np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values())
        )


@dataclass
class HookSet:
    """Per-head interventions for one forward pass.

    ``patch`` maps a head to replacement outputs ``[seq, d_head]`` (pre-W_O).
    ``scale`` maps a head to a scalar or per-position factor vector ``[seq]``.
    ``capture`` is a set of heads, or ``"all"``.  Captured outputs are the
    values actually fed into W_O, i.e. after any patch or scale.
    """

    capture: set | str = field(default_factory=set)
    patch: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)
    patch_final_only: bool = False

    def __post_init__(self):
        both = set(self.patch) & set(self.scale)
        if both:
            raise ModelError(f"heads {sorted(both)} appear in both patch and scale")

    def captures(self, head: HeadId) -> bool:
        return self.capture == "all" or head in self.capture


@dataclass
class ActivationCache:
    tokens: np.ndarray
    attn: dict  # HeadId -> [seq, seq]
    z: dict  # HeadId -> [seq, d_head], the head output entering W_O
    resid: list  # n_layers + 1 snapshots, each [seq, d_model]
    logits: np.ndarray  # [seq, vocab]

    def head_output(self, head: HeadId) -> np.ndarray:
        if head not in self.z:
            raise ModelError(f"head {head} was not captured")
        return self.z[head]


_pass_count = 0


def forward_calls() -> int:
    """Number of forward passes executed in this process (instrumentation)."""
    return _pass_count


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size < 1:
        raise ModelError("token sequence must be a non-empty 1-d sequence")
    if toks.size > cfg.max_seq:
        raise ModelError(f"sequence length {toks.size} exceeds max_seq {cfg.max_seq}")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise ModelError(f"token id out of vocabulary [0, {cfg.vocab_size})")
    return toks


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def forward(weights: ModelWeights, tokens, hooks: HookSet | None = None) -> tuple[np.ndarray, ActivationCache]:
    """Run the model on one sequence. Returns ``(logits [T, vocab], cache)``."""
    global _pass_count
    cfg = weights.cfg
    toks = _check_tokens(cfg, tokens)
    T, S = toks.size, cfg.max_seq
    padded = np.zeros(S, dtype=np.int64)
    padded[:T] = toks
    mask = _causal_mask(S)
    inv_sqrt = 1.0 / math.sqrt(cfg.d_head)

    x = weights.token_embed[padded] + weights.pos_embed
    resid = [x[:T].copy()]
    attn_cache: dict = {}
    z_cache: dict = {}
    for layer in range(cfg.n_layers):
        q = x @ weights.W_Q[layer]
        k = x @ weights.W_K[layer]
        v = x @ weights.W_V[layer]
        scores = (q @ k.transpose(0, 2, 1)) * inv_sqrt
        scores[:, mask] = -np.inf
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        z = a @ v
        if hooks is not None:
            for h in range(cfg.n_heads):
                hid = HeadId(layer, h)
                if hid in hooks.patch:
                    rep = np.asarray(hooks.patch[hid], dtype=np.float64)
                    if rep.shape != (T, cfg.d_head):
                        raise ModelError(f"patch for {hid} has shape {rep.shape}, expected {(T, cfg.d_head)}")
                    if hooks.patch_final_only:
                        z[h, T - 1] = rep[T - 1]
                    else:
                        z[h, :T] = rep
                elif hid in hooks.scale:
                    f = np.asarray(hooks.scale[hid], dtype=np.float64)
                    if f.ndim == 0:
                        z[h] = z[h] * f
                    else:
                        if f.shape != (T,):
                            raise ModelError(f"scale for {hid} has shape {f.shape}, expected {(T,)}")
                        z[h, :T] = z[h, :T] * f[:, None]
                if hooks.captures(hid):
                    attn_cache[hid] = a[h, :T, :T].copy()
                    z_cache[hid] = z[h, :T].copy()
        contrib = z @ weights.W_O[layer]
        x = x + contrib.sum(axis=0)
        resid.append(x[:T].copy())
    logits = (x @ weights.unembed)[:T]
    _pass_count += 1
    cache = ActivationCache(toks, attn_cache, z_cache, resid, logits)
    return logits, cache


def run(weights: ModelWeights, tokens, hooks: HookSet | None = None) -> np.ndarray:
    return forward(weights, tokens, hooks)[0]


def capture_all(weights: ModelWeights, tokens, scale: Mapping | None = None) -> tuple[np.ndarray, ActivationCache]:
    return forward(weights, tokens, HookSet(capture="all", scale=dict(scale or {})))


def head_contribution(cache: ActivationCache, weights: ModelWeights, head: HeadId, position: int) -> np.ndarray:
    """Additive residual-stream contribution ``z @ W_O`` of one head at one position."""
    z = cache.head_output(head)
    return z[position] @ weights.W_O[head.layer, head.head]


# --- generation -------------------------------------------------------------


@dataclass
class Generation:
    tokens: list[int]  # generated tokens only
    probs: list[np.ndarray]  # model distribution each generated token was drawn from
    caches: list[ActivationCache] | None
    ood: bool  # generation was cut off by the context window
    stopped: bool = False  # a stop predicate ended generation early
    factors: dict = field(default_factory=dict)  # HeadId -> per-step factor list


def position_factors(fn: Callable[[int], float], prompt_len: int, seq_len: int) -> np.ndarray:
    """Per-position factors for a sequence whose first ``prompt_len`` tokens are the prompt.

    The output at position ``q`` produces generated token ``q - prompt_len + 2``
    (1-based); earlier positions only feed prompt predictions and keep factor 1.
    """
    f = np.ones(seq_len)
    for q in range(max(prompt_len - 1, 0), seq_len):
        f[q] = fn(q - prompt_len + 2)
    return f


def generate(
    weights: ModelWeights,
    prompt: Sequence[int],
    steps: int,
    decode: str | float = "greedy",
    hooks: HookSet | None = None,
    *,
    step_scale: Mapping[HeadId, Callable[[int], float]] | None = None,
    rng: RngStream | None = None,
    keep_caches: bool = False,
    stop: Callable[[list[int]], bool] | None = None,
) -> Generation:
    """Autoregressive decoding.

    ``decode`` is ``"greedy"`` or a sampling temperature.  ``step_scale`` maps
    heads to a function of the 1-based generated-token index; it is applied
    with KV-cache semantics (see ``position_factors``).  ``stop`` sees the
    generated tokens so far after each step.
    """
    cfg = weights.cfg
    prompt = [int(t) for t in _check_tokens(cfg, prompt)]
    if steps < 1:
        raise ModelError("steps must be >= 1")
    if decode != "greedy":
        temperature = float(decode)
        if not temperature > 0:
            raise ModelError("sampling temperature must be positive")
        if rng is None:
            raise ModelError("sampled decoding needs an RngStream")
    room = cfg.max_seq - len(prompt)
    ood = steps > room
    n_steps = min(steps, room)
    base = hooks or HookSet()
    step_scale = dict(step_scale or {})
    seq = list(prompt)
    out: list[int] = []
    probs: list[np.ndarray] = []
    caches: list[ActivationCache] | None = [] if keep_caches else None
    factors: dict = {h: [] for h in step_scale}
    stopped = False
    for t in range(1, n_steps + 1):
        scale = dict(base.scale)
        for hid, fn in step_scale.items():
            scale[hid] = position_factors(fn, len(prompt), len(seq))
            factors[hid].append(float(fn(t)))
        step_hooks = HookSet(base.capture, base.patch, scale, base.patch_final_only) if step_scale else base
        logits, cache = forward(weights, seq, step_hooks)
        p = softmax(logits[-1])
        probs.append(p)
        if caches is not None:
            caches.append(cache)
        if decode == "greedy":
            nxt = int(np.argmax(logits[-1]))
        else:
            nxt = rng.categorical(softmax(logits[-1] / temperature))
        seq.append(nxt)
        out.append(nxt)
        if stop is not None and stop(out):
            stopped = True
            break
    if stopped:
        ood = False
    return Generation(out, probs, caches, ood, stopped, factors)


# --- batched training path ----------------------------------------------------


def batch_forward(weights: ModelWeights, batch: np.ndarray) -> tuple[np.ndarray, dict]:
    """Vectorised forward over ``[B, T]`` tokens with no hooks; keeps what backprop needs."""
    cfg = weights.cfg
    B, T = batch.shape
    inv_sqrt = 1.0 / math.sqrt(cfg.d_head)
    mask = _causal_mask(T)
    x = weights.token_embed[batch] + weights.pos_embed[:T][None]
    saved = {"x": [], "q": [], "k": [], "v": [], "a": [], "z": []}
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model

    def project(x, W):
        # one gemm over all heads: [B*T, d] @ [d, H*dh] -> [B, H, T, dh]
        flat = x.reshape(B * T, d) @ W.transpose(1, 0, 2).reshape(d, H * dh)
        return flat.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    for layer in range(cfg.n_layers):
        q = project(x, weights.W_Q[layer])
        k = project(x, weights.W_K[layer])
        v = project(x, weights.W_V[layer])
        s = (q @ k.transpose(0, 1, 3, 2)) * inv_sqrt
        s[:, :, mask] = -np.inf
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        z = a @ v
        for key, val in zip(("x", "q", "k", "v", "a", "z"), (x, q, k, v, a, z)):
            saved[key].append(val)
        x = x + z.transpose(0, 2, 1, 3).reshape(B * T, H * dh).__matmul__(weights.W_O[layer].reshape(H * dh, d)).reshape(B, T, d)
    saved["x_final"] = x
    logits = x @ weights.unembed
    return logits, saved


def iter_heads(cfg: ModelConfig) -> Iterable[HeadId]:
    return iter(cfg.heads())
