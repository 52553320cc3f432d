"""Exact gradients and an Adam training loop for the attention-only model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..numerics import RngStream, derive_stream
from ..transformer import PARAM_NAMES, ModelConfig, ModelError, ModelWeights, batch_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    seq_len: int = 128
    batch_size: int = 16
    steps: int = 4000
    lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    init_std: float = 0.02
    seg_len_min: int = 2
    seg_len_max: int = 8
    repeats_min: int = 2
    repeats_max: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("batch_size >= 1 and seq_len >= 2 required")
        if not (1 <= self.seg_len_min <= self.seg_len_max and 1 <= self.repeats_min <= self.repeats_max):
            raise ValueError("segment length / repeat ranges are inverted")
        if self.seg_len_max * self.repeats_max > self.seq_len:
            raise ValueError("repeated segments do not fit in seq_len")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainSpec fields: {sorted(unknown)}")
        return cls(**d)


def load_train_config(path: str | Path) -> tuple[ModelConfig, TrainSpec]:
    """Read a ``{"model": {...}, "train": {...}}`` JSON file."""
    raw = json.loads(Path(path).read_text())
    return ModelConfig(**raw["model"]), TrainSpec.from_dict(raw["train"])


# --- corpus -----------------------------------------------------------------


def repeat_sequence(rng: RngStream, vocab_size: int, length: int, spec: TrainSpec) -> np.ndarray:
    """Uniform random tokens with one random segment repeated at random offsets."""
    seq = np.floor(rng.random_array(length) * vocab_size).astype(np.int64)
    m = spec.seg_len_min + rng.randbelow(spec.seg_len_max - spec.seg_len_min + 1)
    r = spec.repeats_min + rng.randbelow(spec.repeats_max - spec.repeats_min + 1)
    segment = seq[:m].copy()
    # split the free length into r + 1 gaps by sorted cut points
    free = length - m * r
    cuts = sorted(rng.randbelow(free + 1) for _ in range(r))
    pos = 0
    prev_cut = 0
    for cut in cuts:
        pos += cut - prev_cut
        seq[pos : pos + m] = segment
        pos += m
        prev_cut = cut
    return seq


def make_batch(rng: RngStream, vocab_size: int, spec: TrainSpec, batch_size: int | None = None) -> np.ndarray:
    n = batch_size or spec.batch_size
    return np.stack([repeat_sequence(rng, vocab_size, spec.seq_len, spec) for _ in range(n)])


def corpus(seed: int, label: str, n_sequences: int, vocab_size: int, spec: TrainSpec) -> np.ndarray:
    return make_batch(derive_stream(seed, label), vocab_size, spec, n_sequences)


# --- loss and gradients ---------------------------------------------------------


def loss_and_grad(weights: ModelWeights, batch) -> tuple[float, ModelWeights]:
    """Mean next-token cross-entropy over all positions, and its exact gradient."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ModelError("batch must be a non-empty [B, T] array")
    cfg = weights.cfg
    B, T = batch.shape
    if T < 2 or T > cfg.max_seq:
        raise ModelError(f"sequence length {T} outside [2, {cfg.max_seq}]")
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise ModelError("token id out of vocabulary")

    logits, saved = batch_forward(weights, batch)
    pred = logits[:, :-1]
    targets = batch[:, 1:]
    n = B * (T - 1)
    shifted = pred - pred.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    loss = -float(np.take_along_axis(logp, targets[..., None], axis=-1).sum()) / n

    dlogits = np.zeros_like(logits)
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits[:, :-1] = d / n

    grads = {name: np.zeros_like(p) for name, p in weights.params().items()}
    x_final = saved["x_final"]
    grads["unembed"] = np.einsum("btd,btv->dv", x_final, dlogits, optimize=True)
    dx = dlogits @ weights.unembed.T
    inv_sqrt = 1.0 / math.sqrt(cfg.d_head)
    for layer in reversed(range(cfg.n_layers)):
        x, q, k, v, a, z = (saved[key][layer] for key in ("x", "q", "k", "v", "a", "z"))
        grads["W_O"][layer] = np.einsum("bhte,btd->hed", z, dx, optimize=True)
        dz = np.einsum("btd,hed->bhte", dx, weights.W_O[layer], optimize=True)
        da = dz @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dz
        ds = a * (da - (a * da).sum(axis=-1, keepdims=True)) * inv_sqrt
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        grads["W_Q"][layer] = np.einsum("btd,bhte->hde", x, dq, optimize=True)
        grads["W_K"][layer] = np.einsum("btd,bhte->hde", x, dk, optimize=True)
        grads["W_V"][layer] = np.einsum("btd,bhte->hde", x, dv, optimize=True)
        dx = (
            dx
            + np.einsum("bhte,hde->btd", dq, weights.W_Q[layer], optimize=True)
            + np.einsum("bhte,hde->btd", dk, weights.W_K[layer], optimize=True)
            + np.einsum("bhte,hde->btd", dv, weights.W_V[layer], optimize=True)
        )
    np.add.at(grads["token_embed"], batch, dx)
    grads["pos_embed"][:T] = dx.sum(axis=0)
    return loss, ModelWeights(cfg, **grads)


def mean_loss(weights: ModelWeights, batch) -> float:
    batch = np.asarray(batch, dtype=np.int64)
    logits, _ = batch_forward(weights, batch)
    pred = logits[:, :-1]
    shifted = pred - pred.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -float(np.take_along_axis(logp, batch[:, 1:, None], axis=-1).mean())


# --- training -----------------------------------------------------------------


def init_weights(cfg: ModelConfig, std: float, rng: RngStream) -> ModelWeights:
    w = ModelWeights.zeros(cfg)
    return ModelWeights(cfg, **{name: rng.normal_array(p.shape, std) for name, p in w.params().items()})


def lr_at(spec: TrainSpec, step: int) -> float:
    """Linear warmup to ``spec.lr`` then constant; ``step`` is 1-based."""
    if spec.warmup_steps > 0 and step <= spec.warmup_steps:
        return spec.lr * step / spec.warmup_steps
    return spec.lr


def train_toy_model(
    cfg: ModelConfig,
    spec: TrainSpec,
    init: ModelWeights | None = None,
    log_every: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Adam on the repeated-segment corpus. Returns final weights and per-step loss."""
    if spec.seq_len > cfg.max_seq:
        raise ValueError(f"seq_len {spec.seq_len} exceeds max_seq {cfg.max_seq}")
    weights = init if init is not None else init_weights(cfg, spec.init_std, derive_stream(spec.seed, "init"))
    if spec.steps == 0:
        return weights, []
    data_rng = derive_stream(spec.seed, "train-data")
    params = {k: v.copy() for k, v in weights.params().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    trace: list[float] = []
    for step in range(1, spec.steps + 1):
        batch = make_batch(data_rng, cfg.vocab_size, spec)
        loss, grads = loss_and_grad(ModelWeights(cfg, **params), batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (lr={lr_at(spec, step)})")
        trace.append(loss)
        lr = lr_at(spec, step)
        c1 = 1.0 - spec.beta1**step
        c2 = 1.0 - spec.beta2**step
        for name, g in grads.params().items():
            m[name] = spec.beta1 * m[name] + (1.0 - spec.beta1) * g
            s[name] = spec.beta2 * s[name] + (1.0 - spec.beta2) * g * g
            params[name] = params[name] - lr * (m[name] / c1) / (np.sqrt(s[name] / c2) + spec.eps)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    return ModelWeights(cfg, **params), trace


__all__ = [
    "TrainSpec",
    "TrainingDiverged",
    "corpus",
    "init_weights",
    "load_train_config",
    "loss_and_grad",
    "make_batch",
    "mean_loss",
    "repeat_sequence",
    "train_toy_model",
    "PARAM_NAMES",
]
