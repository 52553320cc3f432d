"""Hand-wired two-layer induction circuit.

Residual layout (``V`` = vocab_size, ``S`` = max_seq)::

    [0, V)        token identity (one-hot token embedding)
    [V, 2V)       previous-token identity, written by the layer-0 head
    [2V, 3V)      output subspace, written by the layer-1 head, read by unembed
    [3V, 3V + S)  one-hot absolute position

Layer 0, head 0 attends from t to t - 1 through the positional channels and
copies the attended token into the previous-token subspace.  Layer 1, head 0
queries with the current token against the previous-token subspace, so at the
second ``A`` of ``A B ... A`` it lands on ``B`` and writes ``B`` to the output
subspace.  Position 0 has no predecessor (its previous-token slot holds its own
token), so the induction head gets one extra key channel that pushes position 0
down by ``sharpness``.  Every other head has zero weights.
"""

from __future__ import annotations

import math

from ..transformer import HeadId, ModelConfig, ModelError, ModelWeights

PREV_TOKEN_HEAD = HeadId(0, 0)
INDUCTION_HEAD = HeadId(1, 0)


def required_width(vocab_size: int, max_seq: int) -> tuple[int, int]:
    """Minimum ``(d_model, d_head)`` the construction needs."""
    return 3 * vocab_size + max_seq, max(vocab_size + 1, max_seq)


def check_wireable(cfg: ModelConfig) -> None:
    need_model, need_head = required_width(cfg.vocab_size, cfg.max_seq)
    if cfg.n_layers < 2:
        raise ModelError("the induction circuit needs at least 2 layers")
    if cfg.d_model < need_model or cfg.d_head < need_head:
        raise ModelError(
            f"config too small to embed the circuit: need d_model >= {need_model} and "
            f"d_head >= {need_head}, got {cfg.d_model} and {cfg.d_head}"
        )


def wired_config(vocab_size: int = 32, max_seq: int = 32, n_heads: int = 4, n_layers: int = 2) -> ModelConfig:
    """Smallest config with ``n_heads`` heads per layer that fits the circuit."""
    need_model, need_head = required_width(vocab_size, max_seq)
    d_head = max(need_head, math.ceil(need_model / n_heads))
    return ModelConfig(n_layers, n_heads, n_heads * d_head, d_head, vocab_size, max_seq)


def wire_induction_model(cfg: ModelConfig, sharpness: float = 20.0, logit_gain: float = 10.0) -> ModelWeights:
    check_wireable(cfg)
    V, S = cfg.vocab_size, cfg.max_seq
    tok, prev, out, pos = 0, V, 2 * V, 3 * V
    # attention scores are divided by sqrt(d_head); pre-multiply so the raw
    # match score equals `sharpness`
    q_gain = sharpness * math.sqrt(cfg.d_head)

    w = ModelWeights.zeros(cfg)
    for t in range(V):
        w.token_embed[t, tok + t] = 1.0
        w.unembed[out + t, t] = 1.0
    for s in range(S):
        w.pos_embed[s, pos + s] = 1.0

    l0, h0 = PREV_TOKEN_HEAD
    for s in range(1, S):
        w.W_Q[l0, h0, pos + s, s - 1] = q_gain
    for s in range(S):
        w.W_K[l0, h0, pos + s, s] = 1.0
    for t in range(V):
        w.W_V[l0, h0, tok + t, t] = 1.0
        w.W_O[l0, h0, t, prev + t] = 1.0

    l1, h1 = INDUCTION_HEAD
    for t in range(V):
        w.W_Q[l1, h1, tok + t, t] = q_gain
        w.W_K[l1, h1, prev + t, t] = 1.0
        w.W_V[l1, h1, tok + t, t] = 1.0
        w.W_O[l1, h1, t, out + t] = logit_gain
        # token one-hots sum to 1, so this query channel is a constant
        w.W_Q[l1, h1, tok + t, V] = q_gain
    w.W_K[l1, h1, pos + 0, V] = -1.0
    return w
