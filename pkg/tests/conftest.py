import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from repcurse.numerics import derive_stream
from repcurse.transformer import ModelConfig, ModelWeights
from repcurse.zoo import load_checkpoint, load_train_config, save_checkpoint, train_toy_model, wire_induction_model, wired_config

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).resolve().parent / "data"
TRAIN_CONFIG = ROOT / "configs" / "toy_train.json"


def random_weights(cfg: ModelConfig, seed: int, std: float = 0.5) -> ModelWeights:
    rng = derive_stream(seed, "test-weights")
    z = ModelWeights.zeros(cfg)
    return z.replace(**{name: rng.normal_array(arr.shape, std) for name, arr in z.params().items()})


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_head=4, vocab_size=11, max_seq=12)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return random_weights(small_cfg, 7)


@pytest.fixture(scope="session")
def wired():
    return wire_induction_model(wired_config())


def _training_key() -> str:
    h = hashlib.sha256(TRAIN_CONFIG.read_bytes())
    src = ROOT / "src" / "repcurse"
    for p in sorted(src.rglob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request):
    """The toy model trained from the pinned config.

    The checkpoint is cached under the pytest cache, keyed by the config and
    package sources; set REPCURSE_RETRAIN=1 to force a fresh run.
    """
    path, meta = _trained_paths(request)
    if path.exists() and meta.exists() and not os.environ.get("REPCURSE_RETRAIN"):
        weights, _ = load_checkpoint(path)
        return weights
    cfg, spec = load_train_config(TRAIN_CONFIG)
    t0 = time.process_time()
    weights, trace = train_toy_model(cfg, spec)
    seconds = time.process_time() - t0
    save_checkpoint(weights, path, {"kind": "trained", "seed": spec.seed, "train_steps": spec.steps})
    meta.write_text(json.dumps({"cpu_seconds": seconds, "loss": trace}))
    return weights


def _trained_paths(request):
    cache_dir = Path(request.config.cache.mkdir("trained-model"))
    key = _training_key()
    return cache_dir / f"toy-{key}.json", cache_dir / f"toy-{key}.meta.json"


@pytest.fixture(scope="session")
def training_seconds(request, trained):
    """CPU seconds the pinned training run took (recorded when it ran)."""
    return json.loads(_trained_paths(request)[1].read_text())["cpu_seconds"]


@pytest.fixture(scope="session")
def trained_heads(trained):
    from repcurse.copy_task import make_copy_instances
    from repcurse.patching import identify_induction_heads, run_patch_protocol

    inst = make_copy_instances(100, trained.cfg.vocab_size, derive_stream(0, "copy-instances"), L=16)
    imap = run_patch_protocol(trained, inst, seed=0)
    return imap, identify_induction_heads(imap, 2.0)


def brute_force_forward(weights: ModelWeights, tokens):
    """Loop-based reference forward pass, independent of the vectorised one."""
    cfg = weights.cfg
    T = len(tokens)
    x = np.array([weights.token_embed[t] + weights.pos_embed[i] for i, t in enumerate(tokens)])
    for l in range(cfg.n_layers):
        out = x.copy()
        for h in range(cfg.n_heads):
            q = x @ weights.W_Q[l, h]
            k = x @ weights.W_K[l, h]
            v = x @ weights.W_V[l, h]
            for i in range(T):
                s = np.array([q[i] @ k[j] / np.sqrt(cfg.d_head) for j in range(i + 1)])
                a = np.exp(s - s.max())
                a /= a.sum()
                z = sum(a[j] * v[j] for j in range(i + 1))
                out[i] += z @ weights.W_O[l, h]
        x = out
    return x @ weights.unembed


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
