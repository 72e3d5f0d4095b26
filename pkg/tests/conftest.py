"""Shared fixtures and float64 straight-line oracles."""
import math

import numpy as np
import pytest

from src.engine.attention import AttentionWeights, init_attention_weights
from src.engine.encoder3d import ViTConfig
from src.engine.settings import reset_settings
from src.engine.tensor_core import Rng, Tensor


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Each test sees settings built from its own environment."""
    monkeypatch.delenv("SPARSEFLASH_WORKERS", raising=False)
    monkeypatch.delenv("SPARSEFLASH_LOG_LEVEL", raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng():
    return Rng(1234)


def tiny_configs(student_layers=6):
    """Teacher/student pair with 8 tokens of width 16, small enough for quick training loops."""
    teacher = ViTConfig(input_extent=8, patch_size=4, embed_dim=16, num_layers=2 * student_layers, num_heads=2)
    student = teacher.with_overrides(
        num_layers=student_layers,
        ffn_only_prefix=min(2, student_layers),
        attention_variant="sparse_flash",
        segment_size=4,
        dilation_interval=2,
        tile_rows=2,
        tile_cols=2,
    )
    return teacher, student


def attention_inputs(seed, n, d, std=None):
    rng = Rng(seed)
    x = Tensor(rng.normal((n, d)))
    wts = init_attention_weights(d, rng, std=std if std is not None else 1.0 / math.sqrt(d))
    return x, wts


# --- Oracles ---
def matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            total = 0.0
            for p in range(k):
                total += float(a[i, p]) * float(b[p, j])
            out[i, j] = total
    return out


def layernorm_oracle(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def _bias(t, d):
    return np.zeros(d) if t is None else t.data.astype(np.float64)


def mhsa_oracle(x, wts: AttentionWeights, num_heads):
    """Dense multi-head attention, one head and one row at a time, in float64."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    dh = d // num_heads
    q = x @ wts.wq.data.astype(np.float64) + _bias(wts.bq, d)
    k = x @ wts.wk.data.astype(np.float64) + _bias(wts.bk, d)
    v = x @ wts.wv.data.astype(np.float64) + _bias(wts.bv, d)
    out = np.zeros((n, d))
    for head in range(num_heads):
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, cols] @ k[j, cols] for j in range(n)]) / math.sqrt(dh)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, cols] = sum(weights[j] * v[j, cols] for j in range(n))
    return out @ wts.wo.data.astype(np.float64) + _bias(wts.bo, d)


def adam_oracle(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam trajectory, one float64 step per gradient."""
    m = v = 0.0
    trajectory = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        param = param - lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(param)
    return trajectory
