"""Dense-network substrate: deterministic RNG, a handful of layers with
hand-written backward passes, masked softmax cross-entropy, a bias-corrected
adaptive-moment optimizer, and a finite-difference gradient checker.

Everything is float64 and single-threaded; forward functions return a cache
consumed by the matching backward function.
"""

import math

import numpy as np
from scipy.special import erf

_M64 = (1 << 64) - 1
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Deterministically mix integers into a 64-bit seed (splitmix64 chain)."""
    h = 0x243F6A8885A308D3
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _M64))
    return h


class Rng:
    """Seeded random stream. Identical seed gives a bit-exact identical stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *parts: int) -> "Rng":
        """Independent stream derived deterministically from this seed and parts."""
        return Rng(mix_seed(self.seed, *parts))

    def normal(self, *shape) -> np.ndarray:
        return self._gen.standard_normal(shape if shape else None)

    def uniform(self, *shape):
        return self._gen.random(shape if shape else None)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_p(self, p: np.ndarray) -> int:
        """Draw one index from the probability vector p."""
        return int(self._gen.choice(len(p), p=p))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# fixed encodings

def sinusoid_posenc(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal positional encoding, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    ang = pos * freq[None, :]
    pe = np.zeros((length, 2 * half))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe[:, :dim]


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep t in [0, 1]."""
    half = dim // 2
    freq = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = t * freq
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ---------------------------------------------------------------------------
# activations

def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z):
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


_ACTS = {
    "none": (lambda z: z, lambda z: np.ones_like(z)),
    "gelu": (_gelu, _gelu_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


# ---------------------------------------------------------------------------
# layers

def dense_forward(W, b, x, act="none"):
    """y = act(x W^T + b) for x (P, n_in), W (n_out, n_in), b (n_out,).

    Returns (y, cache); pass the cache to dense_backward.
    """
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"dense dimension mismatch: x {x.shape} vs W {W.shape}")
    if b.shape != (W.shape[0],):
        raise ValueError(f"dense bias shape {b.shape} does not match W {W.shape}")
    if act not in _ACTS:
        raise ValueError(f"unknown activation {act!r}")
    z = x @ W.T + b
    y = _ACTS[act][0](z)
    return y, (x, W, z, act)


def dense_backward(cache, gy):
    """Gradients (gW, gb, gx) for dense_forward's output gradient gy."""
    x, W, z, act = cache
    gz = gy * _ACTS[act][1](z)
    return gz.T @ x, gz.sum(axis=0), gz @ W


def rmsnorm_forward(x):
    """Row-wise RMS normalization: each row scaled to unit RMS."""
    ms = (x * x).mean(axis=1) + 1e-8
    scale = ms ** -0.5
    return x * scale[:, None], (x, scale)


def rmsnorm_backward(cache, gy):
    x, scale = cache
    n = x.shape[1]
    x_dot = (x * gy).sum(axis=1)
    return scale[:, None] * (gy - (scale * scale / n)[:, None] * x * x_dot[:, None])


def causal_attention_forward(q, k, v, n_heads):
    """Multi-head causal self-attention over positions; q, k, v are (T, dm)."""
    T, dm = q.shape
    hd = dm // n_heads
    qh = q.reshape(T, n_heads, hd)
    kh = k.reshape(T, n_heads, hd)
    vh = v.reshape(T, n_heads, hd)
    scores = np.einsum("ihd,jhd->ihj", qh, kh) / math.sqrt(hd)
    mask = np.triu(np.full((T, T), -np.inf), k=1)
    scores = scores + mask[:, None, :]
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w = w / w.sum(axis=2, keepdims=True)
    out = np.einsum("ihj,jhd->ihd", w, vh)
    return out.reshape(T, dm), (qh, kh, vh, w, n_heads)


def causal_attention_backward(cache, gout):
    qh, kh, vh, w, n_heads = cache
    T = qh.shape[0]
    hd = qh.shape[2]
    go = gout.reshape(T, n_heads, hd)
    gw = np.einsum("ihd,jhd->ihj", go, vh)
    gs = w * (gw - (w * gw).sum(axis=2, keepdims=True))
    scale = 1.0 / math.sqrt(hd)
    gq = scale * np.einsum("ihj,jhd->ihd", gs, kh)
    gk = scale * np.einsum("ihj,ihd->jhd", gs, qh)
    gv = np.einsum("ihj,ihd->jhd", w, go)
    return gq.reshape(T, -1), gk.reshape(T, -1), gv.reshape(T, -1)


# ---------------------------------------------------------------------------
# losses

def softmax_rows(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, targets, mask=None):
    """Mean cross-entropy over masked-in positions.

    logits (P, V), targets (P,) int, mask (P,) bool or None for all-in.
    Returns (loss, grad wrt logits); masked-out rows get zero gradient.
    """
    P, V = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (P,):
        raise ValueError(f"targets shape {targets.shape} does not match {P} positions")
    if np.any(targets < 0) or np.any(targets >= V):
        raise ValueError("target index outside vocabulary")
    if mask is None:
        mask = np.ones(P, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (P,):
            raise ValueError("mask length does not match positions")
    n_in = int(mask.sum())
    if n_in == 0:
        raise ValueError("all positions masked out")
    probs = softmax_rows(logits)
    rows = np.arange(P)
    logp = np.log(probs[rows, targets])
    loss = -logp[mask].mean()
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad[~mask] = 0.0
    grad /= n_in
    return loss, grad


# ---------------------------------------------------------------------------
# parameters and optimizer

class ParamStore:
    """Named parameter matrices with per-parameter Adam moment accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def names(self):
        return sorted(self.params)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, grads, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """One bias-corrected adaptive-moment update; mutates store in place."""
    for name in store.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    for name in store.names():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def warmup_lr(base_lr, step, warmup_steps):
    """Linear warmup from 0 over warmup_steps, then flat. step is 0-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def grad_check(loss_fn, store: ParamStore, rng: Rng, eps=1e-5, n_probes=30) -> float:
    """Compare analytic gradients against central differences.

    loss_fn() -> (loss, grads dict) must be deterministic, and is re-evaluated
    with single coordinates of store perturbed by +-eps. Probes n_probes random
    coordinates across all parameters; returns the max relative error.
    """
    _, grads = loss_fn()
    names = store.names()
    max_rel = 0.0
    for _ in range(n_probes):
        name = names[int(rng.integers(0, len(names)))]
        p = store.params[name]
        idx = int(rng.integers(0, p.size))
        orig = p.flat[idx]
        p.flat[idx] = orig + eps
        lo_plus, _ = loss_fn()
        p.flat[idx] = orig - eps
        lo_minus, _ = loss_fn()
        p.flat[idx] = orig
        numeric = (lo_plus - lo_minus) / (2.0 * eps)
        analytic = grads[name].flat[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel
