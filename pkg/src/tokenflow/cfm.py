"""Optimal-transport conditional flow matching: straight path and regression
target, cosine timestep schedule, joint condition dropout for classifier-free
guidance, masked-feature conditioning, and an explicit-Euler ODE sampler with
a guided vector field.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .numerics import (Rng, ParamStore, adam_step, dense_backward, dense_forward,
                       mix_seed, time_embedding, warmup_lr)


def ot_path(x0, x1, t, sigma):
    """Straight conditional path: (1 - (1 - sigma) t) x0 + t x1."""
    return (1.0 - (1.0 - sigma) * t) * x0 + t * x1


def ot_target(x0, x1, sigma):
    """Regression target x1 - (1 - sigma) x0; independent of t."""
    return x1 - (1.0 - sigma) * x0


def cosine_schedule(t):
    """Warp t in [0, 1] to 1 - cos(t pi / 2); denser steps near t = 0."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("timestep outside [0, 1]")
    out = 1.0 - np.cos(0.5 * t * math.pi)
    return float(out) if out.ndim == 0 else out


def mask_features(x1, rng: Rng):
    """Zero a suffix of frames from a random start in [ceil(0.1 L), L].

    start == L leaves x1 intact (fully observed prompt case); at least
    ceil(0.1 L) leading frames stay visible. Returns (masked, start).
    """
    L = x1.shape[0]
    lo = math.ceil(0.1 * L)
    start = lo + int(rng.integers(0, L - lo + 1))
    out = x1.copy()
    out[start:] = 0.0
    return out, start


def cfg_field(nu_cond, nu_uncond, beta):
    """Classifier-free guided field (1 + beta) nu_cond - beta nu_uncond."""
    return (1.0 + beta) * nu_cond - beta * nu_uncond


@dataclass
class ConditionSet:
    """Conditioning bundle: speaker vector, frame-rate tokens, masked features.

    present=False marks the jointly-dropped (unconditional) branch; the model
    then substitutes its learned null values for all three components."""

    v: np.ndarray
    tokens: np.ndarray
    masked_features: np.ndarray
    present: bool = True

    def __post_init__(self):
        if self.tokens.shape[0] != self.masked_features.shape[0]:
            raise ValueError("token length must match the frame count")

    @property
    def length(self):
        return self.tokens.shape[0]


def null_like(cond: ConditionSet) -> ConditionSet:
    return replace(cond, present=False)


def drop_conditions(cond: ConditionSet, p, rng: Rng) -> ConditionSet:
    """With probability p replace the whole condition set by the null branch."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability outside [0, 1]")
    return null_like(cond) if rng.uniform() < p else cond


_window_cache = {}


def _window_matrix(L):
    """Averaging matrix for a +-2 frame window, truncated at the edges."""
    if L not in _window_cache:
        A = np.zeros((L, L))
        for i in range(L):
            lo, hi = max(0, i - 2), min(L, i + 3)
            A[i, lo:hi] = 1.0 / (hi - lo)
        _window_cache[L] = A
    return _window_cache[L]


@dataclass
class FlowConfig:
    dim: int = 8
    spk_dim: int = 16
    tok_dim: int = 16
    time_dim: int = 16
    width: int = 64
    n_codes: int = 64
    sigma: float = 1e-4
    beta: float = 0.7       # guidance strength
    p_drop: float = 0.2
    loss: str = "l1"        # unsquared norm by default; "l2" behind the switch
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 4
    warmup_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError("sigma must be in [0, 1)")
        if self.beta < 0:
            raise ValueError("guidance strength must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")


class FlowModel:
    """Per-frame vector-field network with local temporal context."""

    def __init__(self, cfg: FlowConfig, rng: Rng):
        self.cfg = cfg
        self.trained = False
        in_dim = 2 * cfg.dim + cfg.tok_dim + cfg.spk_dim + cfg.time_dim
        s = ParamStore()
        init = lambda fan_in, *shape: rng.normal(*shape) / np.sqrt(fan_in)
        s.add("tok_emb", 0.5 * rng.normal(cfg.n_codes, cfg.tok_dim))
        s.add("null_v", 0.5 * rng.normal(cfg.spk_dim))
        s.add("null_tok", 0.5 * rng.normal(cfg.tok_dim))
        s.add("null_feat", 0.5 * rng.normal(cfg.dim))
        s.add("l1.W", init(in_dim, cfg.width, in_dim))
        s.add("l1.b", np.zeros(cfg.width))
        s.add("l2.W", init(2 * cfg.width, cfg.width, 2 * cfg.width))
        s.add("l2.b", np.zeros(cfg.width))
        s.add("l3.W", init(cfg.width, cfg.width, cfg.width))
        s.add("l3.b", np.zeros(cfg.width))
        s.add("out.W", 0.02 * rng.normal(cfg.dim, cfg.width))
        s.add("out.b", np.zeros(cfg.dim))
        self.store = s

    def field(self, x_t, t, cond: ConditionSet, with_cache=False):
        """Vector field at (x_t, t) under the (possibly null) condition set."""
        p = self.store.params
        cfg = self.cfg
        L = x_t.shape[0]
        if cond.present:
            tok_rows = p["tok_emb"][cond.tokens]
            feat_rows = cond.masked_features
            v = cond.v
        else:
            tok_rows = np.tile(p["null_tok"], (L, 1))
            feat_rows = np.tile(p["null_feat"], (L, 1))
            v = p["null_v"]
        temb = time_embedding(float(t), cfg.time_dim)
        inp = np.hstack([x_t, tok_rows, feat_rows,
                         np.tile(v, (L, 1)), np.tile(temb, (L, 1))])
        h1, c1 = dense_forward(p["l1.W"], p["l1.b"], inp, "gelu")
        A = _window_matrix(L)
        h1c = np.hstack([h1, A @ h1])
        h2, c2 = dense_forward(p["l2.W"], p["l2.b"], h1c, "gelu")
        h3, c3 = dense_forward(p["l3.W"], p["l3.b"], h2, "gelu")
        out, c4 = dense_forward(p["out.W"], p["out.b"], h3, "none")
        if not with_cache:
            return out
        return out, (c1, c2, c3, c4, A, cond)

    def field_backward(self, cache, gout, grads):
        c1, c2, c3, c4, A, cond = cache
        cfg = self.cfg
        gW, gb, gh3 = dense_backward(c4, gout)
        grads["out.W"] += gW
        grads["out.b"] += gb
        gW, gb, gh2 = dense_backward(c3, gh3)
        grads["l3.W"] += gW
        grads["l3.b"] += gb
        gW, gb, gh1c = dense_backward(c2, gh2)
        grads["l2.W"] += gW
        grads["l2.b"] += gb
        gh1 = gh1c[:, :cfg.width] + A.T @ gh1c[:, cfg.width:]
        gW, gb, ginp = dense_backward(c1, gh1)
        grads["l1.W"] += gW
        grads["l1.b"] += gb
        o = cfg.dim
        g_tok = ginp[:, o:o + cfg.tok_dim]
        g_feat = ginp[:, o + cfg.tok_dim:o + cfg.tok_dim + cfg.dim]
        g_v = ginp[:, o + cfg.tok_dim + cfg.dim:
                   o + cfg.tok_dim + cfg.dim + cfg.spk_dim]
        if cond.present:
            np.add.at(grads["tok_emb"], cond.tokens, g_tok)
        else:
            grads["null_tok"] += g_tok.sum(axis=0)
            grads["null_feat"] += g_feat.sum(axis=0)
            grads["null_v"] += g_v.sum(axis=0)

    def cfm_loss(self, x1, cond: ConditionSet, rng: Rng):
        """Flow-matching regression loss for one utterance; returns (loss, grads).

        Draws x0 from the standard normal prior, a cosine-scheduled timestep,
        and applies joint condition dropout before evaluating the field."""
        cfg = self.cfg
        x0 = rng.normal(*x1.shape)
        t = cosine_schedule(rng.uniform())
        cond_t = drop_conditions(cond, cfg.p_drop, rng)
        xt = ot_path(x0, x1, t, cfg.sigma)
        target = ot_target(x0, x1, cfg.sigma)
        pred, cache = self.field(xt, t, cond_t, with_cache=True)
        diff = pred - target
        if cfg.loss == "l1":
            loss = np.abs(diff).mean()
            gpred = np.sign(diff) / diff.size
        else:
            loss = (diff ** 2).mean()
            gpred = 2.0 * diff / diff.size
        grads = self.store.zero_grads()
        self.field_backward(cache, gpred, grads)
        return loss, grads

    def solve(self, cond: ConditionSet, n_steps, beta, rng: Rng) -> np.ndarray:
        """Integrate the guided field from noise with explicit Euler steps.

        Step times follow the cosine schedule, so early steps are denser."""
        if n_steps < 1:
            raise ValueError("need at least one ODE step")
        cfg = self.cfg
        x = rng.normal(cond.length, cfg.dim)
        grid = cosine_schedule(np.arange(n_steps + 1) / n_steps)
        uncond = null_like(cond)
        for k in range(n_steps):
            nu = self.field(x, grid[k], cond)
            if beta != 0.0:
                nu = cfg_field(nu, self.field(x, grid[k], uncond), beta)
            x = x + (grid[k + 1] - grid[k]) * nu
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"ODE state diverged at step {k}")
        return x

    # -- persistence -----------------------------------------------------

    def save(self, path):
        blobs = dict(self.store.params)
        cfg = self.cfg
        blobs["meta/trained"] = np.array([1.0 if self.trained else 0.0])
        blobs["meta/cfg"] = np.array([cfg.dim, cfg.spk_dim, cfg.tok_dim,
                                      cfg.time_dim, cfg.width, cfg.n_codes,
                                      cfg.sigma, cfg.beta, cfg.p_drop,
                                      0.0 if cfg.loss == "l1" else 1.0])
        checkpoint.save_blobs(path, blobs)

    @staticmethod
    def load(path) -> "FlowModel":
        blobs = checkpoint.load_blobs(path)
        c = blobs["meta/cfg"]
        cfg = FlowConfig(dim=int(c[0]), spk_dim=int(c[1]), tok_dim=int(c[2]),
                         time_dim=int(c[3]), width=int(c[4]), n_codes=int(c[5]),
                         sigma=float(c[6]), beta=float(c[7]), p_drop=float(c[8]),
                         loss="l1" if c[9] < 0.5 else "l2")
        model = FlowModel(cfg, Rng(0))
        for name in model.store.names():
            model.store.params[name][:] = blobs[name]
        model.trained = checkpoint.scalar(blobs, "meta/trained") > 0.5
        return model


def solve(model: FlowModel, cond: ConditionSet, n_steps, beta, rng: Rng):
    return model.solve(cond, n_steps, beta, rng)


def train_flow(train_rows, tokenizer, cfg: FlowConfig, on_step=None):
    """Train the vector field on LoadedUtt rows using a trained tokenizer."""
    from .synthdata import speaker_embed

    rng = Rng(mix_seed(cfg.seed, 0xCF3))
    model = FlowModel(cfg, rng.child(1))
    prepped = []
    for row in train_rows:
        prepped.append((row.features,
                        speaker_embed(row.features),
                        tokenizer.tokenize(row.features)))
    n = len(prepped)
    batch_rng = rng.child(2)

    losses = []
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            batch = list(range(n))
        else:
            batch = [int(i) for i in batch_rng.integers(0, n, cfg.batch_size)]
        grads = model.store.zero_grads()
        total = 0.0
        for j, i in enumerate(batch):
            x1, v, tokens = prepped[i]
            rng_u = rng.child(4, step, j)
            masked, _ = mask_features(x1, rng_u)
            cond = ConditionSet(v, tokens, masked)
            loss, g = model.cfm_loss(x1, cond, rng_u)
            total += loss
            for k in grads:
                grads[k] += g[k]
        scale = 1.0 / len(batch)
        for k in grads:
            grads[k] *= scale
        step_loss = total * scale
        if not np.isfinite(step_loss):
            raise FloatingPointError(f"flow training diverged at step {step}")
        adam_step(model.store, grads, warmup_lr(cfg.lr, step, cfg.warmup_steps))
        losses.append(step_loss)
        if on_step is not None:
            on_step(step, step_loss)
    model.trained = True
    return model, losses
