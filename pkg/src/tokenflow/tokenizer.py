"""Recognition-supervised tokenizer: Encoder1 -> vector quantizer with EMA
codebook -> Encoder2 -> per-frame recognizer. Training minimizes recognition
cross-entropy plus a commitment term, with straight-through gradients across
the quantizer; tokenize() exports discrete indices for the rest of the
pipeline (token rate is 1:1 with frames).
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .numerics import (Rng, ParamStore, adam_step, dense_backward,
                       dense_forward, mix_seed, sinusoid_posenc, softmax_ce,
                       softmax_rows, warmup_lr)


@dataclass
class TokenizerConfig:
    dim: int = 8              # input feature dim
    hidden: int = 32          # encoder inner width
    code_dim: int = 16        # quantizer / code dimension
    n_codes: int = 64
    v_text: int = 32
    decay: float = 0.99       # EMA decay
    commitment: float = 0.25
    dead_threshold: int = 200
    use_vq: bool = True
    straight_through: bool = True
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    warmup_steps: int = 200
    seed: int = 0


class Codebook:
    """Code vectors with EMA state, per-code use counters and dead-code reseeding."""

    def __init__(self, codes: np.ndarray, decay: float, dead_threshold: int = 200):
        if codes.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codes")
        self.codes = np.array(codes, dtype=np.float64)
        self.decay = decay
        self.dead_threshold = dead_threshold
        self.use_counts = np.zeros(codes.shape[0], dtype=np.int64)
        self.unused_streak = np.zeros(codes.shape[0], dtype=np.int64)

    @property
    def n_codes(self):
        return self.codes.shape[0]

    def assign(self, H: np.ndarray) -> np.ndarray:
        """Nearest-code index per row of H; ties break to the lowest index."""
        d2 = ((H[:, None, :] - self.codes[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def quantize(h: np.ndarray, codebook: Codebook):
    """Nearest code for a single vector; returns (index, code vector)."""
    idx = int(codebook.assign(h[None, :])[0])
    return idx, codebook.codes[idx].copy()


def ema_update(codebook: Codebook, H: np.ndarray, assignments: np.ndarray,
               rng: Rng | None = None) -> None:
    """EMA-move each hit code toward the mean of its assigned rows.

    Unhit codes are untouched; codes unused for dead_threshold consecutive
    updates are re-seeded to a random row of H (requires rng).
    """
    assignments = np.asarray(assignments)
    hit = np.unique(assignments)
    a = codebook.decay
    for n in hit:
        mean = H[assignments == n].mean(axis=0)
        codebook.codes[n] = a * codebook.codes[n] + (1.0 - a) * mean
        codebook.use_counts[n] += int((assignments == n).sum())
    unhit = np.ones(codebook.n_codes, dtype=bool)
    unhit[hit] = False
    codebook.unused_streak[unhit] += 1
    codebook.unused_streak[hit] = 0
    if rng is not None:
        dead = np.flatnonzero(codebook.unused_streak >= codebook.dead_threshold)
        for n in dead:
            codebook.codes[n] = H[int(rng.integers(0, H.shape[0]))]
            codebook.unused_streak[n] = 0


class TokenizerModel:
    def __init__(self, cfg: TokenizerConfig, rng: Rng):
        self.cfg = cfg
        self.trained = False
        self.codebook: Codebook | None = None
        s = ParamStore()
        init = lambda fan_in, *shape: rng.normal(*shape) / np.sqrt(fan_in)
        s.add("enc1.W1", init(cfg.dim, cfg.hidden, cfg.dim))
        s.add("enc1.b1", np.zeros(cfg.hidden))
        s.add("enc1.W2", init(cfg.hidden, cfg.code_dim, cfg.hidden))
        s.add("enc1.b2", np.zeros(cfg.code_dim))
        s.add("enc2.W1", init(cfg.code_dim, cfg.hidden, cfg.code_dim))
        s.add("enc2.b1", np.zeros(cfg.hidden))
        s.add("enc2.W2", init(cfg.hidden, cfg.hidden, cfg.hidden))
        s.add("enc2.b2", np.zeros(cfg.hidden))
        s.add("rec.W", 0.02 * rng.normal(cfg.v_text, cfg.hidden))
        s.add("rec.b", np.zeros(cfg.v_text))
        self.store = s

    # -- forward pieces ------------------------------------------------

    def encode1(self, X: np.ndarray, with_cache=False):
        p = self.store.params
        x = X + sinusoid_posenc(X.shape[0], X.shape[1])
        a1, c1 = dense_forward(p["enc1.W1"], p["enc1.b1"], x, "gelu")
        H, c2 = dense_forward(p["enc1.W2"], p["enc1.b2"], a1, "gelu")
        return (H, (c1, c2)) if with_cache else H

    def encode2(self, Hbar: np.ndarray, with_cache=False):
        p = self.store.params
        x = Hbar + sinusoid_posenc(Hbar.shape[0], Hbar.shape[1])
        a1, c1 = dense_forward(p["enc2.W1"], p["enc2.b1"], x, "gelu")
        Ht, c2 = dense_forward(p["enc2.W2"], p["enc2.b2"], a1, "gelu")
        return (Ht, (c1, c2)) if with_cache else Ht

    def recognize(self, Htilde: np.ndarray) -> np.ndarray:
        """Per-frame posteriors over text tokens, shape (L, v_text)."""
        p = self.store.params
        logits, _ = dense_forward(p["rec.W"], p["rec.b"], Htilde, "none")
        return softmax_rows(logits)

    def tokenize(self, X: np.ndarray) -> np.ndarray:
        """Discrete token per frame; pure (no EMA update at inference)."""
        if not self.trained:
            raise RuntimeError("tokenizer model is not trained")
        return self.codebook.assign(self.encode1(X))

    def transcribe(self, X: np.ndarray) -> list:
        """Greedy text decode: argmax posteriors, then run-collapse."""
        from .synthdata import collapse_runs
        H = self.encode1(X)
        Hin = self.codebook.codes[self.codebook.assign(H)] if self.cfg.use_vq else H
        probs = self.recognize(self.encode2(Hin))
        return collapse_runs(probs.argmax(axis=1))

    def frame_posteriors(self, X: np.ndarray) -> np.ndarray:
        H = self.encode1(X)
        Hin = self.codebook.codes[self.codebook.assign(H)] if self.cfg.use_vq else H
        return self.recognize(self.encode2(Hin))

    # -- training ------------------------------------------------------

    def loss_and_grads(self, X, targets, frozen=None):
        """Recognition CE + commitment, with gradients for every parameter.

        frozen=(H0, Hbar0) replaces the hard quantizer with the fixed
        surrogate Hin = H - H0 + Hbar0, whose true gradient equals the
        straight-through gradient at H0; used by finite-difference checks.
        """
        p = self.store.params
        cfg = self.cfg
        H, (c1, c2) = self._enc1_cache(X)
        commit = 0.0
        idx = None
        if frozen is not None:
            H0, Hbar_const = frozen
            Hin = H - H0 + Hbar_const
        elif cfg.use_vq:
            idx = self.codebook.assign(H)
            Hbar_const = self.codebook.codes[idx]
            Hin = Hbar_const
        else:
            Hin = H
        if cfg.use_vq or frozen is not None:
            commit = cfg.commitment * ((H - Hbar_const) ** 2).mean()

        x2 = Hin + sinusoid_posenc(Hin.shape[0], Hin.shape[1])
        a3, c3 = dense_forward(p["enc2.W1"], p["enc2.b1"], x2, "gelu")
        Ht, c4 = dense_forward(p["enc2.W2"], p["enc2.b2"], a3, "gelu")
        logits, c5 = dense_forward(p["rec.W"], p["rec.b"], Ht, "none")
        ce, glogits = softmax_ce(logits, targets)
        loss = ce + commit

        grads = self.store.zero_grads()
        gW, gb, gHt = dense_backward(c5, glogits)
        grads["rec.W"] += gW
        grads["rec.b"] += gb
        gW, gb, gA3 = dense_backward(c4, gHt)
        grads["enc2.W2"] += gW
        grads["enc2.b2"] += gb
        gW, gb, gHin = dense_backward(c3, gA3)
        grads["enc2.W1"] += gW
        grads["enc2.b1"] += gb

        if frozen is not None or not cfg.use_vq or cfg.straight_through:
            gH = gHin.copy()
        else:
            gH = np.zeros_like(H)
        if cfg.use_vq or frozen is not None:
            gH += 2.0 * cfg.commitment * (H - Hbar_const) / H.size
        gW, gb, gA1 = dense_backward(c2, gH)
        grads["enc1.W2"] += gW
        grads["enc1.b2"] += gb
        gW, gb, _ = dense_backward(c1, gA1)
        grads["enc1.W1"] += gW
        grads["enc1.b1"] += gb
        return loss, ce, grads, idx, H

    def _enc1_cache(self, X):
        p = self.store.params
        x = X + sinusoid_posenc(X.shape[0], X.shape[1])
        a1, c1 = dense_forward(p["enc1.W1"], p["enc1.b1"], x, "gelu")
        H, c2 = dense_forward(p["enc1.W2"], p["enc1.b2"], a1, "gelu")
        return H, (c1, c2)

    def frozen_surrogate(self, X):
        """(H0, Hbar0) freezing the quantizer at the current parameter point."""
        H0 = self.encode1(X)
        idx = self.codebook.assign(H0)
        return H0, self.codebook.codes[idx].copy()

    # -- persistence ---------------------------------------------------

    def save(self, path):
        blobs = dict(self.store.params)
        blobs["meta/trained"] = np.array([1.0 if self.trained else 0.0])
        cfg = self.cfg
        blobs["meta/cfg"] = np.array([cfg.dim, cfg.hidden, cfg.code_dim, cfg.n_codes,
                                      cfg.v_text, cfg.decay, cfg.commitment,
                                      cfg.dead_threshold, 1.0 if cfg.use_vq else 0.0,
                                      1.0 if cfg.straight_through else 0.0])
        if self.codebook is not None:
            blobs["codebook/codes"] = self.codebook.codes
            blobs["codebook/use_counts"] = self.codebook.use_counts.astype(np.float64)
            blobs["codebook/unused_streak"] = self.codebook.unused_streak.astype(np.float64)
        checkpoint.save_blobs(path, blobs)

    @staticmethod
    def load(path) -> "TokenizerModel":
        blobs = checkpoint.load_blobs(path)
        c = blobs["meta/cfg"]
        cfg = TokenizerConfig(dim=int(c[0]), hidden=int(c[1]), code_dim=int(c[2]),
                              n_codes=int(c[3]), v_text=int(c[4]), decay=float(c[5]),
                              commitment=float(c[6]), dead_threshold=int(c[7]),
                              use_vq=bool(c[8]), straight_through=bool(c[9]))
        model = TokenizerModel(cfg, Rng(0))
        for name in model.store.names():
            model.store.params[name][:] = blobs[name]
        if "codebook/codes" in blobs:
            model.codebook = Codebook(blobs["codebook/codes"], cfg.decay, cfg.dead_threshold)
            model.codebook.use_counts = blobs["codebook/use_counts"].astype(np.int64)
            model.codebook.unused_streak = blobs["codebook/unused_streak"].astype(np.int64)
        model.trained = checkpoint.scalar(blobs, "meta/trained") > 0.5
        return model


def init_codebook(model: TokenizerModel, batch_feats, rng: Rng) -> None:
    """Seed codes from Encoder1 outputs on the first training batch."""
    H = np.vstack([model.encode1(X) for X in batch_feats])
    picks = rng.integers(0, H.shape[0], model.cfg.n_codes)
    model.codebook = Codebook(H[picks], model.cfg.decay, model.cfg.dead_threshold)


def train_tokenizer(train_rows, cfg: TokenizerConfig, on_step=None):
    """Train on LoadedUtt rows; returns (model, per-step losses).

    With batch_size >= len(train_rows) every step uses the full corpus in a
    fixed order, otherwise batches are sampled from the seeded stream.
    """
    rng = Rng(mix_seed(cfg.seed, 0x70C))
    model = TokenizerModel(cfg, rng.child(1))
    n = len(train_rows)
    if n == 0:
        raise ValueError("empty training split")
    batch_rng = rng.child(2)
    ema_rng = rng.child(3)

    first = [train_rows[i % n].features for i in range(min(cfg.batch_size, n))]
    if cfg.use_vq:
        init_codebook(model, first, rng.child(4))

    losses = []
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            batch = list(range(n))
        else:
            batch = [int(i) for i in batch_rng.integers(0, n, cfg.batch_size)]
        grads = model.store.zero_grads()
        total = 0.0
        all_H = []
        all_idx = []
        for i in batch:
            row = train_rows[i]
            loss, _, g, idx, H = model.loss_and_grads(row.features, row.aligned)
            total += loss
            for k in grads:
                grads[k] += g[k]
            if cfg.use_vq:
                all_H.append(H)
                all_idx.append(idx)
        scale = 1.0 / len(batch)
        for k in grads:
            grads[k] *= scale
        step_loss = total * scale
        if not np.isfinite(step_loss):
            raise FloatingPointError(f"tokenizer training diverged at step {step}")
        adam_step(model.store, grads, warmup_lr(cfg.lr, step, cfg.warmup_steps))
        if cfg.use_vq:
            ema_update(model.codebook, np.vstack(all_H), np.concatenate(all_idx), ema_rng)
        losses.append(step_loss)
        if on_step is not None:
            on_step(step, step_loss)
    if not cfg.use_vq:
        # keep a codebook so tokenize() still works on the baseline model
        init_codebook(model, first, rng.child(4))
    model.trained = True
    return model, losses


def frame_accuracy(model: TokenizerModel, rows) -> float:
    """Fraction of frames whose argmax posterior matches the aligned text."""
    hit = 0
    total = 0
    for row in rows:
        pred = model.frame_posteriors(row.features).argmax(axis=1)
        hit += int((pred == row.aligned).sum())
        total += row.aligned.shape[0]
    return hit / max(total, 1)
