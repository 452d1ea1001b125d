"""Text-to-token autoregressive model: role-tagged sequence construction,
teacher-forced training with the masked token loss, multinomial sampling,
and the prompt builders for zero-shot voice cloning (same-language and
cross-lingual) and instruction-controlled synthesis.

Sequence layout is [start, speaker-vector, text encodings, turn, speech
tokens, end]; only speech tokens and the end marker contribute loss.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import checkpoint
from .numerics import (Rng, ParamStore, adam_step, causal_attention_backward,
                       causal_attention_forward, dense_backward, dense_forward,
                       mix_seed, rmsnorm_backward, rmsnorm_forward,
                       sinusoid_posenc, softmax_ce, softmax_rows, warmup_lr)
from .synthdata import STYLE_NAMES, TextSeq

_MARK = {"bos": 0, "turn": 1, "eos": 2}


def separator_id(v_text: int) -> int:
    """Reserved "end of prompt" separator, never emitted by the data generator."""
    return v_text


def style_token_id(style: str, v_text: int) -> int:
    if style not in STYLE_NAMES:
        raise ValueError(f"unknown style id {style!r}")
    return v_text + 1 + STYLE_NAMES.index(style)


def extended_vocab(v_text: int) -> int:
    return v_text + 1 + len(STYLE_NAMES)


@dataclass
class Slot:
    kind: str               # bos | spk | text | turn | tok | eos
    token: int = -1         # text id (text) or speech token (tok)
    vec: np.ndarray | None = None  # speaker vector, or a precomputed text row


@dataclass
class LMSequence:
    slots: list
    loss_mask: np.ndarray   # bool per slot; true exactly on tok and eos slots

    def validate(self):
        kinds = [s.kind for s in self.slots]
        if kinds[0] != "bos" or kinds.count("bos") != 1:
            raise ValueError("sequence must start with exactly one start marker")
        if kinds.count("spk") > 1 or ("spk" in kinds and kinds[1] != "spk"):
            raise ValueError("speaker slot must sit immediately after the start marker")
        if "tok" in kinds:
            first_tok = kinds.index("tok")
            if "turn" not in kinds or kinds.index("turn") > first_tok:
                raise ValueError("turn marker must precede all speech tokens")
        if "eos" in kinds and kinds[-1] != "eos":
            raise ValueError("end marker must be last")
        want = np.array([k in ("tok", "eos") for k in kinds])
        if not np.array_equal(want, self.loss_mask):
            raise ValueError("loss mask must cover exactly speech tokens and the end marker")
        return self


def _mask_for(slots):
    return np.array([s.kind in ("tok", "eos") for s in slots])


def build_sequence(v, text_enc, tokens) -> LMSequence:
    """Training-form sequence: [bos, v, text rows, turn, tokens, eos].

    v=None omits the speaker slot; text_enc is a (U, width) array of encoded
    text rows (U may be 0 for the unconditional ablation).
    """
    slots = [Slot("bos")]
    if v is not None:
        slots.append(Slot("spk", vec=np.asarray(v, dtype=np.float64)))
    for row in np.atleast_2d(text_enc) if len(text_enc) else []:
        slots.append(Slot("text", vec=row))
    slots.append(Slot("turn"))
    for t in tokens:
        slots.append(Slot("tok", token=int(t)))
    slots.append(Slot("eos"))
    return LMSequence(slots, _mask_for(slots))


@dataclass
class SamplingPolicy:
    temperature: float = 1.0
    top_k: int = 0          # 0 = full distribution
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0 (0 = greedy)")
        if self.max_len < 1:
            raise ValueError("max length cap must be >= 1")


@dataclass
class LMConfig:
    width: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    v_text: int = 32
    n_codes: int = 64
    spk_dim: int = 16
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 4
    warmup_steps: int = 200
    instruct_fraction: float = 0.5
    seed: int = 0


class LMModel:
    def __init__(self, cfg: LMConfig, rng: Rng):
        self.cfg = cfg
        self.trained = False
        w = cfg.width
        s = ParamStore()
        init = lambda fan_in, *shape: rng.normal(*shape) / np.sqrt(fan_in)
        s.add("text_emb", 0.5 * rng.normal(extended_vocab(cfg.v_text), w))
        s.add("tenc.W1", init(w, w, w))
        s.add("tenc.b1", np.zeros(w))
        s.add("tenc.W2", init(w, w, w))
        s.add("tenc.b2", np.zeros(w))
        s.add("spk.W", init(cfg.spk_dim, w, cfg.spk_dim))
        s.add("spk.b", np.zeros(w))
        s.add("tok_emb", 0.5 * rng.normal(cfg.n_codes, w))
        s.add("mark_emb", 0.5 * rng.normal(3, w))
        for i in range(cfg.layers):
            for nm in ("Wq", "Wk", "Wv", "Wo"):
                s.add(f"att{i}.{nm}", init(w, w, w))
                s.add(f"att{i}.{nm[1].lower()}b", np.zeros(w))
            s.add(f"ffn{i}.W1", init(w, cfg.ffn, w))
            s.add(f"ffn{i}.b1", np.zeros(cfg.ffn))
            s.add(f"ffn{i}.W2", init(cfg.ffn, w, cfg.ffn))
            s.add(f"ffn{i}.b2", np.zeros(w))
        s.add("head.W", 0.02 * rng.normal(cfg.n_codes + 1, w))
        s.add("head.b", np.zeros(cfg.n_codes + 1))
        self.store = s

    @property
    def eos_class(self) -> int:
        return self.cfg.n_codes

    # -- text encoder ----------------------------------------------------

    def text_encode(self, ids, with_cache=False):
        """Embedding lookup + 2-layer dense encoder with positional encoding."""
        p = self.store.params
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size == 0:
            raise ValueError("empty text")
        if ids.min() < 0 or ids.max() >= p["text_emb"].shape[0]:
            raise ValueError("text id outside the (extended) vocabulary")
        e = p["text_emb"][ids]
        x = e + sinusoid_posenc(len(ids), self.cfg.width)
        a, c1 = dense_forward(p["tenc.W1"], p["tenc.b1"], x, "gelu")
        rows, c2 = dense_forward(p["tenc.W2"], p["tenc.b2"], a, "gelu")
        return (rows, (ids, c1, c2)) if with_cache else rows

    def _text_encode_backward(self, cache, g_rows, grads):
        ids, c1, c2 = cache
        gW, gb, ga = dense_backward(c2, g_rows)
        grads["tenc.W2"] += gW
        grads["tenc.b2"] += gb
        gW, gb, ge = dense_backward(c1, ga)
        grads["tenc.W1"] += gW
        grads["tenc.b1"] += gb
        np.add.at(grads["text_emb"], ids, ge)

    # -- decoder ---------------------------------------------------------

    def _decoder_forward(self, x):
        p = self.store.params
        caches = []
        for i in range(self.cfg.layers):
            xn, crms1 = rmsnorm_forward(x)
            q, cq = dense_forward(p[f"att{i}.Wq"], p[f"att{i}.qb"], xn, "none")
            k, ck = dense_forward(p[f"att{i}.Wk"], p[f"att{i}.kb"], xn, "none")
            v, cv = dense_forward(p[f"att{i}.Wv"], p[f"att{i}.vb"], xn, "none")
            a, catt = causal_attention_forward(q, k, v, self.cfg.heads)
            o, co = dense_forward(p[f"att{i}.Wo"], p[f"att{i}.ob"], a, "none")
            x = x + o
            xn2, crms2 = rmsnorm_forward(x)
            h, cf1 = dense_forward(p[f"ffn{i}.W1"], p[f"ffn{i}.b1"], xn2, "gelu")
            o2, cf2 = dense_forward(p[f"ffn{i}.W2"], p[f"ffn{i}.b2"], h, "none")
            x = x + o2
            caches.append((crms1, cq, ck, cv, catt, co, crms2, cf1, cf2))
        xn, crmsf = rmsnorm_forward(x)
        logits, chead = dense_forward(p["head.W"], p["head.b"], xn, "none")
        return logits, (caches, crmsf, chead)

    def _decoder_backward(self, dec_cache, glogits, grads):
        caches, crmsf, chead = dec_cache
        gW, gb, gxn = dense_backward(chead, glogits)
        grads["head.W"] += gW
        grads["head.b"] += gb
        gx = rmsnorm_backward(crmsf, gxn)
        for i in range(self.cfg.layers - 1, -1, -1):
            crms1, cq, ck, cv, catt, co, crms2, cf1, cf2 = caches[i]
            gW, gb, gh = dense_backward(cf2, gx)
            grads[f"ffn{i}.W2"] += gW
            grads[f"ffn{i}.b2"] += gb
            gW, gb, gxn2 = dense_backward(cf1, gh)
            grads[f"ffn{i}.W1"] += gW
            grads[f"ffn{i}.b1"] += gb
            gx = gx + rmsnorm_backward(crms2, gxn2)
            gW, gb, ga = dense_backward(co, gx)
            grads[f"att{i}.Wo"] += gW
            grads[f"att{i}.ob"] += gb
            gq, gk, gv = causal_attention_backward(catt, ga)
            gxn = np.zeros_like(gx)
            for nm, g in (("Wq", gq), ("Wk", gk), ("Wv", gv)):
                gW, gb, gpart = dense_backward({"Wq": cq, "Wk": ck, "Wv": cv}[nm], g)
                grads[f"att{i}.{nm}"] += gW
                grads[f"att{i}.{nm[1].lower()}b"] += gb
                gxn = gxn + gpart
            gx = gx + rmsnorm_backward(crms1, gxn)
        return gx

    # -- training --------------------------------------------------------

    def loss_and_grads(self, v, text_ids, tokens, instruct=False, compute_grads=True):
        """Teacher-forced masked loss for one sequence; instruct omits the v slot."""
        p = self.store.params
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.size == 0:
            raise ValueError("training sequence needs speech tokens")
        use_spk = (v is not None) and not instruct

        rows = [p["mark_emb"][0][None, :]]
        spk_cache = None
        if use_spk:
            srow, spk_cache = dense_forward(p["spk.W"], p["spk.b"],
                                            np.asarray(v, dtype=np.float64)[None, :], "none")
            rows.append(srow)
        text_rows, text_cache = self.text_encode(text_ids, with_cache=True)
        rows.append(text_rows)
        rows.append(p["mark_emb"][1][None, :])
        rows.append(p["tok_emb"][tokens])
        x_in = np.vstack(rows)

        n_in = x_in.shape[0]
        turn_pos = n_in - 1 - tokens.size
        targets = np.zeros(n_in, dtype=np.intp)
        targets[turn_pos:turn_pos + tokens.size] = tokens
        targets[n_in - 1] = self.eos_class
        mask = np.zeros(n_in, dtype=bool)
        mask[turn_pos:] = True

        x = x_in + sinusoid_posenc(n_in, self.cfg.width)
        logits, dec_cache = self._decoder_forward(x)
        loss, glogits = softmax_ce(logits, targets, mask)
        if not compute_grads:
            return loss, None

        grads = self.store.zero_grads()
        g_rows = self._decoder_backward(dec_cache, glogits, grads)
        pos = 0
        grads["mark_emb"][0] += g_rows[pos]
        pos += 1
        if use_spk:
            gW, gb, _ = dense_backward(spk_cache, g_rows[pos:pos + 1])
            grads["spk.W"] += gW
            grads["spk.b"] += gb
            pos += 1
        U = len(text_ids)
        self._text_encode_backward(text_cache, g_rows[pos:pos + U], grads)
        pos += U
        grads["mark_emb"][1] += g_rows[pos]
        pos += 1
        np.add.at(grads["tok_emb"], tokens, g_rows[pos:])
        return loss, grads

    # -- inference -------------------------------------------------------

    def _embed_slot(self, slot: Slot) -> np.ndarray:
        p = self.store.params
        if slot.kind in _MARK:
            return p["mark_emb"][_MARK[slot.kind]].copy()
        if slot.kind == "spk":
            row, _ = dense_forward(p["spk.W"], p["spk.b"], slot.vec[None, :], "none")
            return row[0]
        if slot.kind == "tok":
            return p["tok_emb"][slot.token].copy()
        raise ValueError(f"cannot embed slot kind {slot.kind!r}")

    def prefix_rows(self, seq: LMSequence) -> np.ndarray:
        """Input rows for a prefix; text slots are encoded jointly, in order."""
        rows = []
        i = 0
        slots = seq.slots
        while i < len(slots):
            if slots[i].kind == "text":
                j = i
                while j < len(slots) and slots[j].kind == "text":
                    j += 1
                if all(s.vec is not None for s in slots[i:j]):
                    rows.extend(s.vec for s in slots[i:j])
                else:
                    rows.extend(self.text_encode([s.token for s in slots[i:j]]))
                i = j
            else:
                rows.append(self._embed_slot(slots[i]))
                i += 1
        return np.vstack(rows)

    def teacher_logits(self, seq: LMSequence) -> np.ndarray:
        """Logits at every input position of a sequence (end marker excluded)."""
        rows = self.prefix_rows(LMSequence(
            [s for s in seq.slots if s.kind != "eos"],
            _mask_for([s for s in seq.slots if s.kind != "eos"])))
        x = rows + sinusoid_posenc(rows.shape[0], self.cfg.width)
        logits, _ = self._decoder_forward(x)
        return logits

    def start_decoder(self) -> "IncrementalDecoder":
        return IncrementalDecoder(self)

    def sample(self, prefix: LMSequence, policy: SamplingPolicy):
        """Sample speech tokens until the end class or the cap.

        Returns (tokens, truncated); the end marker is never included.
        """
        kinds = [s.kind for s in prefix.slots]
        if "eos" in kinds:
            raise ValueError("prefix must not contain the end marker")
        if kinds[-1] not in ("turn", "tok"):
            raise ValueError("prefix must end at the turn marker or within speech tokens")
        rng = Rng(mix_seed(policy.seed, 0x5A3))
        dec = self.start_decoder()
        logits = dec.feed_rows(self.prefix_rows(prefix))
        out = []
        truncated = False
        p = self.store.params
        while True:
            tok = _draw(logits, policy, rng)
            if tok == self.eos_class:
                break
            out.append(tok)
            if len(out) >= policy.max_len:
                truncated = True
                break
            logits = dec.step(p["tok_emb"][tok])
        return np.array(out, dtype=np.int64), truncated

    def build_icl_sequence(self, prompt_text, prompt_tokens, target_text: TextSeq,
                           v, mode: str) -> LMSequence:
        """Prompt-continuation prefix for zero-shot cloning.

        same-language merges prompt and target text and pre-seeds the prompt
        tokens after the turn marker; cross-lingual omits prompt text and
        tokens entirely so source-language prosody cannot leak.
        """
        if mode not in ("same-language", "cross-lingual"):
            raise ValueError(f"unknown icl mode {mode!r}")
        slots = [Slot("bos"), Slot("spk", vec=np.asarray(v, dtype=np.float64))]
        if mode == "same-language":
            if prompt_text is not None and len(prompt_text):
                if prompt_text.lang != target_text.lang:
                    raise ValueError("same-language mode requires matching languages")
                for t in prompt_text.tokens:
                    slots.append(Slot("text", token=int(t)))
            for t in target_text.tokens:
                slots.append(Slot("text", token=int(t)))
            slots.append(Slot("turn"))
            if prompt_tokens is not None:
                for t in np.asarray(prompt_tokens).tolist():
                    slots.append(Slot("tok", token=int(t)))
        else:
            if prompt_text is not None and prompt_text.lang == target_text.lang:
                warnings.warn("cross-lingual mode with matching languages")
            for t in target_text.tokens:
                slots.append(Slot("text", token=int(t)))
            slots.append(Slot("turn"))
        return LMSequence(slots, _mask_for(slots))

    def build_instruct_sequence(self, style: str, target_text: TextSeq) -> LMSequence:
        """Instruction prefix: style token, separator, target text; no speaker slot."""
        sid = style_token_id(style, self.cfg.v_text)
        slots = [Slot("bos"), Slot("text", token=sid),
                 Slot("text", token=separator_id(self.cfg.v_text))]
        for t in target_text.tokens:
            slots.append(Slot("text", token=int(t)))
        slots.append(Slot("turn"))
        return LMSequence(slots, _mask_for(slots))

    # -- persistence -----------------------------------------------------

    def save(self, path):
        blobs = dict(self.store.params)
        cfg = self.cfg
        blobs["meta/trained"] = np.array([1.0 if self.trained else 0.0])
        blobs["meta/cfg"] = np.array([cfg.width, cfg.heads, cfg.layers, cfg.ffn,
                                      cfg.v_text, cfg.n_codes, cfg.spk_dim])
        checkpoint.save_blobs(path, blobs)

    @staticmethod
    def load(path) -> "LMModel":
        blobs = checkpoint.load_blobs(path)
        c = blobs["meta/cfg"]
        cfg = LMConfig(width=int(c[0]), heads=int(c[1]), layers=int(c[2]),
                       ffn=int(c[3]), v_text=int(c[4]), n_codes=int(c[5]),
                       spk_dim=int(c[6]))
        model = LMModel(cfg, Rng(0))
        for name in model.store.names():
            model.store.params[name][:] = blobs[name]
        model.trained = checkpoint.scalar(blobs, "meta/trained") > 0.5
        return model


class IncrementalDecoder:
    """Step-by-step decoding with per-layer key/value caches (per-call state)."""

    def __init__(self, model: LMModel):
        self.model = model
        self.keys = [[] for _ in range(model.cfg.layers)]
        self.vals = [[] for _ in range(model.cfg.layers)]
        self.pos = 0

    def feed_rows(self, rows) -> np.ndarray:
        logits = None
        for row in np.atleast_2d(rows):
            logits = self.step(row)
        return logits

    def step(self, row) -> np.ndarray:
        p = self.model.store.params
        cfg = self.model.cfg
        hd = cfg.width // cfg.heads
        x = row + sinusoid_posenc(self.pos + 1, cfg.width)[self.pos]
        for i in range(cfg.layers):
            xn = x * (np.mean(x * x) + 1e-8) ** -0.5
            q = p[f"att{i}.Wq"] @ xn + p[f"att{i}.qb"]
            k = p[f"att{i}.Wk"] @ xn + p[f"att{i}.kb"]
            v = p[f"att{i}.Wv"] @ xn + p[f"att{i}.vb"]
            self.keys[i].append(k)
            self.vals[i].append(v)
            K = np.array(self.keys[i])
            V = np.array(self.vals[i])
            attn = np.empty(cfg.width)
            for h in range(cfg.heads):
                sl = slice(h * hd, (h + 1) * hd)
                scores = K[:, sl] @ q[sl] / np.sqrt(hd)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                attn[sl] = w @ V[:, sl]
            x = x + p[f"att{i}.Wo"] @ attn + p[f"att{i}.ob"]
            xn = x * (np.mean(x * x) + 1e-8) ** -0.5
            h1 = xn @ p[f"ffn{i}.W1"].T + p[f"ffn{i}.b1"]
            h1 = 0.5 * h1 * (1.0 + erf(h1 / np.sqrt(2.0)))
            x = x + h1 @ p[f"ffn{i}.W2"].T + p[f"ffn{i}.b2"]
        xn = x * (np.mean(x * x) + 1e-8) ** -0.5
        self.pos += 1
        return p["head.W"] @ xn + p["head.b"]


def _draw(logits, policy: SamplingPolicy, rng: Rng) -> int:
    if policy.temperature == 0.0:
        return int(np.argmax(logits))
    probs = softmax_rows(logits[None, :] / policy.temperature)[0]
    if policy.top_k > 0 and policy.top_k < probs.size:
        keep = np.argsort(-probs, kind="stable")[:policy.top_k]
        trimmed = np.zeros_like(probs)
        trimmed[keep] = probs[keep]
        probs = trimmed / trimmed.sum()
    return rng.choice_p(probs)


def lm_train(train_rows, tokenizer, cfg: LMConfig, on_step=None):
    """Train the token LM on LoadedUtt rows using a trained tokenizer.

    Each sequence is built in instruct form (style token + separator + text,
    no speaker slot) with probability instruct_fraction, else in standard
    form with the speaker vector.
    """
    from .synthdata import speaker_embed

    rng = Rng(mix_seed(cfg.seed, 0x11A))
    model = LMModel(cfg, rng.child(1))
    prepped = []
    for row in train_rows:
        prepped.append((speaker_embed(row.features).astype(np.float64),
                        list(row.row.text),
                        [style_token_id(row.row.style, cfg.v_text),
                         separator_id(cfg.v_text)] + list(row.row.text),
                        tokenizer.tokenize(row.features)))
    n = len(prepped)
    batch_rng = rng.child(2)
    coin = rng.child(3)

    losses = []
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            batch = list(range(n))
        else:
            batch = [int(i) for i in batch_rng.integers(0, n, cfg.batch_size)]
        grads = model.store.zero_grads()
        total = 0.0
        for i in batch:
            v, text_ids, instr_ids, tokens = prepped[i]
            instruct = coin.uniform() < cfg.instruct_fraction
            loss, g = model.loss_and_grads(v, instr_ids if instruct else text_ids,
                                           tokens, instruct=instruct)
            total += loss
            for k in grads:
                grads[k] += g[k]
        scale = 1.0 / len(batch)
        for k in grads:
            grads[k] *= scale
        step_loss = total * scale
        if not np.isfinite(step_loss):
            raise FloatingPointError(f"LM training diverged at step {step}")
        adam_step(model.store, grads, warmup_lr(cfg.lr, step, cfg.warmup_steps))
        losses.append(step_loss)
        if on_step is not None:
            on_step(step, step_loss)
    model.trained = True
    return model, losses
