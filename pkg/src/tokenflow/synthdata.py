"""Deterministic synthetic "speech": text token sequences rendered to
continuous feature trajectories under a speaker timbre and a style tag,
plus the statistics-based speaker embedding and corpus generation.

Disk layout: one binary feature file per utterance (magic "TFU1") and one
UTF-8 manifest per split with rows
``path<TAB>speaker<TAB>style<TAB>lang<TAB>space-separated-text-ids``.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng, mix_seed

MAGIC_UTT = b"TFU1"
ALIGN_SENTINEL = 0xFFFFFFFF

LANGS = ("A", "B")


@dataclass(frozen=True)
class StyleTag:
    """Speaking-style analog: a rate and an amplitude multiplier."""

    name: str
    rate_mult: float
    amp_mult: float

    def __post_init__(self):
        if self.rate_mult <= 0 or self.amp_mult <= 0:
            raise ValueError("style multipliers must be positive")


STYLES = {
    "neutral": StyleTag("neutral", 1.0, 1.0),
    "fast": StyleTag("fast", 0.5, 1.0),
    "slow": StyleTag("slow", 2.0, 1.0),
    "loud": StyleTag("loud", 1.0, 2.0),
    "soft": StyleTag("soft", 1.0, 0.5),
}
STYLE_NAMES = tuple(STYLES)


@dataclass(frozen=True)
class TextSeq:
    tokens: tuple
    lang: str = "A"

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("empty text")
        if self.lang not in LANGS:
            raise ValueError(f"unknown language {self.lang!r}")
        if any(t < 0 for t in self.tokens):
            raise ValueError("negative text token id")

    def __len__(self):
        return len(self.tokens)


def lang_range(lang: str, v_text: int):
    """Each language uses a disjoint half of the text-id space."""
    half = v_text // 2
    return (0, half) if lang == "A" else (half, v_text)


@dataclass
class SpeakerProfile:
    id: int
    offset: np.ndarray        # (D,)
    timbre: np.ndarray        # (D, D), condition number < 100
    base_rate: int            # frames per text token, >= 2

    def __post_init__(self):
        if self.base_rate < 2:
            raise ValueError("base rate must be >= 2")
        if np.linalg.cond(self.timbre) >= 100:
            raise ValueError("timbre matrix badly conditioned")


@dataclass
class Utterance:
    features: np.ndarray      # (L, D)
    aligned_text: np.ndarray  # (L,) text-token id per frame
    text: TextSeq
    speaker: int
    style: str
    seed: int

    def __post_init__(self):
        if self.features.shape[0] != self.aligned_text.shape[0]:
            raise ValueError("alignment does not cover every frame")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def token_pattern(token: int, n_frames: int, dim: int) -> np.ndarray:
    """Fixed per-token prototype trajectory, shape (n_frames, dim).

    Dimension d of token t follows sin(2*pi*(d*t mod 7 + 1)*j/16) over the
    within-token frame index j.
    """
    j = np.arange(n_frames, dtype=np.float64)[:, None]
    d = np.arange(dim, dtype=np.float64)[None, :]
    freq = (d * token) % 7 + 1
    return np.sin(2.0 * math.pi * freq * j / 16.0)


def render(text: TextSeq, spk: SpeakerProfile, style: StyleTag, seed: int,
           noise_sigma: float = 0.05) -> Utterance:
    """Render a text sequence to a feature trajectory.

    Each token t is emitted as round(base_rate * rate_mult) frames of its
    pattern, passed through the speaker's timbre and offset, scaled by the
    amplitude multiplier, with small seeded noise on top. Deterministic in
    (text, spk, style, seed).
    """
    dim = spk.offset.shape[0]
    per_token = max(1, _round_half_up(spk.base_rate * style.rate_mult))
    rows = []
    aligned = []
    for t in text.tokens:
        p = token_pattern(t, per_token, dim)
        rows.append(style.amp_mult * (p @ spk.timbre.T + spk.offset))
        aligned.extend([t] * per_token)
    feats = np.vstack(rows)
    if noise_sigma > 0:
        rng = Rng(mix_seed(seed, 0x5EED))
        feats = feats + noise_sigma * rng.normal(*feats.shape)
    return Utterance(feats, np.array(aligned, dtype=np.int64), text,
                     spk.id, style.name, seed)


def speaker_embed(features: np.ndarray) -> np.ndarray:
    """Per-dimension mean and std over frames, concatenated and L2-normalized."""
    if features.shape[0] < 2:
        raise ValueError("need at least 2 frames for a speaker embedding")
    v = np.concatenate([features.mean(axis=0), features.std(axis=0)])
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("degenerate all-zero features")
    return v / norm


def collapse_runs(ids) -> list:
    """Collapse consecutive repeats: [1,1,2,2,2,3] -> [1,2,3]."""
    out = []
    for t in ids:
        if not out or out[-1] != t:
            out.append(int(t))
    return out


def make_speaker(spk_id: int, dim: int, base_rate: int, rng: Rng,
                 offset_scale: float = 2.0) -> SpeakerProfile:
    """Random speaker: offset vector plus a well-conditioned mixing matrix."""
    offset = offset_scale * rng.normal(dim)
    q1 = _ortho(rng.normal(dim, dim))
    q2 = _ortho(rng.normal(dim, dim))
    s = 0.6 + 1.2 * rng.uniform(dim)
    timbre = (q1 * s) @ q2.T
    return SpeakerProfile(spk_id, offset, timbre, base_rate)


def _ortho(a):
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# corpus on disk

@dataclass(frozen=True)
class ManifestRow:
    path: str
    speaker: int
    style: str
    lang: str
    text: tuple

    def line(self) -> str:
        ids = " ".join(str(t) for t in self.text)
        return f"{self.path}\t{self.speaker}\t{self.style}\t{self.lang}\t{ids}"

    @staticmethod
    def parse(line: str) -> "ManifestRow":
        path, speaker, style, lang, ids = line.rstrip("\n").split("\t")
        return ManifestRow(path, int(speaker), style, lang,
                           tuple(int(t) for t in ids.split()))

    def text_seq(self) -> TextSeq:
        return TextSeq(self.text, self.lang)


def write_utterance(path, features: np.ndarray, aligned_text=None) -> None:
    """Write the TFU1 binary: header, row-major float64 features, aligned ids.

    aligned_text=None writes the all-invalid sentinel (generated features)."""
    feats = np.ascontiguousarray(features, dtype=np.float64)
    L, D = feats.shape
    if aligned_text is None:
        aligned = np.full(L, ALIGN_SENTINEL, dtype=np.uint32)
    else:
        aligned = np.asarray(aligned_text, dtype=np.uint32)
    with open(path, "wb") as f:
        f.write(MAGIC_UTT)
        f.write(struct.pack("<II", L, D))
        f.write(feats.astype("<f8").tobytes())
        f.write(aligned.astype("<u4").tobytes())


def read_utterance(path):
    """Read a TFU1 file; returns (features (L,D), aligned ids (L,) or None)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC_UTT:
            raise ValueError(f"{path}: bad magic {magic!r}")
        L, D = struct.unpack("<II", f.read(8))
        feats = np.frombuffer(f.read(8 * L * D), dtype="<f8").reshape(L, D).copy()
        aligned = np.frombuffer(f.read(4 * L), dtype="<u4").copy()
    if np.all(aligned == ALIGN_SENTINEL):
        return feats, None
    return feats, aligned.astype(np.int64)


def write_manifest(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(r.line() + "\n")


def read_manifest(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [ManifestRow.parse(line) for line in f if line.strip()]


def _sample_text(rng: Rng, lang: str, v_text: int, len_range) -> tuple:
    lo, hi = lang_range(lang, v_text)
    n = int(rng.integers(len_range[0], len_range[1] + 1))
    toks = []
    for _ in range(n):
        t = int(rng.integers(lo, hi))
        while toks and t == toks[-1]:  # adjacent repeats break run-collapse decoding
            t = int(rng.integers(lo, hi))
        toks.append(t)
    return tuple(toks)


def _sample_text_pool(rng, n_texts, v_text, len_range, forbidden):
    pool = []
    seen = set(forbidden)
    attempts = 0
    while len(pool) < n_texts:
        lang = LANGS[len(pool) % 2]
        txt = (_sample_text(rng, lang, v_text, len_range), lang)
        attempts += 1
        if attempts > 1000 * n_texts:
            raise ValueError("corpus too small to satisfy held-out-text constraint")
        if txt in seen:
            continue
        seen.add(txt)
        pool.append(txt)
    return pool


def make_corpus(out_dir, n_speakers=10, n_utts=1000, split_ratios=(0.8, 0.1, 0.1),
                seed=0, dim=8, v_text=32, base_rate=4, noise_sigma=0.05,
                text_len=(4, 10)) -> dict:
    """Generate a corpus on disk; returns {"train"|"dev"|"test": [ManifestRow]}.

    Test texts are held out (never appear in the train manifest); per-utterance
    seeds derive from (seed, index) so regeneration is byte-identical.
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_train = _round_half_up(split_ratios[0] * n_utts)
    n_dev = _round_half_up(split_ratios[1] * n_utts)
    n_test = n_utts - n_train - n_dev
    if min(n_train, n_test) < 2:
        raise ValueError("corpus too small to satisfy held-out-text constraint")

    rng = Rng(mix_seed(seed, 0xC0DE))
    speakers = [make_speaker(i, dim, base_rate, rng.child(1, i))
                for i in range(n_speakers)]

    pool_rng = rng.child(2)
    train_pool = _sample_text_pool(pool_rng, max(2, n_train // 4), v_text,
                                   text_len, forbidden=())
    test_pool = _sample_text_pool(pool_rng, max(2, n_test // 2), v_text,
                                  text_len, forbidden=train_pool)

    splits = {"train": [], "dev": [], "test": []}
    order = (["train"] * n_train) + (["dev"] * n_dev) + (["test"] * n_test)
    pick = rng.child(3)
    for i, split in enumerate(order):
        pool = test_pool if split == "test" else train_pool
        tokens, lang = pool[int(pick.integers(0, len(pool)))]
        spk = speakers[int(pick.integers(0, n_speakers))]
        style = STYLES[STYLE_NAMES[int(pick.integers(0, len(STYLE_NAMES)))]]
        utt_seed = mix_seed(seed, 4, i)
        utt = render(TextSeq(tokens, lang), spk, style, utt_seed, noise_sigma)
        fname = f"utt_{i:05d}.bin"
        write_utterance(out_dir / fname, utt.features, utt.aligned_text)
        splits[split].append(ManifestRow(fname, spk.id, style.name, lang, tokens))

    for split, rows in splits.items():
        write_manifest(out_dir / f"{split}.tsv", rows)
    meta = {"dim": dim, "v_text": v_text, "base_rate": base_rate,
            "n_speakers": n_speakers, "seed": seed, "noise_sigma": noise_sigma}
    with open(out_dir / "corpus.meta", "w", encoding="utf-8") as f:
        for k in sorted(meta):
            f.write(f"{k}={meta[k]}\n")
    return splits


@dataclass
class LoadedUtt:
    row: ManifestRow
    features: np.ndarray
    aligned: np.ndarray


class Corpus:
    """In-memory view of a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.meta = {}
        with open(self.root / "corpus.meta", encoding="utf-8") as f:
            for line in f:
                k, v = line.strip().split("=", 1)
                self.meta[k] = float(v) if "." in v else int(v)
        self._cache = {}

    @property
    def dim(self):
        return int(self.meta["dim"])

    @property
    def v_text(self):
        return int(self.meta["v_text"])

    @property
    def base_rate(self):
        return int(self.meta["base_rate"])

    def split(self, name) -> list:
        if name not in self._cache:
            rows = read_manifest(self.root / f"{name}.tsv")
            loaded = []
            for r in rows:
                feats, aligned = read_utterance(self.root / r.path)
                loaded.append(LoadedUtt(r, feats, aligned))
            self._cache[name] = loaded
        return self._cache[name]
