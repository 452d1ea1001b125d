"""Content-consistency and speaker-similarity evaluation: Levenshtein
alignment with insertion/deletion/substitution accounting, token error rate,
monotone forced alignment of recognizer posteriors, and seed-grouped reports.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class EditCounts:
    ins: int
    dels: int
    subs: int
    ref_len: int

    @property
    def errors(self):
        return self.ins + self.dels + self.subs

    @property
    def rate(self):
        return self.errors / self.ref_len if self.ref_len else 0.0


def levenshtein_counts(ref, hyp) -> EditCounts:
    """Minimum-edit alignment of hyp against ref with an I/D/S breakdown.

    Ties prefer match/substitution, then deletion, then insertion, so the
    breakdown is deterministic."""
    ref = list(ref)
    hyp = list(hyp)
    m, n = len(ref), len(hyp)
    dp = np.zeros((m + 1, n + 1), dtype=np.int64)
    dp[:, 0] = np.arange(m + 1)
    dp[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            same = ref[i - 1] == hyp[j - 1]
            dp[i, j] = min(dp[i - 1, j - 1] + (0 if same else 1),
                           dp[i - 1, j] + 1,
                           dp[i, j - 1] + 1)
    ins = dels = subs = 0
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(ins, dels, subs, m)


def token_error_rate(ref, hyp) -> float:
    return levenshtein_counts(ref, hyp).rate


def forced_align(posteriors: np.ndarray, text_ids) -> np.ndarray:
    """Monotone frame-to-token alignment maximizing total log posterior.

    posteriors is (L, V); returns per-frame text ids. Every token gets at
    least one frame, so L must be >= len(text_ids)."""
    text_ids = list(text_ids)
    L, _ = posteriors.shape
    U = len(text_ids)
    if L < U:
        raise ValueError("fewer frames than text tokens; cannot align")
    logp = np.log(np.maximum(posteriors[:, text_ids], 1e-300))
    score = np.full((L, U), -np.inf)
    move = np.zeros((L, U), dtype=np.int8)  # 1 = advanced a token
    score[0, 0] = logp[0, 0]
    for l in range(1, L):
        stay = score[l - 1]
        adv = np.concatenate([[-np.inf], score[l - 1, :-1]])
        take_adv = adv > stay
        move[l] = take_adv
        score[l] = logp[l] + np.where(take_adv, adv, stay)
    out = np.empty(L, dtype=np.int64)
    u = U - 1
    for l in range(L - 1, -1, -1):
        out[l] = text_ids[u]
        if l > 0 and move[l, u]:
            u -= 1
    return out


@dataclass
class UttEval:
    name: str
    seed: int
    ins: int
    dels: int
    subs: int
    ref_len: int
    ss: float | None = None

    @property
    def ter(self):
        return (self.ins + self.dels + self.subs) / self.ref_len if self.ref_len else 0.0


@dataclass
class SeedSummary:
    seed: int
    ter: float
    ins: int
    dels: int
    subs: int
    ref_len: int
    ss_mean: float | None


@dataclass
class EvalReport:
    per_utt: list
    per_seed: list
    ter_mean: float
    ter_std: float
    ss_mean: float | None
    ss_std: float | None

    def jsonl_lines(self) -> list:
        lines = []
        for u in self.per_utt:
            lines.append(json.dumps({"record": "utt", **asdict(u), "ter": u.ter},
                                    sort_keys=True))
        for s in self.per_seed:
            lines.append(json.dumps({"record": "seed", **asdict(s)}, sort_keys=True))
        lines.append(json.dumps({"record": "aggregate", "ter_mean": self.ter_mean,
                                 "ter_std": self.ter_std, "ss_mean": self.ss_mean,
                                 "ss_std": self.ss_std}, sort_keys=True))
        return lines


def aggregate_report(per_utt) -> EvalReport:
    """Group per-utterance evals by seed; aggregate TER pools edit counts."""
    seeds = sorted({u.seed for u in per_utt})
    per_seed = []
    for s in seeds:
        rows = [u for u in per_utt if u.seed == s]
        ins = sum(u.ins for u in rows)
        dels = sum(u.dels for u in rows)
        subs = sum(u.subs for u in rows)
        ref = sum(u.ref_len for u in rows)
        sss = [u.ss for u in rows if u.ss is not None]
        per_seed.append(SeedSummary(
            seed=s, ter=(ins + dels + subs) / ref if ref else 0.0,
            ins=ins, dels=dels, subs=subs, ref_len=ref,
            ss_mean=float(np.mean(sss)) if sss else None))
    ters = np.array([s.ter for s in per_seed])
    ss_vals = np.array([s.ss_mean for s in per_seed if s.ss_mean is not None])
    return EvalReport(
        per_utt=list(per_utt), per_seed=per_seed,
        ter_mean=float(ters.mean()), ter_std=float(ters.std()),
        ss_mean=float(ss_vals.mean()) if ss_vals.size else None,
        ss_std=float(ss_vals.std()) if ss_vals.size else None)


def cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
