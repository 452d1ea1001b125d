"""End-to-end orchestration: corpus generation, the three training stages,
synthesis in plain / icl / cross-lingual / instruct modes, seed-averaged
evaluation, k-best re-ranking, and the data-generator augmentation
experiment.

Every command is deterministic given its resolved config; metrics and loss
logs are JSON-lines. Run layout: <run>/{config.resolved, checkpoints/,
samples/, metrics/}.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfm import ConditionSet, FlowConfig, FlowModel, train_flow
from .config import ConfigError, RunConfig
from .evaluate import (EvalReport, UttEval, aggregate_report, cosine,
                       forced_align, levenshtein_counts)
from .lm import LMConfig, LMModel, SamplingPolicy, lm_train
from .numerics import Rng, mix_seed
from .synthdata import (Corpus, LoadedUtt, ManifestRow, TextSeq, make_corpus,
                        read_utterance, speaker_embed, write_utterance)
from .tokenizer import TokenizerConfig, TokenizerModel, train_tokenizer

MODES = ("plain", "icl", "xlang", "instruct")


class MissingArtifactError(Exception):
    """A required upstream artifact does not exist; maps to exit code 3."""


def run_paths(run_dir):
    run_dir = Path(run_dir)
    paths = {
        "run": run_dir,
        "checkpoints": run_dir / "checkpoints",
        "samples": run_dir / "samples",
        "metrics": run_dir / "metrics",
    }
    for p in paths.values():
        p.mkdir(parents=True, exist_ok=True)
    return paths


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec if isinstance(rec, str) else json.dumps(rec, sort_keys=True))
            f.write("\n")


def _load_corpus(cfg: RunConfig) -> Corpus:
    root = Path(cfg.corpus_dir)
    if not (root / "corpus.meta").exists():
        raise MissingArtifactError(
            f"corpus at {root} (run `tokenflow gen-corpus` first)")
    return Corpus(root)


def _n_workers():
    try:
        return max(1, int(os.environ.get("TOKENFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _map_tasks(fn, tasks):
    workers = _n_workers()
    if workers == 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


# ---------------------------------------------------------------------------
# stage configs

def tokenizer_config(cfg: RunConfig, use_vq=True) -> TokenizerConfig:
    return TokenizerConfig(
        dim=cfg.feature_dim, hidden=cfg.enc_hidden, code_dim=cfg.code_dim,
        n_codes=cfg.n_codes, v_text=cfg.text_vocab, decay=cfg.ema_decay,
        commitment=cfg.commitment, dead_threshold=cfg.dead_code_steps,
        use_vq=use_vq, steps=cfg.tokenizer_steps, lr=cfg.tokenizer_lr,
        batch_size=cfg.tokenizer_batch, warmup_steps=cfg.warmup_steps,
        seed=cfg.tokenizer_seed)


def lm_config(cfg: RunConfig) -> LMConfig:
    return LMConfig(
        width=cfg.lm_width, heads=cfg.lm_heads, layers=cfg.lm_layers,
        ffn=cfg.lm_ffn, v_text=cfg.text_vocab, n_codes=cfg.n_codes,
        spk_dim=2 * cfg.feature_dim, steps=cfg.lm_steps, lr=cfg.lm_lr,
        batch_size=cfg.lm_batch, warmup_steps=cfg.warmup_steps,
        instruct_fraction=cfg.instruct_fraction, seed=cfg.lm_seed)


def flow_config(cfg: RunConfig) -> FlowConfig:
    return FlowConfig(
        dim=cfg.feature_dim, spk_dim=2 * cfg.feature_dim,
        tok_dim=cfg.tok_embed_dim, time_dim=cfg.time_embed_dim,
        width=cfg.flow_width, n_codes=cfg.n_codes, sigma=cfg.sigma,
        beta=cfg.beta, p_drop=cfg.cond_dropout, loss=cfg.flow_loss,
        steps=cfg.flow_steps, lr=cfg.flow_lr, batch_size=cfg.flow_batch,
        warmup_steps=cfg.warmup_steps, seed=cfg.flow_seed)


# ---------------------------------------------------------------------------
# commands: corpus and training

def cmd_gen_corpus(cfg: RunConfig, run_dir) -> dict:
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    splits = make_corpus(
        cfg.corpus_dir, n_speakers=cfg.n_speakers, n_utts=cfg.n_utts,
        split_ratios=cfg.split_ratios(), seed=cfg.corpus_seed,
        dim=cfg.feature_dim, v_text=cfg.text_vocab, base_rate=cfg.base_rate,
        noise_sigma=cfg.noise_sigma,
        text_len=(cfg.text_len_min, cfg.text_len_max))
    counts = {k: len(v) for k, v in splits.items()}
    print(f"corpus written to {cfg.corpus_dir}: "
          + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return splits


def _ckpt(paths, name) -> Path:
    return paths["checkpoints"] / f"{name}.tfm"


def _require_ckpt(paths, name) -> Path:
    p = _ckpt(paths, name)
    if not p.exists():
        raise MissingArtifactError(f"checkpoint {p} (train the {name} stage first)")
    return p


def _loss_logger(path, stage):
    f = open(path, "w", encoding="utf-8")

    def log(step, loss):
        f.write(json.dumps({"loss": float(loss), "stage": stage, "step": step},
                           sort_keys=True) + "\n")

    return log, f


def cmd_train(stage: str, cfg: RunConfig, run_dir):
    """Train one stage; lm and cfm require the tokenizer checkpoint."""
    if stage not in ("tokenizer", "lm", "cfm"):
        raise ConfigError(f"unknown training stage {stage!r}")
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    corpus = _load_corpus(cfg)
    rows = corpus.split("train")

    if stage == "tokenizer":
        log, f = _loss_logger(paths["metrics"] / "train_tokenizer.jsonl", "tokenizer")
        with f:
            model, losses = train_tokenizer(rows, tokenizer_config(cfg), on_step=log)
        model.save(_ckpt(paths, "tokenizer"))
        if cfg.train_baseline:
            log, f = _loss_logger(paths["metrics"] / "train_tokenizer_baseline.jsonl",
                                  "tokenizer_baseline")
            with f:
                base, _ = train_tokenizer(rows, tokenizer_config(cfg, use_vq=False),
                                          on_step=log)
            base.save(_ckpt(paths, "tokenizer_baseline"))
        print(f"tokenizer trained: final loss {losses[-1]:.4f}")
        return _ckpt(paths, "tokenizer")

    tok = TokenizerModel.load(_require_ckpt(paths, "tokenizer"))
    if stage == "lm":
        log, f = _loss_logger(paths["metrics"] / "train_lm.jsonl", "lm")
        with f:
            model, losses = lm_train(rows, tok, lm_config(cfg), on_step=log)
        model.save(_ckpt(paths, "lm"))
        print(f"lm trained: final loss {losses[-1]:.4f}")
        return _ckpt(paths, "lm")

    log, f = _loss_logger(paths["metrics"] / "train_cfm.jsonl", "cfm")
    with f:
        model, losses = train_flow(rows, tok, flow_config(cfg), on_step=log)
    model.save(_ckpt(paths, "flow"))
    print(f"flow trained: final loss {losses[-1]:.4f}")
    return _ckpt(paths, "flow")


@dataclass
class Models:
    tokenizer: TokenizerModel
    lm: LMModel
    flow: FlowModel


def load_models(cfg: RunConfig, run_dir) -> Models:
    paths = run_paths(run_dir)
    return Models(TokenizerModel.load(_require_ckpt(paths, "tokenizer")),
                  LMModel.load(_require_ckpt(paths, "lm")),
                  FlowModel.load(_require_ckpt(paths, "flow")))


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class SynthResult:
    features: np.ndarray
    tokens: np.ndarray
    truncated: bool
    mode: str
    seed: int
    prompt: LoadedUtt | None


def _pick_reference(corpus: Corpus, seed: int) -> LoadedUtt:
    rows = corpus.split("train")
    return rows[mix_seed(seed, 0x9EF) % len(rows)]


def synthesize_one(models: Models, corpus: Corpus, cfg: RunConfig, mode: str,
                   text: TextSeq, style=None, prompt: LoadedUtt | None = None,
                   seed: int = 0) -> SynthResult:
    """One utterance through LM sampling and the guided flow sampler."""
    if mode not in MODES:
        raise ConfigError(f"unknown synthesis mode {mode!r}")
    if mode in ("icl", "xlang") and prompt is None:
        raise ConfigError(f"mode {mode!r} requires a prompt utterance")
    if mode == "instruct" and style is None:
        raise ConfigError("instruct mode requires a style")

    lm, flow, tok = models.lm, models.flow, models.tokenizer
    ref = prompt if prompt is not None else _pick_reference(corpus, seed)
    v = speaker_embed(ref.features)
    cap = 4 * len(text) * corpus.base_rate + 32
    policy = SamplingPolicy(temperature=cfg.temperature, top_k=cfg.top_k,
                            max_len=cap, seed=mix_seed(seed, 0x1))

    if mode == "plain":
        prefix = lm.build_icl_sequence(None, None, text, v, "same-language")
    elif mode == "icl":
        prefix = lm.build_icl_sequence(ref.row.text_seq(), tok.tokenize(ref.features),
                                       text, v, "same-language")
    elif mode == "xlang":
        prefix = lm.build_icl_sequence(ref.row.text_seq(), None, text, v,
                                       "cross-lingual")
    else:
        prefix = lm.build_instruct_sequence(style, text)

    gen_tokens, truncated = lm.sample(prefix, policy)
    dim = corpus.dim
    if gen_tokens.size == 0:
        return SynthResult(np.zeros((0, dim)), gen_tokens, truncated, mode, seed, ref)

    flow_rng = Rng(mix_seed(seed, 0xF10))
    if mode == "icl":
        prompt_tokens = tok.tokenize(ref.features)
        all_tokens = np.concatenate([prompt_tokens, gen_tokens])
        masked = np.vstack([ref.features, np.zeros((gen_tokens.size, dim))])
        cond = ConditionSet(v, all_tokens, masked)
        full = flow.solve(cond, cfg.n_ode_steps, cfg.beta, flow_rng)
        feats = full[ref.features.shape[0]:]
    else:
        cond = ConditionSet(v, gen_tokens, np.zeros((gen_tokens.size, dim)))
        feats = flow.solve(cond, cfg.n_ode_steps, cfg.beta, flow_rng)
    return SynthResult(feats, gen_tokens, truncated, mode, seed, ref)


def cmd_synthesize(cfg: RunConfig, run_dir, mode: str, text_ids, lang="A",
                   style=None, prompt_split=None, prompt_index=0, seed=0,
                   name=None) -> Path:
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    corpus = _load_corpus(cfg)
    models = load_models(cfg, run_dir)
    prompt = None
    if prompt_split is not None:
        rows = corpus.split(prompt_split)
        if not 0 <= prompt_index < len(rows):
            raise ConfigError(f"prompt index {prompt_index} outside {prompt_split} split")
        prompt = rows[prompt_index]
    text = TextSeq(tuple(int(t) for t in text_ids), lang)
    res = synthesize_one(models, corpus, cfg, mode, text, style, prompt, seed)
    name = name or f"{mode}_{seed}"
    out = paths["samples"] / f"{name}.bin"
    write_utterance(out, res.features if res.features.size else
                    np.zeros((0, corpus.dim)))
    sidecar = {"mode": mode, "n_frames": int(res.features.shape[0]),
               "n_tokens": int(res.tokens.size), "seed": seed, "style": style,
               "text": list(map(int, text.tokens)), "lang": lang,
               "truncated": bool(res.truncated)}
    (paths["samples"] / f"{name}.json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out} ({res.features.shape[0]} frames"
          + (", truncated" if res.truncated else "") + ")")
    return out


# ---------------------------------------------------------------------------
# evaluation

def _transcribe(tokenizer: TokenizerModel, feats) -> list:
    if feats.shape[0] == 0:
        return []
    return tokenizer.transcribe(feats)


def eval_one(tokenizer: TokenizerModel, name, seed, ref_text, gen_feats,
             prompt_feats=None) -> UttEval:
    hyp = _transcribe(tokenizer, gen_feats)
    c = levenshtein_counts(list(ref_text), hyp)
    ss = None
    if prompt_feats is not None and gen_feats.shape[0] >= 2:
        ss = cosine(speaker_embed(prompt_feats), speaker_embed(gen_feats))
    return UttEval(name=name, seed=int(seed), ins=c.ins, dels=c.dels,
                   subs=c.subs, ref_len=c.ref_len, ss=ss)


def unique_test_texts(corpus: Corpus, n: int, lang=None) -> list:
    """First n distinct held-out texts (as TextSeq), manifest order."""
    seen = set()
    out = []
    for r in corpus.split("test"):
        if lang is not None and r.lang != lang:
            continue
        key = (r.text, r.lang)
        if key in seen:
            continue
        seen.add(key)
        out.append(r.text_seq())
        if len(out) >= n:
            break
    if len(out) < n:
        raise MissingArtifactError(
            f"test split has only {len(out)} distinct texts; need {n}")
    return out


def evaluate_texts(models: Models, corpus: Corpus, cfg: RunConfig, texts,
                   seeds, mode="plain") -> EvalReport:
    """Synthesize every text under every seed and aggregate per seed."""
    tasks = [(i, text, seed) for seed in seeds for i, text in enumerate(texts)]

    def run(task):
        i, text, seed = task
        res = synthesize_one(models, corpus, cfg, mode, text,
                             seed=mix_seed(seed, i))
        return eval_one(models.tokenizer, f"text{i:03d}", seed, text.tokens,
                        res.features, res.prompt.features)

    return aggregate_report(_map_tasks(run, tasks))


def cmd_evaluate(cfg: RunConfig, run_dir, mode="plain") -> EvalReport:
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    corpus = _load_corpus(cfg)
    models = load_models(cfg, run_dir)
    texts = unique_test_texts(corpus, cfg.eval_texts)
    report = evaluate_texts(models, corpus, cfg, texts, cfg.seed_list(), mode)
    _write_jsonl(paths["metrics"] / f"evaluate_{mode}.jsonl", report.jsonl_lines())
    print(f"{mode}: TER {100 * report.ter_mean:.2f}% +- {100 * report.ter_std:.2f}% "
          f"over {len(cfg.seed_list())} seeds"
          + (f", SS {report.ss_mean:.3f}" if report.ss_mean is not None else ""))
    return report


def rerank_texts(models: Models, corpus: Corpus, cfg: RunConfig, texts,
                 seeds, k: int, mode="plain"):
    """Keep the lowest-recognizer-error candidate among k seeds per text.

    Returns (per-seed report over the whole pool, report of the kept set)."""
    if k > len(seeds):
        raise ConfigError(f"rerank k={k} exceeds the {len(seeds)}-seed list")
    pool_seeds = seeds[:k]

    def run(task):
        i, text = task
        evals = []
        for seed in pool_seeds:
            res = synthesize_one(models, corpus, cfg, mode, text,
                                 seed=mix_seed(seed, i))
            evals.append(eval_one(models.tokenizer, f"text{i:03d}", seed,
                                  text.tokens, res.features, res.prompt.features))
        best = min(evals, key=lambda e: (e.ter, pool_seeds.index(e.seed)))
        return evals, UttEval(name=best.name, seed=-1, ins=best.ins,
                              dels=best.dels, subs=best.subs,
                              ref_len=best.ref_len, ss=best.ss)

    results = _map_tasks(run, [(i, t) for i, t in enumerate(texts)])
    singles = [e for evals, _ in results for e in evals]
    kept = [best for _, best in results]
    return aggregate_report(singles), aggregate_report(kept)


def cmd_rerank(cfg: RunConfig, run_dir, mode="plain"):
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    corpus = _load_corpus(cfg)
    models = load_models(cfg, run_dir)
    texts = unique_test_texts(corpus, cfg.eval_texts)
    single, kept = rerank_texts(models, corpus, cfg, texts, cfg.seed_list(),
                                cfg.rerank_k, mode)
    lines = single.jsonl_lines()
    lines.append(json.dumps({"record": "reranked", "k": cfg.rerank_k,
                             "ter": kept.per_seed[0].ter,
                             "ss_mean": kept.ss_mean}, sort_keys=True))
    _write_jsonl(paths["metrics"] / f"rerank_{mode}.jsonl", lines)
    print(f"single-seed mean TER {100 * single.ter_mean:.2f}% -> "
          f"{cfg.rerank_k}x re-ranked {100 * kept.per_seed[0].ter:.2f}%")
    return single, kept


# ---------------------------------------------------------------------------
# data-generator experiment

def _dev_ter(model: TokenizerModel, rows) -> float:
    ins = dels = subs = ref = 0
    for r in rows:
        c = levenshtein_counts(list(r.row.text), _transcribe(model, r.features))
        ins, dels, subs, ref = ins + c.ins, dels + c.dels, subs + c.subs, ref + c.ref_len
    return (ins + dels + subs) / ref if ref else 0.0


def cmd_augment_eval(cfg: RunConfig, run_dir) -> dict:
    """Train fresh recognizers on real, synthetic-only, and real+synthetic
    data with identical budgets; report dev TER for each diet.

    Synthetic utterances reuse the real subset's texts; their frame labels
    come from forced alignment of the main recognizer's posteriors."""
    paths = run_paths(run_dir)
    cfg.write_resolved(paths["run"] / "config.resolved")
    corpus = _load_corpus(cfg)
    models = load_models(cfg, run_dir)

    train_rows = corpus.split("train")
    pick = Rng(mix_seed(cfg.corpus_seed, 0xA06))
    idx = pick.permutation(len(train_rows))[:cfg.augment_subset]
    real = [train_rows[i] for i in idx]

    syn = []
    skipped = 0
    for j, r in enumerate(real):
        res = synthesize_one(models, corpus, cfg, "plain", r.row.text_seq(),
                             seed=mix_seed(0xA61, j))
        text = list(r.row.text)
        if res.features.shape[0] < len(text):
            skipped += 1
            continue
        post = models.tokenizer.frame_posteriors(res.features)
        aligned = forced_align(post, text)
        syn.append(LoadedUtt(ManifestRow(f"syn_{j:04d}", -1, "neutral",
                                         r.row.lang, r.row.text),
                             res.features, aligned))
    if skipped:
        print(f"skipped {skipped} synthetic utterances shorter than their text")

    base = tokenizer_config(cfg, use_vq=False)
    diets = {"real": real, "synthetic": syn, "real+synthetic": real + syn}
    table = {}
    for name in ("real", "synthetic", "real+synthetic"):
        rcfg = TokenizerConfig(**{**base.__dict__, "steps": cfg.augment_steps,
                                  "batch_size": cfg.augment_batch,
                                  "seed": mix_seed(cfg.tokenizer_seed, 0xD1E7)})
        model, _ = train_tokenizer(diets[name], rcfg)
        table[name] = _dev_ter(model, corpus.split("dev"))
    _write_jsonl(paths["metrics"] / "augment.jsonl",
                 [{"dev_ter": table[k], "diet": k} for k in sorted(table)])
    for k in ("real", "synthetic", "real+synthetic"):
        print(f"{k:>15}: dev TER {100 * table[k]:.2f}%")
    return table
