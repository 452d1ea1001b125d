"""Flat key=value run configuration: strict parsing (unknown keys rejected),
typed defaults, and a canonical resolved form written beside every run's
outputs so experiments stay reproducible and diffable.
"""

from pathlib import Path


class ConfigError(Exception):
    """Bad configuration; maps to exit code 2."""


DEFAULTS = {
    # corpus
    "corpus_dir": "corpus",
    "n_speakers": 10,
    "n_utts": 1000,
    "split_train": 0.8,
    "split_dev": 0.1,
    "split_test": 0.1,
    "corpus_seed": 1234,
    "feature_dim": 8,
    "text_vocab": 32,
    "base_rate": 4,
    "noise_sigma": 0.05,
    "text_len_min": 4,
    "text_len_max": 10,
    # optimization (shared)
    "warmup_steps": 200,
    # tokenizer stage
    "enc_hidden": 32,
    "code_dim": 16,
    "n_codes": 64,
    "ema_decay": 0.99,
    "commitment": 0.25,
    "dead_code_steps": 200,
    "tokenizer_steps": 2000,
    "tokenizer_lr": 1e-3,
    "tokenizer_batch": 8,
    "tokenizer_seed": 7,
    "train_baseline": 1,
    # language-model stage
    "lm_width": 64,
    "lm_heads": 4,
    "lm_layers": 2,
    "lm_ffn": 128,
    "lm_steps": 3000,
    "lm_lr": 1e-3,
    "lm_batch": 4,
    "lm_seed": 7,
    "instruct_fraction": 0.5,
    "temperature": 1.0,
    "top_k": 0,
    # flow stage
    "flow_width": 64,
    "tok_embed_dim": 16,
    "time_embed_dim": 16,
    "sigma": 1e-4,
    "beta": 0.7,
    "cond_dropout": 0.2,
    "flow_loss": "l1",
    "flow_steps": 3000,
    "flow_lr": 1e-3,
    "flow_batch": 4,
    "flow_seed": 7,
    "n_ode_steps": 10,
    # evaluation
    "seeds": "0,7,42,123,1337",
    "eval_texts": 50,
    "rerank_k": 5,
    # data-generator experiment
    "augment_subset": 150,
    "augment_steps": 500,
    "augment_batch": 8,
}


class RunConfig:
    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[k] = _coerce(k, v)

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def with_overrides(self, **kw) -> "RunConfig":
        merged = dict(self._values)
        for k, v in kw.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        return RunConfig(merged)

    def seed_list(self) -> list:
        try:
            return [int(s) for s in str(self.seeds).split(",") if s.strip() != ""]
        except ValueError as e:
            raise ConfigError(f"bad seeds list {self.seeds!r}") from e

    def split_ratios(self):
        r = (self.split_train, self.split_dev, self.split_test)
        if abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        return r

    def resolved_text(self) -> str:
        return "".join(f"{k}={self._values[k]}\n" for k in sorted(self._values))

    def write_resolved(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.resolved_text(), encoding="utf-8")

    @staticmethod
    def load(path) -> "RunConfig":
        values = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return RunConfig(values)


def _coerce(key, value):
    want = type(DEFAULTS[key])
    if isinstance(value, str) and want is not str:
        try:
            value = want(value) if want is not float else float(value)
        except ValueError as e:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from e
    if want is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, want):
        raise ConfigError(f"config key {key!r}: expected {want.__name__}")
    return value
