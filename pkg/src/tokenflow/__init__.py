"""Desk-scale speech-token generation pipeline.

A recognition-supervised vector-quantized tokenizer, an autoregressive token
language model with prompt-based in-context learning, and an optimal-transport
conditional flow-matching decoder with classifier-free guidance, trained and
verified on synthetic sequence data.
"""

from .cfm import (ConditionSet, FlowConfig, FlowModel, cfg_field,
                  cosine_schedule, drop_conditions, mask_features, ot_path,
                  ot_target, solve, train_flow)
from .config import ConfigError, RunConfig
from .evaluate import (EvalReport, aggregate_report, forced_align,
                       levenshtein_counts, token_error_rate)
from .lm import (LMConfig, LMModel, LMSequence, SamplingPolicy, Slot,
                 build_sequence, lm_train, separator_id, style_token_id)
from .numerics import (ParamStore, Rng, adam_step, dense_forward, grad_check,
                       mix_seed, sinusoid_posenc, softmax_ce)
from .synthdata import (STYLES, Corpus, SpeakerProfile, StyleTag, TextSeq,
                        Utterance, collapse_runs, make_corpus, make_speaker,
                        read_utterance, render, speaker_embed, write_utterance)
from .tokenizer import (Codebook, TokenizerConfig, TokenizerModel, ema_update,
                        quantize, train_tokenizer)

__version__ = "0.1.0"
