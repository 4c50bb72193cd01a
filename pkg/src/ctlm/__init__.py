"""Contrastive-token training objectives for small autoregressive LMs.

The package trains tiny causal transformers under cross-entropy plus one of
several anti-repetition objectives (a contrastive token margin, token-level
noise-contrastive estimation, or unlikelihood training), decodes with
greedy/beam/top-k/nucleus strategies, and scores repetition, diversity, and
perplexity.  Every loss ships with its closed-form logit gradient and a
finite-difference oracle that verifies it.
"""

from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Corpus,
    EvalInstance,
    Vocabulary,
    build_vocab,
    chunk,
    corpus_from_single_text,
    corpus_from_texts,
    make_eval_instances,
)
from .decoding import DecodeConfig, DecodeResult, decode, ngram_ban_mask, nucleus_pool
from .exceptions import (
    ConfigError,
    ContractError,
    CtlmError,
    FormatError,
    InputError,
    RangeError,
    TrainingError,
)
from .gradients import (
    finite_diff_grad,
    grad_ce,
    grad_ct,
    grad_nce,
    grad_ul,
    gradient_check,
    influence_matrix_check,
)
from .harness import EvalConfig, TrainConfig, comparison_table, evaluate, reference_report, train
from .losses import (
    LossConfig,
    LossReport,
    ce_step,
    ct_step,
    nce_step,
    sequence_loss,
    ul_token_step,
)
from .metrics import dist_1, histogram, micro_rep_n, perplexity, prob_heatmap, rep_n, uniq_1
from .model import (
    AdamConfig,
    AdamState,
    ModelConfig,
    ModelState,
    adam_step,
    backward,
    forward,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .negatives import preceding_all, preceding_m, repeated_ngram_candidates
from .version import __version__

__all__ = [name for name in dir() if not name.startswith("_")]
