"""Repetition, diversity, and perplexity metrics, plus analysis artefacts.

rep-n is the fraction of n-grams in a sequence that are repeats
(1 - distinct/total); the micro-averaged variant pools counts over a dataset
before dividing.  dist-1 and uniq-1 are dataset-level distinct-token rate and
count.  Perplexity is exp of the mean per-token cross-entropy over
non-overlapping windows.
"""

from __future__ import annotations

import numpy as np

from . import corpus as corpus_mod
from .exceptions import ConfigError, InputError
from .losses import log_softmax
from .model import ModelState, forward


def _ngrams(seq, n: int):
    return (tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def rep_counts(seq, n: int) -> tuple[int, int]:
    """(repeated, total) n-gram counts for one sequence."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    seq = list(seq)
    total = max(len(seq) - n + 1, 0)
    if total == 0:
        return 0, 0
    distinct = len(set(_ngrams(seq, n)))
    return total - distinct, total


def rep_n(seq, n: int) -> float:
    repeated, total = rep_counts(seq, n)
    return repeated / total if total else 0.0


def micro_rep_n(sequences, n: int) -> float:
    """Pooled repeated/total n-gram ratio across the dataset."""
    repeated = total = 0
    for seq in sequences:
        r, t = rep_counts(seq, n)
        repeated += r
        total += t
    if total == 0:
        raise InputError("no n-grams in dataset")
    return repeated / total


def dist_1(sequences) -> float:
    """Dataset-level distinct tokens divided by total tokens."""
    total = 0
    distinct = set()
    for seq in sequences:
        seq = list(seq)
        total += len(seq)
        distinct.update(seq)
    if total == 0:
        raise InputError("no tokens in dataset")
    return len(distinct) / total


def uniq_1(sequences) -> int:
    """Dataset-level distinct token count."""
    distinct = set()
    for seq in sequences:
        distinct.update(seq)
    return len(distinct)


def strip_specials(seq, special_ids=corpus_mod.SPECIAL_IDS) -> list[int]:
    drop = set(special_ids)
    return [int(x) for x in seq if int(x) not in drop]


def perplexity(state: ModelState, sequences, window_length: int) -> float:
    """exp(mean cross-entropy) over non-overlapping windows of each sequence.

    The first token of every window is context only.  Windows shorter than 2
    tokens are dropped; having none at all is an error.
    """
    if window_length < 2:
        raise ConfigError(f"window_length must be >= 2, got {window_length}")
    windows: list[list[int]] = []
    for seq in sequences:
        windows.extend(corpus_mod.chunk(seq, window_length))
    if not windows:
        raise InputError("no scorable tokens")

    total_ce = 0.0
    total_tokens = 0
    by_len: dict[int, list[list[int]]] = {}
    for w in windows:
        by_len.setdefault(len(w), []).append(w)
    for length, group in sorted(by_len.items()):
        arr = np.asarray(group)
        _, logits = forward(state, arr[:, :-1])
        logp = log_softmax(logits)
        picked = np.take_along_axis(logp, arr[:, 1:, None], axis=2)[:, :, 0]
        total_ce += float(-picked.sum())
        total_tokens += picked.size
    return float(np.exp(total_ce / total_tokens))


def histogram(values, bins: int = 5) -> list[int]:
    """Equal-width bin counts over [0, 1]; the last bin is closed above."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    counts = [0] * bins
    for v in values:
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise InputError(f"histogram values must lie in [0, 1], got {v}")
        counts[min(int(v * bins), bins - 1)] += 1
    return counts


def prob_heatmap(state: ModelState, ids, prefix=None) -> np.ndarray:
    """Lower-triangular matrix of the model's probabilities over a sequence.

    Entry [t, j] (j <= t) is the probability the distribution at step t
    assigns to token ids[j]; the diagonal is the probability of the token
    actually at that step.  With a context prefix every row is defined;
    without one, row 0 is NaN.  The upper triangle is NaN.
    """
    ids = [int(x) for x in ids]
    prefix = [int(x) for x in (prefix or [])]
    n = len(ids)
    if n + len(prefix) < 2:
        raise InputError("need at least two tokens to build a heat map")
    full = prefix + ids
    _, logits = forward(state, np.asarray(full[:-1])[None, :])
    probs = np.exp(log_softmax(logits[0]))  # row g: distribution after full[:g]

    heat = np.full((n, n), np.nan)
    start = 0 if prefix else 1
    cols = np.asarray(ids)
    for t in range(start, n):
        row = probs[len(prefix) + t - 1]
        heat[t, : t + 1] = row[cols[: t + 1]]
    return heat


def mean_heatmaps(maps) -> np.ndarray:
    """Average heat maps across instances, truncated to the shortest."""
    maps = list(maps)
    if not maps:
        raise InputError("no heat maps to average")
    size = min(m.shape[0] for m in maps)
    return np.mean([m[:size, :size] for m in maps], axis=0)
