"""Per-step training losses and the batched sequence objective.

All objectives decompose per time step into a cross-entropy term plus an
optional anti-repetition term:

* ``ce``      -- cross-entropy only
* ``ce+ct``   -- adds a contrastive margin between the label logit and the
  logits of recently seen tokens: log(1 + sum exp(z_neg - z_label))
* ``ce+nce``  -- adds a binary noise-contrastive term on the same window:
  -log sigmoid(z_label) - mean(log sigmoid(-z_neg))
* ``ul-t``    -- adds token-level unlikelihood over all preceding tokens:
  -sum log(1 - p(neg))
* ``ul-ts``   -- ul-t here; the training loop adds the sequence-level
  unlikelihood term on decoded continuations after its switch step

Row-level functions compute one position over the full vocabulary and are the
reference semantics; ``sequence_loss`` is the vectorised batch version used
in training and returns the loss gradient w.r.t. the logits.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import SPECIAL_IDS
from .exceptions import ConfigError, ContractError, RangeError
from .negatives import preceding_m_windows

OBJECTIVES = ("ce", "ce+ct", "ce+nce", "ul-t", "ul-ts")

PROB_CLAMP = 1e-12


@dataclass
class LossConfig:
    objective: str = "ce"
    ct_crop_length: int = 32
    negative_window: int = 16
    ul_seq_ngram: int = 4
    prob_clamp: float = PROB_CLAMP

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective in ("ce+ct", "ce+nce"):
            if self.ct_crop_length < 1:
                raise ConfigError("ct_crop_length must be >= 1 for contrastive objectives")
            if self.negative_window < 1:
                raise ConfigError("negative_window must be >= 1")
        if self.ul_seq_ngram < 2:
            raise ConfigError("ul_seq_ngram must be >= 2")
        if not 0 < self.prob_clamp < 1:
            raise ConfigError("prob_clamp must be in (0, 1)")
        return self


@dataclass
class LossReport:
    total: float
    ce_component: float
    aux_component: float
    tokens_counted: int


def _as_multiset(negatives) -> Counter:
    if isinstance(negatives, Counter):
        return negatives
    if isinstance(negatives, dict):
        return Counter(negatives)
    return Counter(int(x) for x in negatives)


def softplus(x: float) -> float:
    """log(1 + e^x), safe for large |x|."""
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def ce_step(logit_row, label: int) -> float:
    """Negative log-probability of the label under softmax(logits)."""
    z = np.asarray(logit_row, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise RangeError(f"label {label} outside vocabulary of size {z.shape[-1]}")
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return float(lse - z[label])


def ul_token_step(prob_row, negatives, clamp: float = PROB_CLAMP) -> float:
    """Unlikelihood penalty -sum log(1 - p) over the negative set."""
    p = np.asarray(prob_row, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(f"prob_row must sum to 1 (got {p.sum():.8f})")
    total = 0.0
    for v in set(int(x) for x in negatives):
        total -= math.log(max(1.0 - p[v], clamp))
    return total


def ct_step(logit_row, label: int, negatives) -> float:
    """Contrastive margin log(1 + sum exp(z_neg - z_label)).

    Negatives form a multiset; each occurrence contributes its own term, so a
    token seen twice in the window is pushed down harder than one seen once.
    Computed with the dominant exponent factored out so huge margins do not
    overflow.
    """
    z = np.asarray(logit_row, dtype=np.float64)
    negs = _as_multiset(negatives)
    if negs.get(int(label), 0) > 0:
        raise ContractError(f"label {label} must not appear in its own negative set")
    if not negs:
        return 0.0
    z_pos = float(z[label])
    terms = np.array([z[v] - z_pos for v in negs], dtype=np.float64)
    mults = np.array([negs[v] for v in negs], dtype=np.float64)
    m = max(0.0, float(terms.max()))
    s = float((mults * np.exp(terms - m)).sum())
    if m == 0.0:
        return math.log1p(s)
    return m + math.log(math.exp(-m) + s)


def nce_step(logit_row, label: int, negatives) -> float:
    """Binary noise-contrastive loss with the negative term averaged.

    -log sigmoid(z_label) - (1/N) sum -log sigmoid(-z_neg) over the N
    occurrences in the multiset, via the softplus identity
    -log sigmoid(x) = softplus(-x).
    """
    z = np.asarray(logit_row, dtype=np.float64)
    negs = _as_multiset(negatives)
    loss = softplus(-float(z[label]))
    n = sum(negs.values())
    if n:
        loss += sum(mult * softplus(float(z[v])) for v, mult in negs.items()) / n
    return loss


def _ce_batch(logits, labels, mask):
    """Mean masked cross-entropy and its un-normalised logit gradient."""
    logp = log_softmax(logits)
    b, t = labels.shape
    picked = np.take_along_axis(logp, labels[:, :, None], axis=2)[:, :, 0]
    ce_sum = float(-(picked * mask).sum())
    grad = np.exp(logp)
    np.subtract.at(grad.reshape(b * t, -1), (np.arange(b * t), labels.reshape(-1)), 1.0)
    grad *= mask[:, :, None]
    return ce_sum, grad, np.exp(logp)


def _ct_batch(logits, labels, aux_mask, window):
    """Contrastive term summed over aux positions, plus its logit gradient."""
    ids, valid = preceding_m_windows(labels, window)
    valid = valid & aux_mask[:, :, None]
    z_pos = np.take_along_axis(logits, labels[:, :, None], axis=2)[:, :, 0]
    z_neg = np.take_along_axis(logits, ids, axis=2)
    terms = np.where(valid, z_neg - z_pos[:, :, None], -np.inf)
    m = np.maximum(terms.max(axis=2, initial=-np.inf), 0.0)
    expterms = np.where(valid, np.exp(terms - m[:, :, None]), 0.0)
    s = expterms.sum(axis=2)
    loss_rows = m + np.log(np.exp(-m) + s)
    loss_sum = float(loss_rows[aux_mask].sum())

    w = expterms / (np.exp(-m) + s)[:, :, None]
    grad = np.zeros_like(logits)
    b, t, _ = ids.shape
    bb, tt, jj = np.nonzero(valid)
    np.add.at(grad, (bb, tt, ids[bb, tt, jj]), w[bb, tt, jj])
    np.subtract.at(grad.reshape(b * t, -1), (np.arange(b * t), labels.reshape(-1)), w.sum(axis=2).reshape(-1))
    return loss_sum, grad


def _nce_batch(logits, labels, aux_mask, window):
    ids, valid = preceding_m_windows(labels, window)
    valid = valid & aux_mask[:, :, None]
    z_pos = np.take_along_axis(logits, labels[:, :, None], axis=2)[:, :, 0]
    z_neg = np.take_along_axis(logits, ids, axis=2)

    pos_loss = np.maximum(-z_pos, 0.0) + np.log1p(np.exp(-np.abs(z_pos)))
    neg_loss = np.maximum(z_neg, 0.0) + np.log1p(np.exp(-np.abs(z_neg)))
    counts = valid.sum(axis=2)
    safe = np.maximum(counts, 1)
    loss_rows = pos_loss + np.where(valid, neg_loss, 0.0).sum(axis=2) / safe
    loss_sum = float(loss_rows[aux_mask].sum())

    grad = np.zeros_like(logits)
    b, t, _ = ids.shape
    sig_pos = 1.0 / (1.0 + np.exp(z_pos))  # sigmoid(-z_pos)
    np.subtract.at(
        grad.reshape(b * t, -1),
        (np.arange(b * t), labels.reshape(-1)),
        (sig_pos * aux_mask).reshape(-1),
    )
    sig_neg = 1.0 / (1.0 + np.exp(-z_neg))  # sigmoid(z_neg)
    w = np.where(valid, sig_neg, 0.0) / safe[:, :, None]
    bb, tt, jj = np.nonzero(valid)
    np.add.at(grad, (bb, tt, ids[bb, tt, jj]), w[bb, tt, jj])
    return loss_sum, grad


def _ul_batch(logits, labels, mask, probs, clamp):
    """Token-level unlikelihood over the full preceding-token set per position."""
    b, t, v = logits.shape
    onehot = np.zeros((b, t, v), dtype=bool)
    onehot[np.arange(b)[:, None], np.arange(t)[None, :], labels] = True
    seen_before = np.zeros_like(onehot)
    seen_before[:, 1:, :] = np.logical_or.accumulate(onehot, axis=1)[:, :-1, :]
    negmask = seen_before & ~onehot
    negmask[:, :, list(SPECIAL_IDS)] = False
    negmask &= mask[:, :, None]

    one_minus = np.maximum(1.0 - probs, clamp)
    loss_sum = float(-(np.log(one_minus) * negmask).sum())

    r = probs / one_minus
    q = (r * negmask).sum(axis=2, keepdims=True)
    grad = np.where(negmask, probs * (1.0 - q + r), -probs * q)
    grad *= mask[:, :, None]
    return loss_sum, grad


def sequence_loss(logits, labels, mask, cfg: LossConfig, with_grad: bool = True):
    """Batched objective over [batch, time, vocab] logits.

    Cross-entropy is averaged over all unmasked positions.  The contrastive
    or noise-contrastive term is computed only on the first
    ``ct_crop_length`` positions of each row (reusing the same logits) and
    averaged over those; unlikelihood runs over all unmasked positions.
    Returns ``(LossReport, dL/dlogits)`` (gradient ``None`` when
    ``with_grad`` is false).
    """
    cfg.validate()
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 3 or labels.shape != logits.shape[:2] or mask.shape != labels.shape:
        raise ContractError(
            f"shape mismatch: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[2]):
        raise RangeError("labels contain ids outside the vocabulary")
    n_ce = int(mask.sum())
    if n_ce == 0:
        raise ContractError("no tokens counted: every position is masked")

    ce_sum, ce_grad, probs = _ce_batch(logits, labels, mask)
    ce_mean = ce_sum / n_ce
    grad = ce_grad / n_ce if with_grad else None

    aux_mean = 0.0
    if cfg.objective in ("ce+ct", "ce+nce"):
        t = labels.shape[1]
        aux_mask = mask & (np.arange(t)[None, :] < cfg.ct_crop_length)
        n_aux = int(aux_mask.sum())
        if n_aux > 0:
            batch_fn = _ct_batch if cfg.objective == "ce+ct" else _nce_batch
            aux_sum, aux_grad = batch_fn(logits, labels, aux_mask, cfg.negative_window)
            aux_mean = aux_sum / n_aux
            if with_grad:
                grad += aux_grad / n_aux
    elif cfg.objective in ("ul-t", "ul-ts"):
        aux_sum, aux_grad = _ul_batch(logits, labels, mask, probs, cfg.prob_clamp)
        aux_mean = aux_sum / n_ce
        if with_grad:
            grad += aux_grad / n_ce

    report = LossReport(
        total=ce_mean + aux_mean,
        ce_component=ce_mean,
        aux_component=aux_mean,
        tokens_counted=n_ce,
    )
    return report, grad


def ul_seq_loss(logits, labels, flags, clamp: float = PROB_CLAMP):
    """Sequence-level unlikelihood on a decoded continuation.

    ``flags`` marks positions whose token completes a repeated n-gram; each
    flagged token is penalised as its own negative: -log(1 - p(token)).
    Returns the mean loss over flagged positions and its logit gradient
    (both zero when nothing is flagged).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    flags = np.asarray(flags, dtype=bool)
    if logits.ndim != 3 or labels.shape != logits.shape[:2] or flags.shape != labels.shape:
        raise ContractError("shape mismatch in sequence-level unlikelihood")
    n = int(flags.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad

    probs = softmax(logits)
    p_tok = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    one_minus = np.maximum(1.0 - p_tok, clamp)
    loss = float(-(np.log(one_minus) * flags).sum()) / n

    # d/dz of -log(1 - p_label): label entry p(1 - r) with r = p/(1-p) for a
    # single negative; other entries -p_v * r
    r = np.where(flags, p_tok / one_minus, 0.0)
    grad = -probs * r[:, :, None]
    b, t, _ = logits.shape
    np.add.at(
        grad.reshape(b * t, -1),
        (np.arange(b * t), labels.reshape(-1)),
        (np.where(flags, p_tok * (1.0 + r), 0.0)).reshape(-1),
    )
    grad /= n
    return loss, grad
