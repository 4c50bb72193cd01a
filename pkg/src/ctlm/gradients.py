"""Closed-form logit gradients for every loss, plus verification oracles.

Each ``grad_*`` function returns the exact derivative of the matching
``*_step`` loss with respect to the full logit row, in float64.  The sign of
an entry determines what gradient descent does to that token's logit: a
negative entry raises the logit (the token is promoted), a positive entry
lowers it (suppressed), a zero entry leaves it untouched.

Expected behaviour per loss:

* cross-entropy: label promoted, every other token suppressed (by p_v)
* contrastive / noise-contrastive: label promoted, window negatives
  suppressed, everything else exactly zero
* unlikelihood: non-negative tokens promoted; a negative token may be
  suppressed or promoted depending on the other negatives' mass, since its
  entry is p_v * (1 - sum p'/(1-p')) whose sign flips once the sum passes 1

``finite_diff_grad`` is the independent oracle used to check all of the
above, and ``influence_matrix_check`` verifies the sign pattern on random
instances.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from . import losses
from .exceptions import ConfigError, ContractError, RangeError
from .losses import PROB_CLAMP, _as_multiset, softmax


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def grad_ce(logit_row, label: int) -> np.ndarray:
    """softmax(z) with 1 subtracted at the label; rows sum to zero."""
    z = np.asarray(logit_row, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise RangeError(f"label {label} outside vocabulary of size {z.shape[-1]}")
    g = softmax(z)
    g[label] -= 1.0
    return g


def grad_ul(logit_row, negatives, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Gradient of the token-level unlikelihood loss.

    For a negative token v: p_v * (1 - sum_{v' in negs, v' != v} p_v'/(1-p_v')).
    For every other token:  -p_v * sum_{v' in negs} p_v'/(1-p_v').
    """
    z = np.asarray(logit_row, dtype=np.float64)
    p = softmax(z)
    negs = sorted(set(int(x) for x in negatives))
    ratio = p / np.maximum(1.0 - p, clamp)
    q = float(ratio[negs].sum()) if negs else 0.0
    g = -p * q
    for v in negs:
        g[v] = p[v] * (1.0 - (q - ratio[v]))
    return g


def grad_ct(logit_row, label: int, negatives) -> np.ndarray:
    """Gradient of the contrastive margin loss.

    With S = sum over occurrences of exp(z_neg - z_label): the label entry is
    -S/(1+S), each negative entry is mult * exp(z_neg - z_label)/(1+S), and
    every other entry is exactly zero.
    """
    z = np.asarray(logit_row, dtype=np.float64)
    negs = _as_multiset(negatives)
    if negs.get(int(label), 0) > 0:
        raise ContractError(f"label {label} must not appear in its own negative set")
    g = np.zeros_like(z)
    if not negs:
        return g
    ids = np.array(sorted(negs), dtype=np.int64)
    mults = np.array([negs[int(v)] for v in ids], dtype=np.float64)
    terms = z[ids] - z[label]
    m = max(0.0, float(terms.max()))
    w = mults * np.exp(terms - m)
    denom = math.exp(-m) + w.sum()
    w /= denom
    g[ids] = w
    g[label] = -w.sum()
    return g


def grad_nce(logit_row, label: int, negatives) -> np.ndarray:
    """Gradient of the averaged noise-contrastive loss.

    Label entry: -sigmoid(-z_label).  Negative entry: (mult/N) *
    sigmoid(z_neg) with N the total occurrence count.  Zero elsewhere.
    """
    z = np.asarray(logit_row, dtype=np.float64)
    negs = _as_multiset(negatives)
    g = np.zeros_like(z)
    g[label] = -_sigmoid(-float(z[label]))
    n = sum(negs.values())
    for v, mult in negs.items():
        g[v] += mult * _sigmoid(float(z[v])) / n
    return g


def finite_diff_grad(loss_fn, logit_row, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient (L(z + h e_v) - L(z - h e_v)) / 2h."""
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    z = np.asarray(logit_row, dtype=np.float64)
    g = np.zeros_like(z)
    for v in range(z.shape[-1]):
        zp, zm = z.copy(), z.copy()
        zp[v] += h
        zm[v] -= h
        g[v] = (loss_fn(zp) - loss_fn(zm)) / (2.0 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _random_instance(rng, vocab_max: int = 50, logit_std: float = 2.0, max_mult: int = 3):
    v = int(rng.integers(4, vocab_max + 1))
    z = rng.normal(0.0, logit_std, size=v)
    label = int(rng.integers(0, v))
    pool = [i for i in range(v) if i != label]
    k = int(rng.integers(0, min(len(pool), 6) + 1))
    chosen = rng.choice(pool, size=k, replace=False) if k else []
    negs = Counter()
    for c in chosen:
        negs[int(c)] = int(rng.integers(1, max_mult + 1))
    return z, label, negs


def oracle_loss_fn(kind: str, label: int, negatives):
    """Independent loss evaluator for the finite-difference oracle.

    Re-derives each loss from scratch in extended precision (log1p forms,
    ``np.longdouble``) so the oracle's own rounding noise sits far below the
    tolerances it arbitrates.  Central differencing then happens in the
    evaluator's precision; only the final quotient is rounded to float64.
    """
    ld = np.longdouble
    negs = _as_multiset(negatives)
    ids = np.array(sorted(negs), dtype=np.int64)
    mults = np.array([negs[int(v)] for v in ids], dtype=ld)

    if kind == "ce":
        def fn(z):
            z = np.asarray(z, dtype=ld)
            m = z.max()
            return m + np.log(np.exp(z - m).sum()) - z[label]
    elif kind == "ul":
        def fn(z):
            z = np.asarray(z, dtype=ld)
            m = z.max()
            p = np.exp(z - m)
            p /= p.sum()
            return -np.log1p(-p[ids]).sum() if ids.size else ld(0.0)
    elif kind == "ct":
        def fn(z):
            z = np.asarray(z, dtype=ld)
            if not ids.size:
                return ld(0.0)
            return np.log1p((mults * np.exp(z[ids] - z[label])).sum())
    elif kind == "nce":
        def fn(z):
            z = np.asarray(z, dtype=ld)
            val = np.log1p(np.exp(-z[label]))
            if ids.size:
                val = val + (mults * np.log1p(np.exp(z[ids]))).sum() / mults.sum()
            return val
    else:
        raise ConfigError(f"unknown loss kind {kind!r} (expected ce, ul, ct, or nce)")
    return fn


def _analytic_grad(kind: str, z, label, negs) -> np.ndarray:
    if kind == "ce":
        return grad_ce(z, label)
    if kind == "ul":
        return grad_ul(z, set(negs))
    if kind == "ct":
        return grad_ct(z, label, negs)
    if kind == "nce":
        return grad_nce(z, label, negs)
    raise ConfigError(f"unknown loss kind {kind!r} (expected ce, ul, ct, or nce)")


def gradient_check(kind: str, trials: int = 100, seed: int = 0, h: float = 1e-5) -> dict:
    """Compare analytic gradients to the finite-difference oracle.

    Returns max relative error over all trials, ignoring entries where both
    sides are below 1e-10 in magnitude.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z, label, negs = _random_instance(rng)
        analytic = _analytic_grad(kind, z, label, negs)
        fd = finite_diff_grad(oracle_loss_fn(kind, label, negs), z, h)
        significant = np.maximum(np.abs(analytic), np.abs(fd)) >= 1e-10
        if significant.any():
            worst = max(worst, float(rel_err(analytic, fd)[significant].max()))
    return {"loss": kind, "trials": trials, "max_rel_err": worst}


def influence_matrix_check(kind: str, trials: int = 1000, seed: int = 0) -> dict:
    """Verify the sign pattern of each loss's gradient on random instances.

    Reports violations by trial index.  For unlikelihood the report also
    counts how many negative-token entries came out positive (suppressed)
    versus negative (promoted); a healthy run observes both.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    violations = []
    ul_neg_signs = {"suppressed": 0, "promoted": 0}

    for trial in range(trials):
        z, label, negs = _random_instance(rng)
        neg_ids = sorted(negs)
        if kind == "ce":
            g = grad_ce(z, label)
            if g[label] > 0:
                violations.append((trial, "label grad > 0"))
            others = np.delete(g, label)
            if (others < 0).any():
                violations.append((trial, "non-label grad < 0"))
        elif kind in ("ct", "nce"):
            g = grad_ct(z, label, negs) if kind == "ct" else grad_nce(z, label, negs)
            if g[label] > 0:
                violations.append((trial, "positive-token grad > 0"))
            if any(g[v] < 0 for v in neg_ids):
                violations.append((trial, "negative-token grad < 0"))
            irrelevant = np.delete(g, [label] + neg_ids)
            if (irrelevant != 0.0).any():
                violations.append((trial, "irrelevant grad != 0"))
        elif kind == "ul":
            g = grad_ul(z, neg_ids)
            non_neg = np.delete(g, neg_ids) if neg_ids else g
            if (non_neg > 0).any():
                violations.append((trial, "non-negative-token grad > 0"))
            for v in neg_ids:
                ul_neg_signs["suppressed" if g[v] > 0 else "promoted"] += 1
        else:
            raise ConfigError(f"unknown loss kind {kind!r}")

    report = {
        "loss": kind,
        "trials": trials,
        "sign_violations": len(violations),
        "violation_details": violations[:10],
    }
    if kind == "ul":
        report["negative_token_signs"] = ul_neg_signs
    return report


def gradcheck_report(kind: str, trials: int = 100, seed: int = 0) -> dict:
    """Combined report for the gradcheck CLI: oracle error plus sign checks."""
    fd = gradient_check(kind, trials=trials, seed=seed)
    signs = influence_matrix_check(kind, trials=max(trials, 1), seed=seed)
    out = {
        "loss": kind,
        "trials": trials,
        "max_rel_err": fd["max_rel_err"],
        "sign_violations": signs["sign_violations"],
    }
    if "negative_token_signs" in signs:
        out["negative_token_signs"] = signs["negative_token_signs"]
    return out
