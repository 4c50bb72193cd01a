"""Negative-token candidate sets for the anti-repetition objectives.

Three flavours:

* ``preceding_all``   -- every distinct earlier token (token-level unlikelihood)
* ``preceding_m``     -- the last M tokens as a multiset, duplicates kept
  (contrastive-token and noise-contrastive objectives)
* ``repeated_ngram_candidates`` -- positions whose trailing n-gram already
  occurred (sequence-level unlikelihood on decoded continuations)

The label token at a position is never a candidate there, and neither are the
pad/bos/eos markers.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .corpus import SPECIAL_IDS
from .exceptions import ConfigError


def preceding_all(labels, t: int, special_ids=SPECIAL_IDS) -> set[int]:
    """Distinct ids occurring before position t, minus the label and specials."""
    if t <= 0:
        return set()
    cands = set(int(x) for x in labels[:t])
    cands.discard(int(labels[t]))
    cands.difference_update(special_ids)
    return cands


def preceding_m(labels, t: int, m: int, special_ids=SPECIAL_IDS) -> Counter:
    """The last m tokens before position t as a multiset.

    Every occurrence equal to the label at t is removed, as are specials;
    remaining duplicates keep their multiplicity.  Windows truncate at the
    sequence start.
    """
    if m < 1:
        raise ConfigError(f"negative window must be >= 1, got {m}")
    if t <= 0:
        return Counter()
    label = int(labels[t])
    window = Counter(int(x) for x in labels[max(0, t - m) : t])
    del window[label]
    for s in special_ids:
        del window[s]
    return window


def repeated_ngram_candidates(sequence, n: int = 4) -> list[bool]:
    """Flag each position whose trailing n-gram occurred earlier in the sequence.

    A flagged position yields its own token as the negative candidate for
    that step.
    """
    if n < 2:
        raise ConfigError(f"n-gram order must be >= 2, got {n}")
    sequence = [int(x) for x in sequence]
    flags = [False] * len(sequence)
    seen: set[tuple[int, ...]] = set()
    for end in range(n - 1, len(sequence)):
        gram = tuple(sequence[end - n + 1 : end + 1])
        if gram in seen:
            flags[end] = True
        seen.add(gram)
    return flags


def preceding_m_windows(labels: np.ndarray, m: int, special_ids=SPECIAL_IDS):
    """Vectorised ``preceding_m`` over a whole [batch, time] label matrix.

    Returns ``(ids, valid)`` of shape [batch, time, m]: ``ids[b, t, j]`` is
    the label at position t-m+j (0 where out of range) and ``valid`` marks
    entries that survive the label/special removal.  Each surviving entry is
    one multiset occurrence.
    """
    if m < 1:
        raise ConfigError(f"negative window must be >= 1, got {m}")
    b, t = labels.shape
    offsets = np.arange(-m, 0)
    pos = np.arange(t)[:, None] + offsets[None, :]  # [t, m]
    in_range = pos >= 0
    gather = np.where(in_range, pos, 0)
    ids = labels[:, gather]  # [b, t, m]
    valid = np.broadcast_to(in_range, ids.shape) & (ids != labels[:, :, None])
    for s in special_ids:
        valid = valid & (ids != s)
    return ids, valid
