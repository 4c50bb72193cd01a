"""Autoregressive generation: greedy, beam, top-k, and nucleus decoding.

All strategies share the same per-step pipeline: n-gram banning first (a
banned token's probability drops to zero), then the strategy's own filtering,
then selection.  Ties always break toward the lowest token id so runs are
bit-reproducible.  Each decode owns its generator state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS_ID
from .exceptions import ConfigError, ContractError
from .losses import log_softmax
from .model import DecodeSession, ModelState

STRATEGIES = ("greedy", "beam", "topk", "nucleus")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 5
    k: int = 50
    top_p: float = 0.9
    max_new_tokens: int = 100
    min_new_tokens: int = 0
    ngram_ban: int | None = None
    seed: int = 0
    eos_id: int = EOS_ID

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if not 0 <= self.min_new_tokens <= self.max_new_tokens:
            raise ConfigError("need 0 <= min_new_tokens <= max_new_tokens")
        if self.ngram_ban is not None and self.ngram_ban < 2:
            raise ConfigError("ngram_ban order must be >= 2")
        return self


@dataclass
class DecodeResult:
    ids: list[int]
    logprobs: list[float] = field(default_factory=list)
    ban_fallbacks: int = 0


def ngram_ban_mask(context, n: int) -> set[int]:
    """Tokens that would complete an n-gram already present in the context."""
    if n < 2:
        raise ConfigError(f"ngram_ban order must be >= 2, got {n}")
    context = [int(x) for x in context]
    if len(context) < n - 1:
        return set()
    suffix = tuple(context[len(context) - (n - 1) :])
    banned = set()
    for i in range(len(context) - n + 1):
        if tuple(context[i : i + n - 1]) == suffix:
            banned.add(context[i + n - 1])
    return banned


def nucleus_pool(prob_row, p: float) -> np.ndarray:
    """Smallest set of tokens, by descending probability, with mass >= p.

    Ties are resolved toward lower ids; the pool is never empty.  p = 1
    selects every token with non-zero probability.
    """
    probs = np.asarray(prob_row, dtype=np.float64)
    if not 0 < p <= 1:
        raise ConfigError("top_p must be in (0, 1]")
    order = np.lexsort((np.arange(probs.size), -probs))
    if p >= 1.0:
        keep = order[probs[order] > 0]
        return keep if keep.size else order[:1]
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p, side="left")) + 1
    return order[:cut]


def _masked_logprobs(logits, banned, mask_eos, eos_id):
    """Raw log-softmax plus a filtered copy with bans applied."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    filtered = logp.copy()
    if mask_eos:
        filtered[eos_id] = -np.inf
    for b in banned:
        filtered[b] = -np.inf
    return logp, filtered


def _sample(rng, ids, probs):
    probs = probs / probs.sum()
    return int(rng.choice(ids, p=probs))


def decode(state: ModelState, prefix_ids, cfg: DecodeConfig, rng=None) -> DecodeResult:
    """Generate up to max_new_tokens continuation ids for one prefix."""
    cfg.validate()
    prefix = [int(x) for x in prefix_ids]
    if not prefix:
        raise ContractError("prefix must be non-empty")
    if len(prefix) + cfg.max_new_tokens > state.config.max_positions:
        raise ContractError(
            f"prefix ({len(prefix)}) plus max_new_tokens ({cfg.max_new_tokens}) "
            f"exceeds max_positions ({state.config.max_positions})"
        )
    if cfg.strategy == "topk" and cfg.k > state.config.vocab_size:
        raise ConfigError(f"k ({cfg.k}) exceeds vocabulary size ({state.config.vocab_size})")
    if cfg.strategy == "beam":
        return _decode_beam(state, prefix, cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    session = DecodeSession(state, np.asarray(prefix)[None, :])
    out = DecodeResult(ids=[])
    context = list(prefix)
    while len(out.ids) < cfg.max_new_tokens:
        banned = ngram_ban_mask(context, cfg.ngram_ban) if cfg.ngram_ban else ()
        mask_eos = len(out.ids) < cfg.min_new_tokens
        logp, filtered = _masked_logprobs(session.last_logits[0], banned, mask_eos, cfg.eos_id)

        if np.isneginf(filtered).all():
            unbanned = logp.copy()
            if mask_eos:
                unbanned[cfg.eos_id] = -np.inf
            tok = int(np.argmax(unbanned))
            out.ban_fallbacks += 1
        elif cfg.strategy == "greedy":
            tok = int(np.argmax(filtered))
        else:
            probs = np.exp(filtered - filtered.max())
            probs /= probs.sum()
            if cfg.strategy == "topk":
                order = np.lexsort((np.arange(probs.size), -probs))[: cfg.k]
                tok = _sample(rng, order, probs[order])
            else:
                pool = nucleus_pool(probs, cfg.top_p)
                tok = _sample(rng, pool, probs[pool])

        out.ids.append(tok)
        out.logprobs.append(float(logp[tok]))
        context.append(tok)
        if tok == cfg.eos_id and len(out.ids) >= cfg.min_new_tokens:
            break
        if len(out.ids) < cfg.max_new_tokens:
            session.step([tok])
    return out


def _decode_beam(state: ModelState, prefix, cfg: DecodeConfig) -> DecodeResult:
    """Width-limited search over pure summed log-probs (no length penalty)."""
    width = cfg.beam_size
    session = DecodeSession(state, np.tile(np.asarray(prefix)[None, :], (width, 1)))
    hyps = [DecodeResult(ids=[]) for _ in range(width)]
    scores = np.zeros(width)
    alive = 1  # all rows identical until the first expansion
    finished: list[tuple[float, int, DecodeResult]] = []
    fallbacks = 0
    exhausted = False

    for step in range(cfg.max_new_tokens):
        vocab = session.last_logits.shape[1]
        mask_eos = step < cfg.min_new_tokens
        cand = np.full((alive, vocab), -np.inf)
        raw = np.empty((alive, vocab))
        for i in range(alive):
            banned = ngram_ban_mask(prefix + hyps[i].ids, cfg.ngram_ban) if cfg.ngram_ban else ()
            logp, filtered = _masked_logprobs(session.last_logits[i], banned, mask_eos, cfg.eos_id)
            raw[i] = logp
            if np.isneginf(filtered).all():
                fallbacks += 1
                filtered = logp  # never abort: fall back to the raw distribution
                if mask_eos:
                    filtered = filtered.copy()
                    filtered[cfg.eos_id] = -np.inf
            cand[i] = scores[i] + filtered

        flat = cand.reshape(-1)
        order = np.argsort(-flat, kind="stable")[: width * 2]
        new_hyps, new_scores, parents, tokens = [], [], [], []
        for idx in order:
            if np.isneginf(flat[idx]):
                break
            parent, tok = divmod(int(idx), vocab)
            ext = DecodeResult(
                ids=hyps[parent].ids + [tok],
                logprobs=hyps[parent].logprobs + [float(raw[parent, tok])],
            )
            if tok == cfg.eos_id:
                finished.append((float(flat[idx]), len(finished), ext))
            else:
                new_hyps.append(ext)
                new_scores.append(float(flat[idx]))
                parents.append(parent)
                tokens.append(tok)
            if len(new_hyps) == width:
                break
        if not new_hyps:
            exhausted = True  # every surviving candidate ended in eos
            break
        alive = len(new_hyps)
        hyps = new_hyps
        scores = np.array(new_scores)
        session.reorder(np.array(parents + [0] * (width - alive)))
        if step + 1 < cfg.max_new_tokens:
            session.step(np.array(tokens + [0] * (width - alive)))

    if not exhausted:
        for i in range(alive):
            finished.append((float(scores[i]), width + i, hyps[i]))
    if not finished:
        raise ContractError("beam search produced no hypotheses")
    finished.sort(key=lambda e: (-e[0], e[1]))
    best = finished[0][2]
    best.ban_fallbacks = fallbacks
    return best
