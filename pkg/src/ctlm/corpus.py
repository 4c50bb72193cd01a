"""Text ingestion: tokenization, vocabulary, trunk chunking, and eval splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .exceptions import ConfigError, InputError, RangeError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

# ids excluded from negative candidate sets and from metric counts
SPECIAL_IDS = (PAD_ID, BOS_ID, EOS_ID)

_ESCAPE = {"\\": "\\\\", "\n": "\\n", "\t": "\\t", "\r": "\\r"}
_UNESCAPE = {v: k for k, v in _ESCAPE.items()}


def _tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise ConfigError(f"unknown tokenizer mode {mode!r} (expected 'char' or 'word')")


@dataclass
class Vocabulary:
    """Token string <-> integer id mapping.

    Ids are contiguous: the four special tokens occupy 0..3, content tokens
    follow ordered by descending corpus frequency (ties lexicographic).
    """

    tokens: list[str]
    mode: str
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:NUM_SPECIALS] != list(SPECIAL_TOKENS):
            raise ConfigError("vocabulary must start with the four special tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Map text to token ids; out-of-vocabulary tokens become unk."""
        return [self._index.get(tok, UNK_ID) for tok in _tokenize(text, self.mode)]

    def decode(self, ids) -> str:
        """Map ids back to text. Raises RangeError on out-of-range ids."""
        pieces = []
        for i in ids:
            if not 0 <= i < self.size:
                raise RangeError(f"token id {i} outside vocabulary of size {self.size}")
            pieces.append(self.tokens[i])
        sep = "" if self.mode == "char" else " "
        return sep.join(pieces)

    def save(self, path):
        """Write one token per line; line number = id. Control chars are escaped."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                for raw, esc in _ESCAPE.items():
                    tok = tok.replace(raw, esc)
                f.write(tok + "\n")

    @classmethod
    def load(cls, path, mode: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        tokens = []
        for line in lines:
            out, i = [], 0
            while i < len(line):
                if line[i] == "\\" and line[i : i + 2] in _UNESCAPE:
                    out.append(_UNESCAPE[line[i : i + 2]])
                    i += 2
                else:
                    out.append(line[i])
                    i += 1
            tokens.append("".join(out))
        return cls(tokens=tokens, mode=mode)


def build_vocab(text: str, mode: str = "word", max_size: int = 32000) -> Vocabulary:
    """Build a vocabulary from raw text.

    max_size caps the total size including the four specials.  Content tokens
    are ordered by descending frequency, ties broken lexicographically.
    """
    if max_size < NUM_SPECIALS + 1:
        raise ConfigError(f"max_size must be at least {NUM_SPECIALS + 1}, got {max_size}")
    if not text:
        raise InputError("cannot build a vocabulary from empty text")
    counts = Counter(_tokenize(text, mode))
    if not counts:
        raise InputError("text contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - NUM_SPECIALS]]
    return Vocabulary(tokens=list(SPECIAL_TOKENS) + keep, mode=mode)


def chunk(ids, trunk_length: int) -> list[list[int]]:
    """Split a token stream into consecutive non-overlapping trunks.

    Every trunk has exactly trunk_length tokens except possibly the last,
    which is kept only if it has at least 2 tokens.
    """
    if trunk_length < 2:
        raise ConfigError(f"trunk_length must be >= 2, got {trunk_length}")
    ids = list(ids)
    trunks = [ids[i : i + trunk_length] for i in range(0, len(ids), trunk_length)]
    if trunks and len(trunks[-1]) < 2:
        trunks.pop()
    return trunks


@dataclass
class EvalInstance:
    """A generation prompt paired with the human continuation that follows it."""

    prefix: list[int]
    reference_continuation: list[int]


def make_eval_instances(ids, prefix_len: int = 50, cont_len: int = 100) -> list[EvalInstance]:
    """Scan a stream left to right into non-overlapping (prefix, reference) windows."""
    if prefix_len < 1 or cont_len < 1:
        raise ConfigError("prefix_len and cont_len must be positive")
    ids = list(ids)
    span = prefix_len + cont_len
    out = []
    for start in range(0, len(ids) - span + 1, span):
        out.append(
            EvalInstance(
                prefix=ids[start : start + prefix_len],
                reference_continuation=ids[start + prefix_len : start + span],
            )
        )
    return out


@dataclass
class Corpus:
    """Tokenized train/valid/test splits, each a list of fixed-length trunks."""

    train: list[list[int]]
    valid: list[list[int]]
    test: list[list[int]]
    trunk_length: int

    def split(self, name: str) -> list[list[int]]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigError(f"unknown split {name!r}") from None


def corpus_from_texts(
    vocab: Vocabulary,
    train_text: str,
    valid_text: str,
    test_text: str,
    trunk_length: int,
) -> Corpus:
    """Build a corpus from one raw text per split."""
    return Corpus(
        train=chunk(vocab.encode(train_text), trunk_length),
        valid=chunk(vocab.encode(valid_text), trunk_length),
        test=chunk(vocab.encode(test_text), trunk_length),
        trunk_length=trunk_length,
    )


def corpus_from_single_text(
    vocab: Vocabulary,
    text: str,
    trunk_length: int,
    ratios: tuple[float, float, float] = (0.90, 0.05, 0.05),
) -> Corpus:
    """Build a corpus from a single text, splitting by trunk count."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    trunks = chunk(vocab.encode(text), trunk_length)
    n = len(trunks)
    n_train = int(n * ratios[0])
    n_valid = int(n * ratios[1])
    return Corpus(
        train=trunks[:n_train],
        valid=trunks[n_train : n_train + n_valid],
        test=trunks[n_train + n_valid :],
        trunk_length=trunk_length,
    )


def flatten(trunks) -> list[int]:
    """Concatenate trunks back into a single stream (order-preserving)."""
    out: list[int] = []
    for t in trunks:
        out.extend(t)
    return out
