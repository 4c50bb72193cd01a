import contextlib
import importlib
import inspect
import io
import pkgutil
import warnings

import numpy as np
import pytest

from ctlm.corpus import build_vocab, corpus_from_single_text

COMMON_WORDS = (
    "the of and to a in is it you that he was for on are as with his they be "
    "at one have this from or had by hot word but what some we can out other "
    "were all there when up use your how said an each she which do their time "
    "if will way about many then them write would like so these her long make "
    "thing see him two has look more day could go come did number sound no "
    "most people my over know water than call first who may down side been now "
    "find any new work part take get place made live where after back little "
    "only round man year came show every good me give our under name very "
    "through just form sentence great think say help low line differ turn "
    "cause much mean before move right boy old too same tell does set three "
    "want air well also play small end put home read hand port large spell add "
    "even land here must big high such follow act why ask men change went "
    "light kind off need house picture try us again animal point mother world "
    "near build self earth father"
).split()


def synthetic_text(n_tokens: int, seed: int = 0) -> str:
    """Deterministic English-like word stream with a Zipf frequency profile."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(COMMON_WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    draws = rng.choice(len(COMMON_WORDS), size=n_tokens, p=probs)
    return " ".join(COMMON_WORDS[i] for i in draws)


@pytest.fixture(scope="session")
def small_corpus():
    """A few thousand tokens for training smoke tests."""
    text = synthetic_text(12_000, seed=1)
    vocab = build_vocab(text, mode="word", max_size=300)
    return vocab, corpus_from_single_text(vocab, text, trunk_length=32)


_DOC_SKIP = ("test", "conftest", "f2py", "distutils", "setup", "__main__")


def harvest_docstring_corpus(packages=("numpy",), min_doc_len: int = 200,
                             max_bytes: int = 5_000_000) -> str:
    """Deterministic multi-megabyte English corpus from installed-package docs.

    The sandbox has no dataset downloads, so the desk-scale experiments train
    on the prose documentation shipped with scientific Python packages.
    Module walk and attribute order are sorted, so the same environment
    always yields byte-identical text.
    """
    texts: list[str] = []
    seen: set[int] = set()
    total = 0
    sink = io.StringIO()
    with warnings.catch_warnings(), contextlib.redirect_stdout(sink), \
            contextlib.redirect_stderr(sink):
        warnings.simplefilter("ignore")
        for pkg_name in packages:
            pkg = importlib.import_module(pkg_name)
            mods = [pkg_name]
            if hasattr(pkg, "__path__"):
                mods += [
                    m.name
                    for m in pkgutil.walk_packages(pkg.__path__, prefix=pkg_name + ".")
                ]
            for name in sorted(set(mods)):
                if any(s in name for s in _DOC_SKIP):
                    continue
                try:
                    mod = importlib.import_module(name)
                except BaseException:
                    continue
                for attr in sorted(dir(mod)):
                    try:
                        obj = getattr(mod, attr)
                    except Exception:
                        continue
                    if not (callable(obj) or inspect.isclass(obj)):
                        continue
                    doc = inspect.getdoc(obj)
                    if doc and len(doc) >= min_doc_len and id(obj) not in seen:
                        seen.add(id(obj))
                        texts.append(doc)
                        total += len(doc) + 2
                if total >= max_bytes:
                    return "\n\n".join(texts)[:max_bytes]
    return "\n\n".join(texts)[:max_bytes]
