from collections import Counter

import numpy as np
import pytest

from ctlm.exceptions import ConfigError
from ctlm.negatives import (
    preceding_all,
    preceding_m,
    preceding_m_windows,
    repeated_ngram_candidates,
)

# content-token alphabet clear of the special ids 0..3
A, B, C, D = 10, 11, 12, 13


class TestPrecedingAll:
    def test_definitional(self):
        assert preceding_all([A, B, A, C], 3) == {A, B}

    def test_label_excluded(self):
        assert preceding_all([A, A, A], 2) == set()

    def test_start_of_sequence(self):
        assert preceding_all([A, B], 0) == set()

    def test_specials_excluded(self):
        assert preceding_all([0, 1, 2, A, B], 4) == {A}

    def test_label_never_member(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            seq = rng.integers(0, 12, size=rng.integers(1, 20))
            t = int(rng.integers(0, len(seq)))
            assert int(seq[t]) not in preceding_all(seq, t)


class TestPrecedingM:
    def test_all_label_occurrences_removed(self):
        assert preceding_m([A, B, A, C, A], 4, 4) == Counter({B: 1, C: 1})

    def test_duplicates_kept(self):
        assert preceding_m([B, B, C, A], 3, 3) == Counter({B: 2, C: 1})

    def test_start_of_sequence(self):
        assert preceding_m([A, B, C], 0, 5) == Counter()

    def test_window_truncates(self):
        assert preceding_m([A, B, C, D], 3, 2) == Counter({B: 1, C: 1})

    def test_invalid_window(self):
        with pytest.raises(ConfigError):
            preceding_m([A, B], 1, 0)

    def test_multiset_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            seq = rng.integers(0, 12, size=rng.integers(1, 24))
            t = int(rng.integers(0, len(seq)))
            m = int(rng.integers(1, 10))
            negs = preceding_m(seq, t, m)
            assert int(seq[t]) not in negs
            assert sum(negs.values()) <= m
            assert all(mult >= 1 for mult in negs.values())

    def test_covers_preceding_all_when_window_spans(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            seq = rng.integers(0, 12, size=rng.integers(1, 20))
            t = int(rng.integers(0, len(seq)))
            assert set(preceding_m(seq, t, max(t, 1))) == preceding_all(seq, t)


class TestRepeatedNgramCandidates:
    def test_bigram_example(self):
        flags = repeated_ngram_candidates([A, B, A, B, A, B], n=2)
        assert flags == [False, False, False, True, True, True]

    def test_all_distinct(self):
        assert not any(repeated_ngram_candidates([A, B, C, D], n=2))

    def test_too_short(self):
        assert repeated_ngram_candidates([A, B, C], n=4) == [False, False, False]

    def test_order_validation(self):
        with pytest.raises(ConfigError):
            repeated_ngram_candidates([A, B], n=1)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            seq = [int(x) for x in rng.integers(0, 5, size=rng.integers(0, 25))]
            n = int(rng.integers(2, 5))
            flags = repeated_ngram_candidates(seq, n)
            for t in range(len(seq)):
                gram = tuple(seq[t - n + 1 : t + 1]) if t >= n - 1 else None
                earlier = any(
                    tuple(seq[s : s + n]) == gram for s in range(0, t - n + 1)
                )
                assert flags[t] == (gram is not None and earlier)


class TestWindowedBatch:
    def test_matches_scalar_semantics(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            labels = rng.integers(0, 12, size=(3, int(rng.integers(2, 16))))
            m = int(rng.integers(1, 8))
            ids, valid = preceding_m_windows(labels, m)
            for b in range(labels.shape[0]):
                for t in range(labels.shape[1]):
                    got = Counter(int(i) for i, ok in zip(ids[b, t], valid[b, t]) if ok)
                    assert got == preceding_m(labels[b], t, m)
