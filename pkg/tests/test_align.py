import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packfuse.align import (
    AlignedScorer,
    VocabMap,
    build_vocab_map,
    edit_distance,
    remap_logits,
    remap_sequence,
    select_reference,
)
from packfuse.errors import DimensionMismatch, VocabMismatch
from packfuse.fusion import rank_by_ppl
from packfuse.scorer import TableModel, Vocabulary


def dp_matrix(a, b):
    """Full (len(a)+1) x (len(b)+1) Levenshtein table."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def random_vocab(rng, size, alphabet="abcde", name=None):
    tokens = set()
    while len(tokens) < size:
        tokens.add("".join(rng.choice(alphabet) for _ in range(rng.randint(1, 5))))
    return Vocabulary(tuple(sorted(tokens)), name=name)


class TestEditDistance:
    def test_paper_example(self):
        assert edit_distance("get", "gets") == 1

    def test_identity_and_empty(self):
        assert edit_distance("token", "token") == 0
        assert edit_distance("", "abc") == 3
        assert edit_distance("abc", "") == 3

    def test_unicode_code_points(self):
        assert edit_distance("héllo", "hello") == 1
        assert edit_distance("▁the", "the") == 1

    @settings(max_examples=300, deadline=None)
    @given(st.text("abcd", max_size=8), st.text("abcd", max_size=8))
    def test_matches_dp_oracle(self, a, b):
        assert edit_distance(a, b) == dp_matrix(a, b)

    @settings(max_examples=300, deadline=None)
    @given(st.text("abc", max_size=7), st.text("abc", max_size=7), st.integers(0, 6))
    def test_limit_semantics(self, a, b, limit):
        d = dp_matrix(a, b)
        assert edit_distance(a, b, limit=limit) == (d if d <= limit else limit + 1)


class TestBuildVocabMap:
    def test_identity(self):
        v = Vocabulary(("the", "a", "cat", "<bos>"))
        vmap = build_vocab_map(v, v)
        assert vmap.fwd.tolist() == [0, 1, 2, 3]

    def test_get_maps_to_gets(self):
        ref = Vocabulary(("get", "x"))
        other = Vocabulary(("forget", "gets"))
        assert build_vocab_map(ref, other).fwd[0] == 1

    def test_tie_lowest_id(self):
        ref = Vocabulary(("ab", "zz"))
        other = Vocabulary(("aa", "bb", "ac"))
        # "ab" is 1 edit from all three; "zz" is 2 from all three
        assert build_vocab_map(ref, other).fwd.tolist() == [0, 0]

    @pytest.mark.parametrize("seed", range(3))
    def test_exhaustive_minimality(self, seed):
        rng = random.Random(seed)
        ref = random_vocab(rng, 200)
        other = random_vocab(rng, 200, alphabet="abcdef")
        vmap = build_vocab_map(ref, other)
        for i, tok in enumerate(ref.tokens):
            dists = [dp_matrix(tok, o) for o in other.tokens]
            assert dists[vmap.fwd[i]] == min(dists)
            assert vmap.fwd[i] == dists.index(min(dists))

    def test_json_round_trip(self, tmp_path):
        rng = random.Random(7)
        ref, other = random_vocab(rng, 30, name="r"), random_vocab(rng, 20, name="o")
        vmap = build_vocab_map(ref, other)
        vmap.save(tmp_path / "m.json")
        back = VocabMap.load(tmp_path / "m.json")
        assert back.ref_vocab_id == "r" and back.other_vocab_id == "o"
        np.testing.assert_array_equal(back.fwd, vmap.fwd)
        assert back.to_json() == vmap.to_json()

    def test_json_requires_total_map(self):
        with pytest.raises(ValueError):
            VocabMap.from_json({"ref": "r", "other": "o", "pairs": [[0, 0], [2, 1]]})


class TestRemap:
    def test_sequence_identity(self, vocab4):
        vmap = build_vocab_map(vocab4, vocab4)
        seq = vocab4.sequence([3, 1, 0, 2])
        out = remap_sequence(seq, vmap)
        assert out.ids == seq.ids

    def test_all_to_one(self, vocab4, ab_vocab):
        vmap = VocabMap("v4", "ab", np.zeros(4, dtype=int), 2)
        assert remap_sequence(vocab4.sequence([0, 3, 2]), vmap).ids == (0, 0, 0)

    def test_sequence_vocab_mismatch(self, vocab4, ab_vocab):
        vmap = build_vocab_map(vocab4, vocab4)
        with pytest.raises(VocabMismatch):
            remap_sequence(ab_vocab.sequence([0]), vmap)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_remapped_ids_valid(self, seed):
        rng = random.Random(seed)
        ref = random_vocab(rng, 15, alphabet="abc", name="r")
        other = random_vocab(rng, 12, alphabet="xyz", name="o")
        vmap = build_vocab_map(ref, other)
        seq = ref.sequence([rng.randrange(15) for _ in range(20)])
        out = remap_sequence(seq, vmap)
        assert out.vocab_id == "o"
        assert all(0 <= i < 12 for i in out.ids)

    def test_logits_identity(self, vocab4, rng):
        vmap = build_vocab_map(vocab4, vocab4)
        v = rng.normal(size=4)
        np.testing.assert_array_equal(remap_logits(v, vmap), v)

    def test_logits_gather_many_to_one(self):
        vmap = VocabMap("r", "o", np.array([1, 1, 0]), 2)
        np.testing.assert_array_equal(remap_logits([5.0, 7.0], vmap), [7.0, 7.0, 5.0])
        np.testing.assert_array_equal(remap_logits([3.0, 3.0], vmap), [3.0, 3.0, 3.0])

    def test_logits_random_gather_oracle(self, rng):
        fwd = rng.integers(9, size=25)
        vmap = VocabMap("r", "o", fwd, 9)
        logits = rng.normal(size=(4, 9))
        out = remap_logits(logits, vmap)
        for row in range(4):
            for i in range(25):
                assert out[row, i] == logits[row, fwd[i]]

    def test_logits_dimension(self):
        vmap = VocabMap("r", "o", np.array([0, 1]), 3)
        with pytest.raises(DimensionMismatch):
            remap_logits(np.zeros(2), vmap)


class TestSelectReference:
    def test_single(self):
        assert select_reference([7.0], ["v"]) == "v"

    def test_ties_lowest_index(self):
        assert select_reference([2.0, 2.0, 5.0], ["a", "b", "c"]) == "a"

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(1.0, 100.0), min_size=1, max_size=10))
    def test_consistent_with_rank(self, ppls):
        ids = [f"v{i}" for i in range(len(ppls))]
        assert select_reference(ppls, ids) == ids[rank_by_ppl(ppls)[0]]


def test_aligned_scorer_presents_ref_vocab(rng):
    ref = Vocabulary(("get", "gets", "set"), name="r")
    other = Vocabulary(("gets", "sets", "got", "x"), name="o")
    inner = TableModel("m", other, rng.normal(size=(4, 4)))
    aligned = AlignedScorer(inner, ref)
    assert aligned.vocab_id == "r"
    ids = [0, 2, 1]
    out = aligned.score(ids)
    mapped = [int(aligned.vmap.fwd[i]) for i in ids]
    np.testing.assert_array_equal(out, inner.score(mapped)[:, aligned.vmap.fwd])
    assert out.shape == (3, 3)
