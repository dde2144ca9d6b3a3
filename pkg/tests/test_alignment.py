import itertools

import pytest
from hypothesis import given, settings, strategies as st

from locinv.adapters.toy import ToyTokenizer
from locinv.errors import InputError
from locinv.p2p import P2PConfig, align_prompts, edited_positions, lcs_pairs
from locinv.priors import EditSpec, annotate

TOK = ToyTokenizer()


def _is_common_subsequence(a, b, pairs):
    return (all(a[i] == b[j] for i, j in pairs)
            and all(i0 < i1 and j0 < j1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:])))


def _brute_lcs_length(a, b):
    for k in range(min(len(a), len(b)), -1, -1):
        for sub in itertools.combinations(range(len(a)), k):
            seq = [a[i] for i in sub]
            it = iter(b)
            if all(any(x == y for y in it) for x in seq):
                return k
    return 0


@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7))
@settings(max_examples=150, deadline=None)
def test_lcs_is_a_longest_common_subsequence(a, b):
    pairs = lcs_pairs(a, b)
    assert _is_common_subsequence(a, b, pairs)
    assert len(pairs) == _brute_lcs_length(a, b)


def test_identical_prompts_align_identically():
    ann = annotate("a red square and a circle", TOK)
    spec = EditSpec.make(ann.prompt_text, "square", "square")
    alignment = align_prompts(ann, spec, TOK)
    assert alignment == {i: i for i in range(TOK.context_length)}
    assert edited_positions(ann, alignment, TOK, spec.target_prompt) == set()


def test_single_token_swap_maps_swap_site():
    ann = annotate("a red square and a circle", TOK)
    spec = EditSpec.make(ann.prompt_text, "square", "cross")
    alignment = align_prompts(ann, spec, TOK)
    assert alignment == {i: i for i in range(TOK.context_length)}
    assert edited_positions(ann, alignment, TOK, spec.target_prompt) == {3}


def test_ambiguous_source_word_rejected():
    ann = annotate("a square and a square", TOK)
    with pytest.raises(InputError):
        align_prompts(ann, EditSpec("word_swap", "square", "cross", "a cross and a square"), TOK)
    spec = EditSpec("word_swap", "square", "cross", "a square and a cross", occurrence=1)
    assert align_prompts(ann, spec, TOK)[5] == 5


class PieceTokenizer(ToyTokenizer):
    """Splits 'cross' into two pieces to exercise multi-piece words."""

    def __init__(self):
        super().__init__(context_length=12)

    def word_pieces(self, prompt):
        out, pos = [], 1
        for w in self.words(prompt):
            n = 2 if w == "cross" else 1
            out.append((w, list(range(pos, pos + n))))
            pos += n
        return out

    def encode(self, prompt):
        ids = [self.bos]
        for w in self.words(prompt):
            ids += [self.index[w], self.index["cyan"]] if w == "cross" else [self.index[w]]
        return ids + [self.pad] * (self.context_length - len(ids))


def test_multi_piece_target_maps_first_piece():
    tok = PieceTokenizer()
    ann = annotate("a red square and a circle", tok)
    spec = EditSpec.make(ann.prompt_text, "square", "cross")
    alignment = align_prompts(ann, spec, tok)
    assert alignment[3] == 3  # square -> first piece of cross
    assert 4 not in alignment.values()  # second piece stays unaligned
    assert alignment[4] == 5 and alignment[6] == 7  # "and", "circle" shift by one
    assert len(set(alignment.values())) == len(alignment)


def test_p2p_fraction_validation():
    with pytest.raises(InputError):
        P2PConfig(cross_replace_fraction=1.5)
