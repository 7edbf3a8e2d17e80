import numpy as np
import pytest

from chunkasr.ctc import (BLANK_ID, CtcHead, DecodeState, Vocab, VocabError,
                          default_vocab, format_transcript_line, greedy_decode,
                          project_logits)


def logits_for_path(path, vocab_size=6):
    out = np.full((len(path), vocab_size), -5.0)
    for t, ident in enumerate(path):
        out[t, ident] = 5.0
    return out


def test_vocab_blank_reserved():
    v = default_vocab()
    assert v.tokens[BLANK_ID] == "<blk>"
    assert len(v.tokens) == 29
    with pytest.raises(VocabError):
        Vocab(tokens=["<blk>", "a", "a"])


def test_project_logits_zero_weights(rng):
    hidden = rng.normal(size=(7, 16)).astype(np.float32)
    head = CtcHead(w=np.zeros((16, 5), np.float32), b=np.zeros(5, np.float32))
    assert np.array_equal(project_logits(hidden, head), np.zeros((7, 5)))


def test_project_logits_matches_matmul(rng):
    hidden = rng.normal(size=(9, 16))
    head = CtcHead(w=rng.normal(size=(16, 6)), b=rng.normal(size=6))
    ref = hidden @ head.w + head.b
    assert np.allclose(project_logits(hidden, head), ref, rtol=1e-6)


def test_argmax_invariant_to_constant_shift(rng):
    logits = rng.normal(size=(20, 6))
    ids, _ = greedy_decode(logits)
    ids2, _ = greedy_decode(logits + 3.7)
    assert ids == ids2


def test_canonical_collapse():
    # argmax path [a, a, -, b, b] -> "ab"
    ids, carry = greedy_decode(logits_for_path([1, 1, 0, 2, 2]))
    assert ids == [1, 2]
    assert carry == 2


def test_blank_separates_repeats():
    # path [a, -, a] -> "aa"
    ids, _ = greedy_decode(logits_for_path([1, 0, 1]))
    assert ids == [1, 1]


def test_carry_initialized_blank_at_audio_start():
    ids, _ = greedy_decode(logits_for_path([1]))
    assert ids == [1]


def test_split_invariance_exhaustive(rng):
    for _ in range(200):
        t_len = int(rng.integers(1, 40))
        logits = rng.normal(size=(t_len, 5)).astype(np.float32)
        whole, _ = greedy_decode(logits)
        cuts = sorted(rng.integers(0, t_len + 1, size=int(rng.integers(0, 4))))
        out = []
        carry = BLANK_ID
        for block in np.split(logits, cuts):
            ids, carry = greedy_decode(block, carry)
            out.extend(ids)
        assert out == whole


def test_output_contains_no_blank_and_no_adjacent_repeats_without_blank(rng):
    for _ in range(50):
        path = rng.integers(0, 4, size=30)
        ids, _ = greedy_decode(logits_for_path(path, 4))
        assert BLANK_ID not in ids
        # rebuild: any adjacent equal outputs must be blank-separated runs
        collapsed = [k for i, k in enumerate(path)
                     if k != BLANK_ID and (i == 0 or path[i - 1] != k)]
        assert ids == collapsed


def test_argmax_ties_break_to_lowest_index():
    logits = np.zeros((1, 4))
    ids, carry = greedy_decode(logits)
    assert ids == [] and carry == BLANK_ID  # index 0 is blank
    logits = np.zeros((1, 4))
    logits[0, 2] = logits[0, 3] = 1.0
    ids, _ = greedy_decode(logits)
    assert ids == [2]


def test_decode_state_spans_across_blocks():
    st = DecodeState()
    st.feed(logits_for_path([1, 1, 0]), 0)
    st.feed(logits_for_path([2, 2, 2]), 3)
    st.feed(logits_for_path([2, 0, 3]), 6)
    assert st.tokens == [1, 2, 3]
    assert st.spans == [(0, 2), (3, 7), (8, 9)]


def test_decode_state_matches_whole_decode(rng):
    for _ in range(50):
        t_len = int(rng.integers(1, 30))
        logits = rng.normal(size=(t_len, 5)).astype(np.float32)
        whole, _ = greedy_decode(logits)
        st = DecodeState()
        cuts = sorted(rng.integers(0, t_len + 1, size=2))
        start = 0
        for block in np.split(logits, cuts):
            st.feed(block, start)
            start += block.shape[0]
        assert st.tokens == whole
        for (a, b) in st.spans:
            assert 0 <= a < b <= t_len


def test_transcript_line_format():
    vocab = Vocab(tokens=["<blk>", "h", "i"])
    line = format_transcript_line("utt1", [1, 2], vocab)
    assert line == "utt1\thi"
    line = format_transcript_line("utt1", [1, 2], vocab, spans=[(0, 2), (3, 4)])
    assert line == "utt1\thi\th=0-2,i=3-4"
