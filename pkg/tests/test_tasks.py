import numpy as np
import pytest

from vif.errors import FormatError, GenerationError, LayoutError
from vif.tasks import (Q_LEN, TaskConfig, Vocab, batch_tokens, content_hash, decode_line, encode_line, generate,
                       hypotheses, layout_for, localization_score, read_corpus, solve, write_corpus)

CFG = TaskConfig()


@pytest.fixture(scope="module")
def corpus():
    return generate(CFG, 300)


def test_ambiguity_rate_is_counted_exactly():
    insts = generate(TaskConfig(ambiguity_rate=0.5, seed=3), 1000)
    assert sum(i.ambiguous for i in insts) == 500
    assert sum(i.ambiguous for i in generate(TaskConfig(ambiguity_rate=0.37), 100)) == 37


def test_rate_zero_has_no_distractors():
    assert all(i.distractor_cells == () for i in generate(TaskConfig(ambiguity_rate=0.0), 200))


def test_rate_one_is_all_ambiguous():
    assert all(i.ambiguous for i in generate(TaskConfig(ambiguity_rate=1.0), 100))


def test_determinism():
    a, b = generate(TaskConfig(seed=9), 50), generate(TaskConfig(seed=9), 50)
    assert [encode_line(x) for x in a] == [encode_line(x) for x in b]
    assert [encode_line(x) for x in a] != [encode_line(x) for x in generate(TaskConfig(seed=10), 50)]


def test_prefix_stability():
    # the instance at index i depends only on (seed, i) and its ambiguity flag
    small, big = generate(TaskConfig(ambiguity_rate=0.0), 10), generate(TaskConfig(ambiguity_rate=0.0), 40)
    assert small == big[:10]


def test_instance_invariants(corpus):
    v = Vocab(CFG)
    for inst in corpus:
        assert inst.target_cells
        assert len(inst.grid) == 64 and len(inst.question) == Q_LEN and len(inst.answer) == 1
        assert inst.answer[0] in v.answer_tokens
        hyps = hypotheses(inst, v)
        if inst.ambiguous:
            # at least two readings with different answers; the ground truth selects exactly one
            assert len({h[0] for h in hyps}) >= 2
            chosen = [h for h in hyps if h[0] == inst.answer[0]]
            assert len(chosen) == 1 and set(chosen[0][1]) == set(inst.target_cells)
            assert set(inst.distractor_cells).isdisjoint(inst.target_cells)
            for d in inst.distractor_cells:
                assert any(d in h[1] for h in hyps if h[0] != inst.answer[0])
        else:
            assert len(hyps) == 1
        assert solve(inst, v) == inst.answer[0]


def test_answers_cover_closed_vocabulary():
    insts = generate(CFG, 1600)
    v = Vocab(CFG)
    counts = np.bincount([v.answer_tokens.tolist().index(i.answer[0]) for i in insts], minlength=16)
    assert len(v.answer_tokens) == 16 <= 32
    assert counts.min() > 60 and counts.max() < 150  # ~100 each


def test_all_templates_appear(corpus):
    v = Vocab(CFG)
    kinds = {(i.question[0], i.question[1]) for i in corpus}
    W = v.word
    assert kinds == {(W["Q_COLOR"], W["AT"]), (W["Q_ROW"], W["OF"]), (W["Q_COLOR"], W["LEFTOF"])}


@pytest.mark.parametrize("kw", [dict(ambiguity_rate=1.5), dict(grid_h=1), dict(n_colors=1), dict(n_objects=3),
                                dict(n_objects=40)])
def test_infeasible_configs(kw):
    with pytest.raises(GenerationError):
        generate(TaskConfig(**kw), 5)


def test_generate_needs_positive_count():
    with pytest.raises(GenerationError):
        generate(CFG, 0)


def test_vocab_layout():
    v = Vocab(CFG)
    assert v.size == 100
    for c in range(8):
        for s in range(4):
            for m in (False, True):
                assert v.unpatch(v.patch(c, s, m)) == (c, s, m)
    assert v.unpatch(v.EMPTY) is None
    with pytest.raises(FormatError):
        v.unpatch(v.word["AT"])


def test_feature_matrix():
    v = Vocab(CFG)
    F = v.feature_matrix()
    assert F.shape == (v.size, v.n_features)
    p = v.patch(2, 3, True)
    assert np.flatnonzero(F[p]).tolist() == [2, 8 + 3, 12]
    assert np.flatnonzero(F[v.color(2)]).tolist() == [2]
    assert np.flatnonzero(F[v.row(5)]).tolist() == [v.row_feature + 5]
    assert np.flatnonzero(F[v.col(1)]).tolist() == [v.col_feature + 1]
    assert not F[v.word["AT"]].any() and not F[v.EMPTY].any()


def test_line_roundtrip(corpus, tmp_path):
    for inst in corpus[:50]:
        assert decode_line(encode_line(inst)) == inst
    path = tmp_path / "c.txt"
    write_corpus(path, corpus)
    assert read_corpus(path) == corpus


def test_line_format():
    line = encode_line(generate(CFG, 1)[0])
    fields = [f.split()[0] for f in line.split("|")]
    assert fields == ["GRID", "Q", "A", "TGT", "DIS"]


@pytest.mark.parametrize("bad", ["GRID 1 2 3 4 | Q 1 | A 1 | TGT 0",
                                 "GRID 1 2 3 4 | Q 1 | A x | TGT 0 | DIS",
                                 "GRID 1 2 3 | Q 1 | A 1 | TGT 0 | DIS",
                                 "GRID 1 2 3 4 | Q 1 | B 1 | TGT 0 | DIS"])
def test_malformed_lines(bad):
    with pytest.raises(FormatError):
        decode_line(bad)


def test_non_square_needs_dims():
    line = "GRID 1 1 1 1 1 1 | Q 1 | A 1 | TGT 0 | DIS"
    assert decode_line(line, 2, 3).grid_w == 3


def test_localization_score(corpus, rng):
    inst = corpus[0]
    assert localization_score(np.full(64, 1 / 64), inst) == pytest.approx(len(inst.target_cells) / 64, abs=1e-15)
    one = np.zeros(64)
    one[inst.target_cells[0]] = 1.0
    assert localization_score(one, inst) == 1.0
    v = rng.dirichlet(np.ones(64))
    assert localization_score(v, inst) == sum(v[c] for c in inst.target_cells)
    with pytest.raises(LayoutError):
        localization_score(np.ones(49) / 49, inst)


def test_batch_tokens_and_layout(corpus):
    lay = layout_for(CFG)
    toks = batch_tokens(corpus[:4])
    assert toks.shape == (4, lay.T) == (4, 69)
    assert batch_tokens(corpus[:4], with_answer=False).shape == (4, 68)
    assert layout_for(CFG, with_answer=False).n_answer == 0


def test_content_hash_is_stable(corpus):
    h = content_hash(corpus[0])
    assert h == content_hash(decode_line(encode_line(corpus[0]))) and 0 <= h < 2 ** 48
    assert len({content_hash(i) for i in corpus}) == len(corpus)
