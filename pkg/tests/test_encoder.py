import numpy as np
import pytest

from xalign.encoder import (UNK_ID, Vocab, encode, encode_batch, encode_batch_backward, first_unit_select,
                            init_encoder, load_encoder, position_table, save_encoder, snapshot, split_units,
                            words_to_units)
from xalign.errors import ShapeError, SpanError, VocabError
from xalign.numerics import finite_diff_gradient, relative_error


@pytest.mark.parametrize("word, units", [
    ("cat", ["cat"]),
    ("sixchr", ["sixchr"]),
    ("sevench", ["sev", "enc", "h"]),
    ("abcdefghi", ["abc", "def", "ghi"]),
])
def test_split_units(word, units):
    assert split_units(word) == units


def test_words_to_units_spans():
    units, spans = words_to_units(["a", "abcdefg", "b"])
    assert units == ["a", "abc", "def", "g", "b"]
    assert [list(s) for s in spans] == [[0], [1, 2, 3], [4]]


def test_vocab_ids_and_unknown(tmp_path):
    v = Vocab(["b", "a", "b"])
    assert v.units == ["<unk>", "a", "b"]
    assert v.ids(["a", "zzz"]) == [1, UNK_ID]
    with pytest.raises(VocabError):
        v.unit(3)
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").units == v.units


def test_position_table_read_only_and_shape():
    P = position_table(5, 6)
    assert P.shape == (5, 6)
    assert P[0, 1] == 1.0 and P[0, 0] == 0.0
    with pytest.raises(ValueError):
        P[0, 0] = 1.0


def test_encode_shapes_and_range(rng):
    params = init_encoder(10, 8, layers=3, seed=0)
    st = encode(params, [1, 2, 3, 4])
    assert st.n_layers == 3
    assert all(h.shape == (4, 8) for h in st.layers)
    assert np.all(np.abs(st.final) < 1)


def test_encode_empty():
    st = encode(init_encoder(5, 4), [])
    assert st.final.shape == (0, 4)


def test_encode_context_dependence():
    params = init_encoder(10, 8, seed=1)
    a = encode(params, [1, 2, 3]).final[0]
    b = encode(params, [1, 5, 6]).final[0]
    assert not np.allclose(a, b)


def test_encode_rejects_bad_ids():
    with pytest.raises(VocabError):
        encode(init_encoder(5, 4), [0, 5])


def test_batch_matches_single(rng):
    params = init_encoder(12, 6, seed=2)
    sents = [rng.integers(0, 12, n) for n in (1, 4, 7, 2)]
    cache = encode_batch(params, sents)
    for k, s in enumerate(sents):
        single = encode(params, s)
        rows = slice(cache.starts[k], cache.starts[k] + len(s))
        for layer in range(3):
            np.testing.assert_allclose(cache.outputs[layer][rows], single[layer], atol=1e-14)


def test_batch_rejects_empty_sentence():
    with pytest.raises(ShapeError):
        encode_batch(init_encoder(5, 4), [[1], []])


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_encoder(6, 4, layers=2, seed=seed, sigma=0.4)
    sents = [rng.integers(0, 6, int(rng.integers(1, 5))) for _ in range(3)]
    n = sum(map(len, sents))
    w = rng.normal(size=(n, 4))
    g = encode_batch_backward(params, encode_batch(params, sents), w)
    fd = finite_diff_gradient(lambda p: np.sum(encode_batch(p, sents).final * w), params, 1e-5)
    assert relative_error(g, fd) < 1e-7


def test_first_unit_select(rng):
    states = rng.normal(size=(5, 3))
    out = first_unit_select(states, [range(0, 1), range(1, 4), range(4, 5)])
    np.testing.assert_array_equal(out, states[[0, 1, 4]])


@pytest.mark.parametrize("spans", [
    [range(0, 0)],
    [range(0, 2), range(1, 3)],
    [range(4, 6)],
])
def test_first_unit_select_bad_spans(spans):
    with pytest.raises(SpanError):
        first_unit_select(np.zeros((5, 2)), spans)


def test_snapshot_is_independent():
    params = init_encoder(4, 3)
    snap = snapshot(params)
    moved = params.replace(emb=params["emb"] + 1.0)
    assert snap.params == params and not (snap.params == moved)
    assert snap.restore() == params


def test_save_load_encoder(tmp_path):
    params = init_encoder(7, 5, layers=2, seed=3)
    save_encoder(tmp_path / "e.ckpt", params, {"head.w1": np.eye(2)})
    back, rest = load_encoder(tmp_path / "e.ckpt")
    assert back == params
    np.testing.assert_array_equal(rest["head.w1"], np.eye(2))
