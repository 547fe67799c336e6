import numpy as np
import pytest

from core.data import (COPY_SEP, EOS_ID, LOWER, BlockSource, SyntheticTask, decode, encode, gen_synthetic,
                       holdout_split, iter_synthetic, keyword_label, pack_corpus, parity_label, read_corpus,
                       shuffle_blocks)
from core.errors import ArgumentError, ConfigError, DataError


def test_short_documents_make_no_block():
    assert list(pack_corpus([b"a" * 100, b"b" * 100], block_len=256)) == []


def test_exact_block_count():
    blocks = list(pack_corpus([b"x" * 255, b"y" * 257], block_len=256))
    assert len(blocks) == 2
    assert blocks[0][255] == EOS_ID
    assert blocks[1][0] == ord("y")
    assert all(b.shape == (256,) and b.dtype == np.int64 for b in blocks)


def test_empty_corpus_rejected_eagerly():
    with pytest.raises(DataError):
        pack_corpus([], block_len=16)


def test_block_len_validated():
    with pytest.raises(ArgumentError):
        pack_corpus([b"abc"], block_len=1)


def test_shuffle_preserves_multiset_and_is_seeded():
    blocks = [np.full(4, i, dtype=np.int64) for i in range(50)]
    out = list(shuffle_blocks(iter(blocks), buffer_size=8, seed=3))
    again = list(shuffle_blocks(iter(blocks), buffer_size=8, seed=3))
    assert sorted(int(b[0]) for b in out) == list(range(50))
    assert [int(b[0]) for b in out] != list(range(50))
    assert [int(b[0]) for b in out] == [int(b[0]) for b in again]


def test_shuffle_disabled_keeps_order():
    blocks = [np.full(2, i) for i in range(5)]
    assert [int(b[0]) for b in shuffle_blocks(blocks, buffer_size=0, seed=1)] == list(range(5))


def test_block_source_restarts_and_prefetch_matches():
    docs = [bytes([97 + i % 26]) * (10 + i) for i in range(40)]
    sync = BlockSource(docs, block_len=16, shuffle_buffer=4, seed=1)
    first = sync.take(10)
    assert [b.tolist() for b in sync.take(10)] == [b.tolist() for b in first]
    fetched = BlockSource(docs, block_len=16, shuffle_buffer=4, seed=1, prefetch=3).take(10)
    assert [b.tolist() for b in fetched] == [b.tolist() for b in first]


def test_batches_shape():
    source = BlockSource([b"abcdefgh" * 10], block_len=8)
    batches = list(source.batches(3))
    assert len(batches) == 3
    assert all(b.shape == (3, 8) for b in batches)


def test_parity_labels():
    assert parity_label(encode(b"abc def")) == 0
    assert parity_label(encode(b"aBcD")) == 0
    assert parity_label(encode(b"aBc")) == 1


def test_synthetic_streams_are_deterministic():
    task = SyntheticTask("parity-cls", seed=5, n_train=100, n_eval=10, length=32)
    a, b = gen_synthetic(task), gen_synthetic(task)
    assert all(np.array_equal(x.tokens, y.tokens) and x.label == y.label for x, y in zip(a.train, b.train))
    assert not np.array_equal(a.train[0].tokens, a.eval[0].tokens)
    assert all(parity_label(e.tokens) == e.label for e in a.train)


def test_keyword_labels_match_construction():
    data = gen_synthetic(SyntheticTask("keyword-cls", seed=2, n_train=300, n_eval=0, length=32))
    assert all(keyword_label(e.tokens) == e.label for e in data.train)
    labels = [e.label for e in data.train]
    assert 0.3 < np.mean(labels) < 0.7


def _byte_counts(tokens: np.ndarray) -> np.ndarray:
    return np.stack([np.bincount(t, minlength=256) for t in tokens]).astype(np.float64)


def test_keyword_task_is_probe_learnable():
    data = gen_synthetic(SyntheticTask("keyword-cls", seed=3, n_train=512, n_eval=256, length=32))
    x_train, y_train = data.arrays("train")
    x_eval, y_eval = data.arrays("eval")
    f_train, f_eval = _byte_counts(x_train), _byte_counts(x_eval)
    mu, sd = f_train.mean(axis=0), f_train.std(axis=0)
    sd[sd == 0] = 1.0
    f_train, f_eval = (f_train - mu) / sd, (f_eval - mu) / sd
    w, b = np.zeros(256), 0.0
    for _ in range(300):
        p = 1.0 / (1.0 + np.exp(-(f_train @ w + b)))
        w -= 0.5 * f_train.T @ (p - y_train) / len(y_train)
        b -= 0.5 * float(np.mean(p - y_train))
    acc = np.mean(((f_eval @ w + b) > 0).astype(int) == y_eval)
    assert acc > 0.95


def test_lm_documents():
    markov = next(iter_synthetic(SyntheticTask("markov-lm", seed=0, length=40)))
    assert len(markov.tokens) == 40
    assert set(decode(markov.tokens)) <= set(LOWER)
    copy = decode(next(iter_synthetic(SyntheticTask("copy-lm", seed=0, length=21))).tokens)
    left, right = copy.split(bytes([COPY_SEP]))
    assert left == right and len(left) == 10


def test_unknown_task_kind():
    with pytest.raises(ConfigError):
        SyntheticTask("sentiment").validate()
    with pytest.raises(ConfigError):
        BlockSource.from_task(SyntheticTask("parity-cls"))


def test_lm_task_has_no_labels():
    data = gen_synthetic(SyntheticTask("markov-lm", n_train=2, n_eval=1))
    with pytest.raises(DataError):
        data.arrays()


def test_read_corpus(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"first doc\n\nsecond doc\n")
    (tmp_path / "b.txt").write_bytes(b"third doc")
    assert read_corpus(tmp_path) == [b"first doc", b"second doc", b"third doc"]
    with pytest.raises(DataError):
        read_corpus(tmp_path / "missing")


def test_holdout_split():
    docs = [bytes([i]) for i in range(20)]
    train, held = holdout_split(docs)
    assert len(held) == 1 and train + held == docs
    with pytest.raises(DataError):
        holdout_split(docs[:1])
