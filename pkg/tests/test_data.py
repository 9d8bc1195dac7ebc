import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tssr.data import (ContentTable, DataError, DatasetSplit, InteractionSequence, build_batch,
                       filter_min_count, leave_one_out_split, load_content_table, load_dataset,
                       load_interactions, subsample_train, write_content_binary, write_content_tsv)


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def seq(*items, user="u"):
    return InteractionSequence(user, list(items))


def test_rows_sorted_by_timestamp(tmp_path):
    seqs, vocab = load_interactions(write(tmp_path, "u1,a,5\nu1,b,1\nu1,c,3\n"))
    inv = {v: k for k, v in vocab.items()}
    assert [inv[i] for i in seqs[0].items] == ["b", "c", "a"]


def test_timestamp_ties_keep_file_order(tmp_path):
    seqs, vocab = load_interactions(write(tmp_path, "u1,a,2\nu1,b,1\nu1,c,2\n"))
    inv = {v: k for k, v in vocab.items()}
    assert [inv[i] for i in seqs[0].items] == ["b", "a", "c"]


def test_vocab_counts_distinct_items(tmp_path):
    seqs, vocab = load_interactions(write(tmp_path, "u1,a,1\nu1,b,2\nu2,c,1\nu2,d,2\nu2,e,3\n"))
    assert len(vocab) == 5 and len(seqs) == 2


def test_missing_timestamp_names_row(tmp_path):
    with pytest.raises(DataError, match="row 1"):
        load_interactions(write(tmp_path, "u1,i9\n"))


def test_bad_timestamp_names_row(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        load_interactions(write(tmp_path, "u1,a,1\nu1,b,x\n"))


def test_header_and_tsv(tmp_path):
    path = write(tmp_path, "user\titem\tts\nu1\ta\t2\nu1\tb\t1\n", "log.tsv")
    seqs, vocab = load_interactions(path, fmt="tsv", header=True)
    assert seqs[0].items == [vocab["b"], vocab["a"]]


def test_empty_file_errors(tmp_path):
    with pytest.raises(DataError):
        load_interactions(write(tmp_path, ""))


def test_empty_sequence_errors():
    with pytest.raises(DataError):
        InteractionSequence("u", [])


def test_filter_removes_short_user():
    seqs = [seq(0, 1, 2, 3, user="a"), seq(0, 1, 2, 3, 4, user="b")]
    out, vocab = filter_min_count(seqs, {str(i): i for i in range(5)}, min_user=5, min_item=1)
    assert [s.user_id for s in out] == ["b"]


def test_filter_identity_at_one():
    seqs = [seq(0, 2, user="a"), seq(1, user="b")]
    vocab = {"x": 0, "y": 1, "z": 2}
    out, new_vocab = filter_min_count(seqs, vocab, 1, 1)
    assert [s.items for s in out] == [[0, 2], [1]] and new_vocab == vocab


def test_filter_reaches_fixed_point():
    # item 9 appears once in each of two 5-item users; dropping it leaves both users with 4
    vocab = {str(i): i for i in range(10)}
    seqs = [seq(0, 1, 2, 3, 9, user="a"), seq(4, 5, 6, 7, 9, user="b")]
    with pytest.raises(DataError):
        filter_min_count(seqs, vocab, min_user=5, min_item=2)
    keep = [seq(0, 1, 2, 3, 4, 5, user="c")] * 2
    out, new_vocab = filter_min_count(seqs + keep, vocab, min_user=5, min_item=2)
    assert [s.user_id for s in out] == ["c", "c"]
    assert sorted(new_vocab.values()) == list(range(6))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(0, 11), min_size=1, max_size=12), min_size=1, max_size=15),
       st.integers(1, 4), st.integers(1, 4))
def test_filter_output_satisfies_thresholds(raw, mu, mi):
    vocab = {str(i): i for i in range(12)}
    seqs = [seq(*s, user=str(k)) for k, s in enumerate(raw)]
    try:
        out, new_vocab = filter_min_count(seqs, vocab, mu, mi)
    except DataError:
        return
    counts = np.bincount(np.concatenate([s.items for s in out]), minlength=len(new_vocab))
    assert all(len(s.items) >= mu for s in out)
    assert counts.min() >= mi and len(counts) == len(new_vocab)


def test_split_four_items():
    split = leave_one_out_split([seq(0, 1, 2, 3)])
    assert split.test[0].items[-1] == 3 and split.validation[0].items[-1] == 2
    assert split.train[0].items == [0, 1, 2]


def test_split_three_items():
    split = leave_one_out_split([seq(0, 1, 2)])
    assert split.train[0].items == [0, 1]
    assert split.validation[0].items == [0, 1]
    assert split.test[0].items == [0, 1, 2]


def test_split_two_items_is_train_only():
    split = leave_one_out_split([seq(0, 1), seq(0, 1, 2, user="v")])
    assert split.n_too_short == 1
    assert [s.user_id for s in split.validation] == ["v"] and len(split.train) == 2


def test_batch_left_padding():
    b = build_batch([[0, 1, 2, 3]], max_len=5, pad=9)
    assert b.id_seq.tolist() == [[9, 9, 0, 1, 2]]
    assert b.mask.tolist() == [[False, False, True, True, True]]
    assert b.target.tolist() == [[9, 9, 1, 2, 3]]


def test_batch_truncates_to_last_inputs():
    b = build_batch([list(range(13))], max_len=10, pad=99)
    assert b.id_seq[0].tolist() == list(range(2, 12))
    assert b.target[0].tolist() == list(range(3, 13))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=2, max_size=14), min_size=1, max_size=6),
       st.integers(2, 8))
def test_batch_shift_contract(raw, max_len):
    b = build_batch(raw, max_len, pad=7)
    for r, s in enumerate(raw):
        n = min(len(s) - 1, max_len)
        assert b.mask[r].sum() == n
        assert b.id_seq[r, -n:].tolist() == s[-n - 1:-1]
        assert b.target[r, -n:].tolist() == s[-n:]
        assert np.all(b.target[r][~b.mask[r]] == 7)


def test_content_table_tsv(tmp_path):
    vocab = {"a": 0, "b": 1, "c": 2}
    vecs = np.arange(12, dtype=float).reshape(3, 4)
    path = str(tmp_path / "c.tsv")
    write_content_tsv(path, list(vocab), vecs)
    table = load_content_table(path, vocab)
    assert table.dim_raw == 4 and table.vectors.shape == (4, 4)
    np.testing.assert_array_equal(table.vectors[:3], vecs)
    assert np.all(table.vectors[3] == 0)


def test_content_table_binary_matches_float32(tmp_path):
    vocab = {"a": 1, "b": 0}
    vecs = np.random.default_rng(0).normal(size=(2, 3))
    path = str(tmp_path / "c.cvec")
    write_content_binary(path, ["a", "b"], vecs)
    table = load_content_table(path, vocab)
    np.testing.assert_array_equal(table.vectors[1], vecs[0].astype(np.float32))
    np.testing.assert_array_equal(table.vectors[0], vecs[1].astype(np.float32))


def test_content_missing_item_named(tmp_path):
    path = write(tmp_path, "a\t1 2\n", "c.tsv")
    with pytest.raises(DataError, match="zz"):
        load_content_table(path, {"a": 0, "zz": 1})


def test_content_width_mismatch(tmp_path):
    path = write(tmp_path, "a\t1 2\nb\t1 2 3\n", "c.tsv")
    with pytest.raises(DataError, match="width"):
        load_content_table(path, {"a": 0, "b": 1})


def _split(n):
    train = [seq(0, 1, 2, user=str(u)) for u in range(n)]
    return DatasetSplit(train, train[:3], train[:3], 3)


def test_subsample_fraction():
    split = _split(100)
    assert subsample_train(split, 1.0, 0) is split
    half = subsample_train(split, 0.5, 0)
    assert len(half.train) == 50 and half.validation is split.validation and half.test is split.test
    again = subsample_train(split, 0.5, 0)
    assert [s.user_id for s in half.train] == [s.user_id for s in again.train]
    with pytest.raises(ValueError):
        subsample_train(split, 0.0, 0)


def test_load_dataset_end_to_end(tmp_path):
    rows = [f"u{u},i{(u + k) % 6},{k}" for u in range(6) for k in range(6)]
    log = write(tmp_path, "\n".join(rows) + "\n")
    content = write(tmp_path, "".join(f"i{i}\t{i} 1\n" for i in range(6)), "c.tsv")
    split, vocab, table = load_dataset(log, content)
    assert split.n_items == 6 == len(vocab) and len(split.test) == 6
    assert isinstance(table, ContentTable)
    for raw, idx in vocab.items():
        assert table.vectors[idx, 0] == float(raw[1:])
