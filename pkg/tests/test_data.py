import numpy as np
import pytest
from hypothesis import given, strategies as st

from hexform.data import (
    CLS, PAD, UNK, SyntheticTaskSpec, TaskKind, TsvSchema, default_vocab, gen_synthetic, load_tsv, read_label_map,
)
from hexform.errors import InvalidSpec, LabelOutOfSchema, ParseError, SeqTooLong


def spec(kind="classify", **kw):
    base = dict(train_size=300, dev_size=100)
    base.update(kw)
    return SyntheticTaskSpec(kind=kind, **base)


@pytest.mark.parametrize("kind", list(TaskKind), ids=lambda k: k.value)
def test_generation_is_deterministic(kind):
    num_classes = 3 if kind is TaskKind.TAG else 2
    a = gen_synthetic(spec(kind, num_classes=num_classes), seed=4)
    b = gen_synthetic(spec(kind, num_classes=num_classes), seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.tokens, y.tokens)
        np.testing.assert_array_equal(x.labels, y.labels)
    c = gen_synthetic(spec(kind, num_classes=num_classes), seed=5)
    assert not np.array_equal(a[0].tokens, c[0].tokens)


@given(seed=st.integers(0, 2 ** 16), kind=st.sampled_from(list(TaskKind)))
def test_splits_are_disjoint_and_well_formed(seed, kind):
    s = spec(kind, num_classes=3 if kind is TaskKind.TAG else 2, train_size=80, dev_size=40, seed=seed % 7)
    train, dev = gen_synthetic(s, seed=seed)
    seen = {tuple(r[~m]) for r, m in zip(train.tokens, train.mask)}
    assert not any(tuple(r[~m]) in seen for r, m in zip(dev.tokens, dev.mask))
    for ds in (train, dev):
        assert (ds.tokens[:, 0] == CLS).all()
        assert (ds.tokens[ds.mask] == PAD).all()
        # padding is a suffix: once masked, always masked
        assert (np.diff(ds.mask.astype(int), axis=1) >= 0).all()
        lengths = (~ds.mask).sum(1)
        assert lengths.min() >= s.seq_len // 2 and lengths.max() <= s.seq_len
        assert ds.tokens.max() < s.vocab_size


def test_classify_is_balanced():
    train, dev = gen_synthetic(spec(num_classes=4, train_size=2000, vocab_size=64), seed=0)
    freq = np.bincount(train.labels, minlength=4) / len(train)
    assert np.abs(freq - 0.25).max() <= 0.05


def test_labels_are_functions_of_the_tokens():
    for kind in TaskKind:
        train, _ = gen_synthetic(spec(kind, num_classes=3, train_size=400), seed=1)
        groups = {}
        for r, m, y in zip(train.tokens, train.mask, train.labels):
            key = tuple(r[~m])
            groups.setdefault(key, np.asarray(y).tolist())
            assert groups[key] == np.asarray(y).tolist()
        if kind is TaskKind.REGRESS:
            assert 0.0 <= train.labels.min() and train.labels.max() <= 1.0
        if kind is TaskKind.TAG:
            assert (train.labels[train.mask] == 0).all() and train.labels.max() == 2


def test_invalid_specs():
    for bad in (dict(seq_len=3), dict(num_classes=1), dict(vocab_size=8, num_classes=2), dict(train_size=0)):
        with pytest.raises(InvalidSpec):
            spec(**bad)
    with pytest.raises(InvalidSpec):
        gen_synthetic({"kind": "classify"})


def test_batches_cover_the_dataset_once():
    train, _ = gen_synthetic(spec(train_size=50), seed=0)
    seen = np.concatenate([b.tokens for b in train.batches(16, seed=3)])
    assert len(seen) == 50
    assert sorted(map(tuple, seen)) == sorted(map(tuple, train.tokens))
    first = next(train.batches(16))
    np.testing.assert_array_equal(first.tokens, train.tokens[:16])


def write(tmp_path, text, name="data.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_tsv_classify_with_label_sidecar(tmp_path):
    path = write(tmp_path, "a b\tpos\nc\tneg\n\nb a c\tpos\n")
    ds = load_tsv(path, TsvSchema.parse("text,label"))
    assert len(ds) == 3
    assert ds.label_map == {"neg": 0, "pos": 1}
    assert read_label_map(tmp_path / "data.tsv.labels") == ds.label_map
    vocab = ["[PAD]", "[UNK]", "[CLS]", "a", "b"]
    out = ds.to_dataset(vocab, 5)
    np.testing.assert_array_equal(out.tokens[1], [CLS, UNK, PAD, PAD, PAD])
    np.testing.assert_array_equal(out.labels, [1, 0, 1])
    with pytest.raises(SeqTooLong):
        ds.to_dataset(vocab, 3)


def test_tsv_pairs_header_and_regression(tmp_path):
    path = write(tmp_path, "s1\ts2\ty\nx y\tz\t0.5\nq\tr s\t-1.25\n")
    ds = load_tsv(path, TsvSchema(("text", "text2", "label"), TaskKind.REGRESS, header=True))
    assert ds.rows == [("x y", "z", "0.5"), ("q", "r s", "-1.25")]
    assert not (tmp_path / "data.tsv.labels").exists()
    out = ds.to_dataset(default_vocab(10), 6)
    np.testing.assert_array_equal(out.labels, [0.5, -1.25])
    assert out.num_labels == 1 and (~out.mask).sum(1).tolist() == [4, 4]


def test_tsv_errors_name_the_line(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_tsv(write(tmp_path, "a\t1\nb\n"), TsvSchema())
    with pytest.raises(ParseError, match="line 1"):
        load_tsv(write(tmp_path, "a\tbig\n"), TsvSchema(kind=TaskKind.REGRESS))
    with pytest.raises(LabelOutOfSchema):
        load_tsv(write(tmp_path, "a\tmaybe\n"), TsvSchema(labels=("yes", "no")))
    for bad in ("label,text", "text"):
        with pytest.raises(InvalidSpec):
            TsvSchema.parse(bad)
    with pytest.raises(InvalidSpec):
        TsvSchema(kind=TaskKind.TAG)


def test_fixed_label_order_wins_over_sorting(tmp_path):
    ds = load_tsv(write(tmp_path, "a\tyes\nb\tno\n"), TsvSchema(labels=("yes", "no")), write_label_map=False)
    assert ds.label_map == {"yes": 0, "no": 1}
    assert not (tmp_path / "data.tsv.labels").exists()
    assert sorted(ds.shuffled(0)) == sorted(ds.rows)
