import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabaseline import data as D
from metabaseline.binio import FormatError
from metabaseline.data import ConfigError, SplitSpec, SyntheticSpec, generate_synthetic

from oracles import one_nn_accuracy


def small(**kw):
    return generate_synthetic(SyntheticSpec(**{"num_super_categories": 4, "classes_per_super": 3,
                                               "samples_per_class": 10, "sample_dim": 6, **kw}))


def test_zero_noise_gives_identical_samples():
    ds = small(noise_scale=0.0)
    for c in ds.classes:
        assert np.all(c.samples == c.samples[0])


def test_same_seed_is_bitwise_identical():
    a, b = small(seed=4), small(seed=4)
    assert D.encode_dataset(a) == D.encode_dataset(b)
    assert D.encode_dataset(a) != D.encode_dataset(small(seed=5))


def test_separable_when_class_scale_dominates():
    ds = small(class_scale=10.0, noise_scale=0.5, super_scale=3.0, samples_per_class=20, sample_dim=16)
    assert one_nn_accuracy(ds) > 0.95


def test_zero_class_scale_collapses_onto_super_center():
    ds = generate_synthetic(SyntheticSpec(6, 1, 5, 4, class_scale=0.0, noise_scale=0.0))
    centers = np.stack([c.samples[0] for c in ds.classes])
    assert len({c.super_category for c in ds.classes}) == 6
    # class center == super center, so two classes of one super would coincide
    ds2 = generate_synthetic(SyntheticSpec(3, 2, 5, 4, class_scale=0.0, noise_scale=0.0))
    for s in range(3):
        a, b = (c.samples[0] for c in ds2.classes if c.super_category == s)
        np.testing.assert_array_equal(a, b)
    assert np.unique(centers, axis=0).shape[0] == 6


def test_classes_are_tagged():
    ds = small()
    assert [c.super_category for c in ds.classes] == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert ds.super_categories() == [0, 1, 2, 3]


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(samples_per_class=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(noise_scale=-1.0)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        D.ClassRecord(0, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        D.FewShotDataset([D.ClassRecord(1, np.zeros((1, 3)))], 3)


# -- splits --------------------------------------------------------------------------------


def test_one_super_each():
    ds = generate_synthetic(SyntheticSpec(3, 2, 4, 3))
    split = D.split_by_supercategory(ds, (1, 1, 1), seed=0)
    supers = [{ds.classes[c].super_category for c in ids} for ids in (split.base, split.val, split.novel)]
    assert all(len(s) == 1 for s in supers)
    assert set.union(*supers) == {0, 1, 2}


def test_super_split_keeps_categories_whole():
    ds = generate_synthetic(SyntheticSpec(12, 5, 2, 3))
    split = D.split_by_supercategory(ds, (8, 2, 2), seed=1)
    assert (len(split.base), len(split.val), len(split.novel)) == (40, 10, 10)
    owner = {}
    for part, ids in (("base", split.base), ("val", split.val), ("novel", split.novel)):
        for cid in ids:
            assert owner.setdefault(ds.classes[cid].super_category, part) == part


def test_too_few_supers():
    ds = generate_synthetic(SyntheticSpec(2, 3, 2, 3))
    with pytest.raises(ConfigError):
        D.split_by_supercategory(ds)


def test_too_few_classes_to_shuffle():
    ds = generate_synthetic(SyntheticSpec(2, 1, 2, 3))
    with pytest.raises(ConfigError):
        D.split_shuffled(ds, (1, 1, 1))


def test_golden_shuffled_split():
    # derived from the pure-Python SplitMix64 oracle, then frozen
    ds = generate_synthetic(SyntheticSpec(12, 5, 2, 4))
    split = D.split_shuffled(ds, (40, 10, 10), seed=3)
    assert split.val == (2, 4, 6, 14, 19, 29, 42, 44, 45, 54)
    assert split.novel == (0, 11, 12, 17, 23, 32, 34, 36, 39, 53)
    assert len(split.base) == 40


def test_allocate():
    assert D.allocate(60, (40, 10, 10)) == [40, 10, 10]
    assert D.allocate(12, (8, 2, 2)) == [8, 2, 2]
    assert D.allocate(3, (100, 1, 1)) == [1, 1, 1]
    assert D.allocate(10, (1, 1, 1)) == [4, 3, 3]
    with pytest.raises(ConfigError):
        D.allocate(10, (1, 0, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 8), st.integers(1, 4), st.integers(0, 1000),
       st.tuples(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10)), st.booleans())
def test_splits_are_disjoint_and_cover(n_super, per_super, seed, fractions, by_super):
    ds = generate_synthetic(SyntheticSpec(n_super, per_super, 2, 2))
    split = (D.split_by_supercategory if by_super else D.split_shuffled)(ds, fractions, seed)
    parts = [set(split.base), set(split.val), set(split.novel)]
    assert all(parts)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert set.union(*parts) == set(range(ds.num_classes))
    again = (D.split_by_supercategory if by_super else D.split_shuffled)(ds, fractions, seed)
    assert again == split


def test_split_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        SplitSpec((0, 1), (1,), (2,))
    with pytest.raises(ConfigError):
        SplitSpec((0,), (1,), (2,), holdout_fraction=1.0)
    split = SplitSpec((0, 3), (1,), (2,), 0.2, "custom", 9)
    split.save(tmp_path / "s.json")
    assert SplitSpec.load(tmp_path / "s.json") == split
    with pytest.raises(ConfigError):
        SplitSpec((0, 70), (1,), (2,)).validate_against(small())


def test_holdout_is_the_tail_of_each_base_class():
    ds = small(samples_per_class=20)
    split = SplitSpec((0, 1), (2,), (3,), 0.1)
    train, held = D.train_pool(ds, split), D.holdout_pool(ds, split)
    assert held.indices[0].tolist() == [18, 19]
    assert train.indices[0].tolist() == list(range(18))
    assert set(held.class_ids) == {0, 1}
    assert split.holdout_count(3) == 1 and split.holdout_count(2) == 1
    with pytest.raises(ConfigError):
        D.split_pool(ds, split, "test")


# -- FSDS format -----------------------------------------------------------------------------


def test_round_trip_and_byte_identical(tmp_path):
    ds = small()
    path = tmp_path / "d.fsds"
    D.save_dataset(ds, path, manifest={"seed": 0})
    loaded = D.load_dataset(path)
    for a, b in zip(ds.classes, loaded.classes):
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.super_category == b.super_category
    D.save_dataset(loaded, tmp_path / "e.fsds")
    assert (tmp_path / "e.fsds").read_bytes() == path.read_bytes()
    assert json.loads(D.manifest_path(path).read_text()) == {"seed": 0}


def test_header_layout():
    buf = D.encode_dataset(small())
    assert buf[:4] == b"FSDS"
    assert np.frombuffer(buf[4:16], "<u4").tolist() == [1, 12, 6]
    assert np.frombuffer(buf[16:28], "<u4").tolist() == [0, 0, 10]


def test_untagged_class_round_trips():
    ds = D.FewShotDataset([D.ClassRecord(0, np.ones((2, 3)))], 3)
    assert D.decode_dataset(D.encode_dataset(ds)).classes[0].super_category is None
    with pytest.raises(ConfigError):
        ds.super_categories()


def test_format_errors_carry_offsets():
    buf = D.encode_dataset(small())
    with pytest.raises(FormatError) as info:
        D.decode_dataset(b"FSDX" + buf[4:])
    assert info.value.offset == 0
    bad_version = buf[:4] + np.uint32(2).tobytes() + buf[8:]
    with pytest.raises(FormatError) as info:
        D.decode_dataset(bad_version)
    assert info.value.offset == 4
    with pytest.raises(FormatError) as info:
        D.decode_dataset(buf[:50])
    assert info.value.offset == 28
    with pytest.raises(FormatError, match="trailing"):
        D.decode_dataset(buf + b"\0\0")
    sparse = buf[:16] + np.uint32(5).tobytes() + buf[20:]
    with pytest.raises(FormatError, match="dense") as info:
        D.decode_dataset(sparse)
    assert info.value.offset == 16


def test_subset_truncates_listed_classes():
    ds = small()
    sub = ds.subset({1: 3})
    assert len(sub.classes[1].samples) == 3 and len(sub.classes[0].samples) == 10
