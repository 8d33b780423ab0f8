import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glom.data import (
    AugmentSpec,
    LabeledImageSet,
    augment,
    kfold_split,
    load_dataset,
    preprocess,
    resize_bilinear,
    save_images,
    split_to_k,
)
from glom.errors import DataError, FormatError, ParameterError, PlanError
from glom.synth import SynthSpec, read_manifest, synth_generate


def tiny_set(n=6, size=8, k=2, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledImageSet(rng.random((n, 3, size, size)), np.arange(n) % k, [f"s{i}" for i in range(n)],
                           [f"c{j}" for j in range(k)])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 2000), st.sampled_from([2, 3, 5, 10]), st.integers(0, 2**16), st.integers(1, 4))
def test_folds_partition_and_stratify(n, k, seed, classes):
    if n < k:
        return
    labels = np.random.default_rng(seed).integers(0, classes, n)
    plan = kfold_split(n, k, seed=seed, labels=labels)
    flat = np.concatenate([plan.validation(j) for j in range(k)])
    assert sorted(flat.tolist()) == list(range(n))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for c in np.unique(labels):
        share = np.sum(labels == c) / k
        for j in range(k):
            assert abs(np.sum(labels[plan.validation(j)] == c) - share) < 1
    for j in range(k):
        assert set(plan.training(j)).isdisjoint(plan.validation(j))
        assert len(plan.training(j)) + len(plan.validation(j)) == n


def test_fold_plan_is_seeded():
    assert kfold_split(50, 5, seed=3).folds == kfold_split(50, 5, seed=3).folds
    assert kfold_split(50, 5, seed=3).folds != kfold_split(50, 5, seed=4).folds


def test_fold_plan_json_round_trip():
    plan = kfold_split(23, 3, seed=1)
    assert type(plan).from_json(plan.to_json()) == plan


def test_fold_plan_rejects_bad_partition():
    with pytest.raises(PlanError):
        type(kfold_split(4, 2))(4, 2, 0, [[0, 1], [1, 2]])


@pytest.mark.parametrize("n,k", [(5, 1), (3, 4)])
def test_kfold_bad_arguments(n, k):
    with pytest.raises(ParameterError):
        kfold_split(n, k)


@pytest.mark.parametrize("split,k", [("90/10", 10), ("80/20", 5), ("67/33", 3), ("50/50", 2), ("7", 7), (4, 4)])
def test_split_mapping(split, k):
    assert split_to_k(split) == k


def test_unknown_split():
    with pytest.raises(ParameterError):
        split_to_k("70/30")


def test_augmentation_doubles_training_fold_only():
    data = tiny_set(10)
    plan = kfold_split(10, 5, seed=0, labels=data.labels)
    tr, va = data.subset(plan.training(0)), data.subset(plan.validation(0))
    before = va.images.copy()
    aug = augment(tr, AugmentSpec(seed=1))
    assert len(aug) == 2 * len(tr)
    np.testing.assert_array_equal(aug.images[: len(tr)], tr.images)
    np.testing.assert_array_equal(aug.labels, np.r_[tr.labels, tr.labels])
    assert aug.origins == tr.origins * 2
    assert aug.augmented.sum() == len(tr)
    np.testing.assert_array_equal(va.images, before)
    assert not set(aug.origins) & set(va.origins)


def test_augmentation_is_seeded_and_bounded():
    data = tiny_set(4, size=16)
    a = augment(data, AugmentSpec(seed=5))
    b = augment(data, AugmentSpec(seed=5))
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_identity_transform_when_ranges_collapse():
    data = tiny_set(3)
    spec = AugmentSpec(rotation=0, flip_prob=0, zoom=(1, 1), shift=0)
    np.testing.assert_array_equal(augment(data, spec).images[3:], data.images)


def test_flip_only_transform_mirrors():
    data = tiny_set(2)
    spec = AugmentSpec(rotation=0, flip_prob=1, zoom=(1, 1), shift=0)
    np.testing.assert_array_equal(augment(data, spec).images[2:], data.images[..., ::-1])


@pytest.mark.parametrize("kwargs", [dict(rotation=-1), dict(flip_prob=2), dict(zoom=(0, 1)), dict(zoom=(1.2, 1.1))])
def test_augment_spec_validation(kwargs):
    with pytest.raises(ParameterError):
        AugmentSpec(**kwargs)


def test_preprocess_shapes_and_range():
    gray = np.arange(30 * 20, dtype=np.uint8).reshape(30, 20)
    out = preprocess(gray, 16)
    assert out.shape == (3, 16, 16) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out[0], out[1])
    conforming = np.random.default_rng(0).random((3, 16, 16))
    np.testing.assert_array_equal(preprocess(conforming, 16), conforming)


def test_preprocess_rejects_bad_pixels():
    with pytest.raises(FormatError):
        preprocess(np.zeros((4, 4, 2)), 8)
    with pytest.raises(FormatError):
        preprocess(np.zeros((0, 4)), 8)


def test_resize_identity_and_constant():
    img = np.random.default_rng(1).random((5, 7, 3))
    np.testing.assert_array_equal(resize_bilinear(img, 5, 7), img)
    np.testing.assert_allclose(resize_bilinear(np.full((4, 4, 3), 0.3), 9, 2), 0.3)


def test_dataset_round_trip(tmp_path):
    data = synth_generate(SynthSpec(size=32, per_class=3, seed=2)).data
    save_images(LabeledImageSet(data.images, data.labels, [f"{i}.png" for i in data.ids], data.class_names), tmp_path)
    back = load_dataset(tmp_path, 32)
    assert back.class_names == data.class_names
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_array_equal(back.images, data.images)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "a").mkdir()
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "a" / "x.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_labeled_set_validation():
    with pytest.raises(DataError):
        LabeledImageSet(np.zeros((2, 3, 4, 4)), [0, 0], ["a", "a"], ["c"])
    with pytest.raises(DataError):
        LabeledImageSet(np.zeros((2, 3, 4, 4)), [0, 2], ["a", "b"], ["c", "d"])


def test_synth_counts_and_determinism(tmp_path):
    spec = SynthSpec.four_class(size=32, per_class=4, seed=7)
    res = synth_generate(spec, tmp_path)
    assert len(res.data) == 16
    assert res.data.class_counts() == {c: 4 for c in sorted(spec.classes)}
    rows = read_manifest(tmp_path / "manifest.csv")
    assert len(rows) == 16
    normal = [r["nucleus_count"] for r in rows if r["class"] == "normal"]
    lesion = [r["nucleus_count"] for r in rows if r["class"] != "normal"]
    assert max(normal) < spec.lesion_threshold <= min(lesion)
    again = synth_generate(spec).data
    np.testing.assert_array_equal(again.images, res.data.images)
