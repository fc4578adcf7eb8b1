"""Datasets, IDX parsing, and deletion-plan construction."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_bench.data import (
    TEST,
    TRAIN,
    VALID,
    ArrayData,
    AuditedData,
    DataView,
    LabeledDataset,
    TestSpec,
    dt_for,
    from_idx_files,
    load_idx,
    make_deletion_plan,
    synth_gaussians,
)
from unlearn_bench.errors import DeletionSetAccessError, IdxFormatError, TestSpecError


def small_dataset(num_classes=4, per_class=40, seed=0):
    return synth_gaussians(num_classes, per_class, dims=3, center_spread=3.0,
                           noise_sigma=0.4, seed=seed)


# --------------------------------------------------------------------
# synthetic


class TestSynthGaussians:
    def test_deterministic(self):
        a = small_dataset(seed=5)
        b = small_dataset(seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.split, b.split)

    def test_split_arithmetic(self):
        ds = synth_gaussians(4, 500, 8, 1.0, 0.1, seed=0)
        for c in range(4):
            mask = ds.labels == c
            assert (ds.split[mask] == TRAIN).sum() == 350
            assert (ds.split[mask] == VALID).sum() == 75
            assert (ds.split[mask] == TEST).sum() == 75

    def test_zero_noise_nearest_center(self):
        ds = synth_gaussians(3, 30, 5, 2.0, 0.0, seed=1)
        test_idx = ds.test_indices
        centers = np.stack(
            [ds.features[ds.labels == c][0] for c in range(3)]
        )
        d = ((ds.features[test_idx][:, None, :] - centers[None]) ** 2).sum(-1)
        assert np.array_equal(d.argmin(axis=1), ds.labels[test_idx])

    def test_coverage(self):
        small_dataset().check_split_coverage()

    def test_bad_params(self):
        with pytest.raises(ValueError):
            synth_gaussians(1, 10, 2, 1.0, 0.1, 0)
        with pytest.raises(ValueError):
            synth_gaussians(3, 1, 2, 1.0, 0.1, 0)  # too few for a split


# --------------------------------------------------------------------
# IDX files


def write_idx_pair(tmp_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img_path = tmp_path / "images.idx3"
    lbl_path = tmp_path / "labels.idx1"
    img_path.write_bytes(
        struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes()
    )
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, n) + labels.tobytes())
    return str(img_path), str(lbl_path)


class TestLoadIdx:
    def test_shapes_and_scaling(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 28, 28))
        labels = rng.integers(0, 5, size=10)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(img, lbl)
        assert ds.features.shape == (10, 784)
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0
        assert np.array_equal(ds.labels, labels)
        assert np.array_equal(
            ds.features * 255.0, images.reshape(10, -1).astype(float)
        )

    def test_all_zero_image(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((2, 4, 4)), [0, 1])
        ds = load_idx(img, lbl)
        assert np.all(ds.features == 0.0)

    def test_bad_magic_offset_zero(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((2, 4, 4)), [0, 1])
        raw = bytearray(open(img, "rb").read())
        raw[2] = 0x99
        open(img, "wb").write(bytes(raw))
        with pytest.raises(IdxFormatError) as info:
            load_idx(img, lbl)
        assert info.value.offset == 0

    def test_truncated_file(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((4, 4, 4)), [0, 1, 2, 3])
        raw = open(img, "rb").read()
        open(img, "wb").write(raw[:-7])
        with pytest.raises(IdxFormatError) as info:
            load_idx(img, lbl)
        assert info.value.offset == len(raw) - 7

    def test_count_mismatch(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        img, _ = write_idx_pair(a, np.zeros((3, 4, 4)), [0, 1, 2])
        _, lbl = write_idx_pair(b, np.zeros((2, 4, 4)), [0, 1])
        with pytest.raises(IdxFormatError):
            load_idx(img, lbl)

    def test_combined_dataset(self, tmp_path):
        rng = np.random.default_rng(1)
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        tr_img, tr_lbl = write_idx_pair(
            a, rng.integers(0, 256, size=(20, 4, 4)), np.arange(20) % 3
        )
        te_img, te_lbl = write_idx_pair(
            b, rng.integers(0, 256, size=(9, 4, 4)), np.arange(9) % 3
        )
        ds = from_idx_files(tr_img, tr_lbl, te_img, te_lbl, valid_fraction=0.2, seed=0)
        assert ds.n == 29
        assert len(ds.valid_indices) == 4
        assert len(ds.test_indices) == 9
        ds.check_split_coverage()


# --------------------------------------------------------------------
# views + audit


class TestViews:
    def test_view_reads_through_store(self):
        store = ArrayData(np.arange(12).reshape(6, 2), np.arange(6))
        view = DataView(store, [1, 3])
        assert np.array_equal(view.labels, [1, 3])
        assert view.n == 2

    def test_audit_raises_on_forbidden(self):
        store = AuditedData(
            ArrayData(np.zeros((6, 2)), np.arange(6)), forbidden=[2, 4]
        )
        DataView(store, [0, 1, 5]).features  # allowed
        with pytest.raises(DeletionSetAccessError):
            DataView(store, [0, 2]).features
        assert store.forbidden_reads == 1

    def test_audit_count_mode(self):
        store = AuditedData(
            ArrayData(np.zeros((6, 2)), np.arange(6)), forbidden=[2, 4],
            mode="count",
        )
        DataView(store, [2, 4, 5]).labels
        assert store.forbidden_reads == 2


# --------------------------------------------------------------------
# deletion plans


class TestSpecValidation:
    def test_bad_kind(self):
        with pytest.raises(TestSpecError):
            TestSpec("XX", 4)

    def test_ic_needs_even_n(self):
        with pytest.raises(TestSpecError):
            TestSpec("IC", 5, classes=(0, 1))

    def test_ic_needs_distinct_pair(self):
        with pytest.raises(TestSpecError):
            TestSpec("IC", 4, classes=(1, 1))

    def test_cr_needs_class(self):
        with pytest.raises(TestSpecError):
            TestSpec("CR", 4)


class TestMakeDeletionPlan:
    def test_pure_function_of_inputs(self):
        ds = small_dataset()
        spec = TestSpec("IC", 8, classes=(0, 2), seed=3)
        a = make_deletion_plan(ds, spec)
        b = make_deletion_plan(ds, spec)
        assert np.array_equal(a.df_indices, b.df_indices)
        assert np.array_equal(a.d_prime.labels, b.d_prime.labels)

    def test_rs_equal_per_class_and_untouched_labels(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("RS", 8, seed=1))
        train_labels = ds.labels[ds.train_indices]
        assert np.array_equal(plan.d_prime.labels, train_labels)
        df_labels = train_labels[plan.df_indices]
        assert [int((df_labels == c).sum()) for c in range(4)] == [2, 2, 2, 2]
        assert plan.affected_classes == frozenset(range(4))

    def test_rs_divisibility_enforced(self):
        with pytest.raises(TestSpecError):
            make_deletion_plan(small_dataset(num_classes=4), TestSpec("RS", 6))

    def test_cr_full_class(self):
        ds = small_dataset(num_classes=4, per_class=40)  # 28 train per class
        plan = make_deletion_plan(ds, TestSpec("CR", 28, removed_class=2, seed=0))
        train_labels = ds.labels[ds.train_indices]
        assert np.array_equal(plan.d_prime.labels, train_labels)
        assert set(train_labels[plan.df_indices]) == {2}
        assert plan.n == 28
        assert plan.affected_classes == frozenset({2})
        assert len(np.flatnonzero(train_labels == 2)) == 28  # FCR: all of them

    def test_cr_too_large(self):
        ds = small_dataset(num_classes=4, per_class=40)
        with pytest.raises(TestSpecError):
            make_deletion_plan(ds, TestSpec("CR", 29, removed_class=2))

    def test_rc_mislabels_only_deletion_set(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("RC", 8, seed=7))
        train_labels = ds.labels[ds.train_indices]
        assert np.all(plan.d_prime.labels[plan.df_indices] != plan.original_labels)
        retain = plan.retain_indices()
        assert np.array_equal(plan.d_prime.labels[retain], train_labels[retain])
        assert np.array_equal(plan.original_labels, train_labels[plan.df_indices])

    def test_ic_swap_counts(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("IC", 4, classes=(0, 1), seed=2))
        new = plan.d_prime.labels[plan.df_indices]
        old = plan.original_labels
        assert ((old == 0) & (new == 1)).sum() == 2
        assert ((old == 1) & (new == 0)).sum() == 2
        assert plan.affected_classes == frozenset({0, 1})

    def test_ic_conserves_label_multiset(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("IC", 10, classes=(1, 3), seed=9))
        before = np.bincount(ds.labels[ds.train_indices], minlength=4)
        after = np.bincount(plan.d_prime.labels, minlength=4)
        assert np.array_equal(before, after)

    def test_ic_too_large(self):
        ds = small_dataset(num_classes=4, per_class=40)
        with pytest.raises(TestSpecError):
            make_deletion_plan(ds, TestSpec("IC", 60, classes=(0, 1)))

    @given(st.sampled_from(["RS", "RC"]), st.integers(1, 5), st.integers(0, 10))
    @settings(max_examples=25, deadline=None)
    def test_retain_labels_never_touched(self, kind, quota, seed):
        ds = small_dataset(num_classes=3, per_class=30)
        plan = make_deletion_plan(ds, TestSpec(kind, 3 * quota, seed=seed))
        train_labels = ds.labels[ds.train_indices]
        retain = plan.retain_indices()
        assert np.array_equal(plan.d_prime.labels[retain], train_labels[retain])
        assert len(plan.df_indices) == 3 * quota
        assert len(np.unique(plan.df_indices)) == 3 * quota

    def test_affected_set_sizes(self):
        ds = small_dataset(num_classes=4)
        assert len(make_deletion_plan(ds, TestSpec("RS", 4)).affected_classes) == 4
        assert len(make_deletion_plan(ds, TestSpec("RC", 4)).affected_classes) == 4
        assert (
            len(
                make_deletion_plan(
                    ds, TestSpec("CR", 5, removed_class=1)
                ).affected_classes
            )
            == 1
        )
        assert (
            len(
                make_deletion_plan(
                    ds, TestSpec("IC", 4, classes=(2, 3))
                ).affected_classes
            )
            == 2
        )

    def test_retain_view_is_audited(self):
        ds = small_dataset()
        plan = make_deletion_plan(ds, TestSpec("IC", 8, classes=(0, 1), seed=0))
        view, store = plan.retain_view()
        _ = view.features
        assert store.forbidden_reads == 0
        with pytest.raises(DeletionSetAccessError):
            store.take(plan.df_indices[:1])


class TestDtFor:
    def test_ic_only_affected_classes(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("IC", 4, classes=(0, 2)))
        dt = dt_for(plan, ds)
        assert set(dt.labels.tolist()) == {0, 2}

    def test_rs_full_test_split(self):
        ds = small_dataset(num_classes=4)
        plan = make_deletion_plan(ds, TestSpec("RS", 4))
        assert dt_for(plan, ds).n == len(ds.test_indices)

    def test_fcr_single_class(self):
        ds = small_dataset(num_classes=4, per_class=40)
        plan = make_deletion_plan(ds, TestSpec("CR", 28, removed_class=3))
        dt = dt_for(plan, ds)
        assert set(dt.labels.tolist()) == {3}
        assert dt.n == (ds.labels[ds.test_indices] == 3).sum()


class TestLabeledDataset:
    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), [0, 1, 5], [0, 0, 2], num_classes=3)

    def test_rejects_bad_split(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), [0, 1], [0, 7], num_classes=2)

    def test_coverage_check(self):
        ds = LabeledDataset(np.zeros((4, 2)), [0, 1, 0, 0], [0, 0, 2, 2],
                            num_classes=2)
        with pytest.raises(ValueError):
            ds.check_split_coverage()
