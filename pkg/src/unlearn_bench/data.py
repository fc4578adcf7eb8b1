"""Dataset containers, synthetic blobs, IDX loading, and deletion plans.

A deletion test manipulates the train split of a labeled dataset and
nominates a deletion set:

* RS picks n random samples, equally many per class, labels untouched.
* CR picks n samples of one class, labels untouched (FCR = whole class).
* RC picks n random samples (equally per class) and relabels each to a
  different, uniformly chosen class.
* IC picks n/2 samples from each of two classes and swaps their labels.

The plan records the manipulated training labels, the deletion-set rows,
the affected classes, and the pre-manipulation labels (memorization
metrics score predictions against those).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DeletionSetAccessError, IdxFormatError, TestSpecError

TRAIN, VALID, TEST = 0, 1, 2
_SPLIT_NAMES = {"train": TRAIN, "valid": VALID, "test": TEST}


class ArrayData:
    """Plain (features, labels) pair; the storage behind views."""

    def __init__(self, features, labels):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels row counts differ")

    @property
    def n(self):
        return self.features.shape[0]

    def take(self, indices):
        return self.features[indices], self.labels[indices]


class DataView:
    """Lazy row view; every read goes through the underlying store, so
    audited stores see exactly what a consumer touched."""

    def __init__(self, store, indices):
        self.store = store
        self.indices = np.asarray(indices, dtype=np.int64)

    @property
    def n(self):
        return len(self.indices)

    @property
    def features(self):
        return self.store.take(self.indices)[0]

    @property
    def labels(self):
        return self.store.take(self.indices)[1]


class AuditedData:
    """Store wrapper that forbids reads of selected rows.

    mode="raise" turns a forbidden read into DeletionSetAccessError;
    mode="count" lets it through but tallies it in forbidden_reads.
    """

    def __init__(self, base, forbidden, mode="raise"):
        if mode not in ("raise", "count"):
            raise ValueError(f"unknown audit mode {mode!r}")
        self.base = base
        self.forbidden = np.unique(np.asarray(forbidden, dtype=np.int64))
        self.mode = mode
        self.forbidden_reads = 0

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        hits = int(np.isin(indices, self.forbidden).sum())
        if hits:
            self.forbidden_reads += hits
            if self.mode == "raise":
                raise DeletionSetAccessError(
                    f"{hits} deletion-set rows were read"
                )
        return self.base.take(indices)


class LabeledDataset:
    """Feature matrix + integer labels + per-sample split tags."""

    def __init__(self, features, labels, split, num_classes, feature_shape=None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.split = np.asarray(split, dtype=np.int8)
        self.num_classes = int(num_classes)
        if self.features.ndim != 2:
            raise ValueError("features must be (samples, dims)")
        if not (self.features.shape[0] == self.labels.shape[0] == self.split.shape[0]):
            raise ValueError("features, labels and split lengths differ")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("labels outside [0, num_classes)")
        if not np.isin(self.split, (TRAIN, VALID, TEST)).all():
            raise ValueError("split tags must be TRAIN, VALID or TEST")
        self.feature_shape = (
            tuple(feature_shape) if feature_shape else (self.features.shape[1],)
        )

    @property
    def n(self):
        return self.features.shape[0]

    def take(self, indices):
        return self.features[indices], self.labels[indices]

    def indices_of(self, split):
        return np.flatnonzero(self.split == split)

    @property
    def train_indices(self):
        return self.indices_of(TRAIN)

    @property
    def valid_indices(self):
        return self.indices_of(VALID)

    @property
    def test_indices(self):
        return self.indices_of(TEST)

    def view(self, indices):
        return DataView(self, indices)

    def check_split_coverage(self):
        """Every class must appear in both the train and test splits."""
        for split, name in ((TRAIN, "train"), (TEST, "test")):
            present = np.unique(self.labels[self.split == split])
            if len(present) != self.num_classes:
                missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
                raise ValueError(f"classes {missing} missing from the {name} split")


# --------------------------------------------------------------------
# synthetic data


def synth_gaussians(num_classes, per_class, dims, center_spread, noise_sigma, seed):
    """Isotropic Gaussian blobs with seeded class centers and a 70/15/15
    train/valid/test split stratified per class."""
    if num_classes < 2 or per_class < 1 or dims < 1:
        raise ValueError("num_classes >= 2, per_class >= 1, dims >= 1 required")
    if center_spread < 0 or noise_sigma < 0:
        raise ValueError("spreads must be nonnegative")
    center_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    centers = np.random.default_rng(center_ss).normal(
        0.0, center_spread, size=(num_classes, dims)
    )
    noise_rng = np.random.default_rng(noise_ss)

    n_train = int(0.70 * per_class)
    n_valid = int(0.15 * per_class)
    n_test = per_class - n_train - n_valid
    if min(n_train, n_test) < 1:
        raise ValueError(f"per_class={per_class} too small for a 70/15/15 split")

    features = np.empty((num_classes * per_class, dims))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    split = np.empty(num_classes * per_class, dtype=np.int8)
    tags = np.concatenate(
        [
            np.full(n_train, TRAIN, dtype=np.int8),
            np.full(n_valid, VALID, dtype=np.int8),
            np.full(n_test, TEST, dtype=np.int8),
        ]
    )
    for c in range(num_classes):
        rows = slice(c * per_class, (c + 1) * per_class)
        features[rows] = centers[c] + noise_rng.normal(
            0.0, noise_sigma, size=(per_class, dims)
        )
        labels[rows] = c
        split[rows] = tags
    return LabeledDataset(features, labels, split, num_classes)


# --------------------------------------------------------------------
# IDX files

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_idx(path, magic, ndims):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file shorter than the magic number", len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic {got:#010x}, expected {magic:#010x}", 0)
    header_end = 4 + 4 * ndims
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndims}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) != header_end + count:
        raise IdxFormatError(
            f"{path}: expected {count} data bytes, file ends early",
            min(len(raw), header_end + count),
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    return data.reshape(dims)


def load_idx(image_path, label_path, split="train", num_classes=None):
    """Load a classic IDX image/label file pair (big-endian headers,
    unsigned bytes).  Pixels are scaled to [0, 1]; all samples get the
    given split tag."""
    images = _read_idx(image_path, _IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(label_path, _IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{image_path} has {images.shape[0]} images but {label_path} "
            f"has {labels.shape[0]} labels",
            0,
        )
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    tag = _SPLIT_NAMES[split]
    return LabeledDataset(
        features,
        labels,
        np.full(n, tag, dtype=np.int8),
        num_classes,
        feature_shape=(1, rows, cols),
    )


def from_idx_files(
    train_images, train_labels, test_images, test_labels, valid_fraction=0.0, seed=0
):
    """Combine separate IDX train/test pairs into one dataset, optionally
    carving a seeded validation slice out of the train portion."""
    train = load_idx(train_images, train_labels, split="train")
    test = load_idx(test_images, test_labels, split="test")
    num_classes = max(train.num_classes, test.num_classes)
    split = np.concatenate([train.split, test.split])
    if valid_fraction:
        if not 0 < valid_fraction < 1:
            raise ValueError("valid_fraction must be in (0, 1)")
        rng = np.random.default_rng(seed)
        n_valid = int(valid_fraction * train.n)
        chosen = rng.choice(train.n, size=n_valid, replace=False)
        split[chosen] = VALID
    ds = LabeledDataset(
        np.concatenate([train.features, test.features]),
        np.concatenate([train.labels, test.labels]),
        split,
        num_classes,
        feature_shape=train.feature_shape,
    )
    ds.check_split_coverage()
    return ds


# --------------------------------------------------------------------
# deletion plans


@dataclass(frozen=True)
class TestSpec:
    """One deletion-test instance: the kind, the deletion-set size, the
    class parameters (CR's removed class, IC's confused pair), and the
    sampling seed."""

    __test__ = False  # "Test" prefix is domain language, not a pytest class

    kind: str
    n: int
    removed_class: int | None = None
    classes: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("RS", "CR", "RC", "IC"):
            raise TestSpecError(f"unknown test kind {self.kind!r}")
        if self.n < 1:
            raise TestSpecError("deletion-set size must be >= 1")
        if self.kind == "CR" and self.removed_class is None:
            raise TestSpecError("CR needs removed_class")
        if self.kind == "IC":
            if self.classes is None or len(self.classes) != 2:
                raise TestSpecError("IC needs a pair of confused classes")
            a, b = self.classes
            if a == b:
                raise TestSpecError("IC classes must be distinct")
            object.__setattr__(self, "classes", (int(a), int(b)))
            if self.n % 2:
                raise TestSpecError("IC needs an even deletion-set size")


@dataclass(frozen=True)
class DeletionPlan:
    """Manipulated training data plus the deletion-set bookkeeping.

    d_prime holds the train split with manipulated labels; df_indices
    index rows of d_prime; original_labels are the pre-manipulation
    labels of those rows, aligned with df_indices.
    """

    kind: str
    d_prime: ArrayData
    df_indices: np.ndarray
    affected_classes: frozenset
    original_labels: np.ndarray
    num_classes: int
    spec: TestSpec

    @property
    def n(self):
        return len(self.df_indices)

    def retain_indices(self):
        mask = np.ones(self.d_prime.n, dtype=bool)
        mask[self.df_indices] = False
        return np.flatnonzero(mask)

    def retain_view(self, audit="raise"):
        """View of D' minus the deletion set; reads of deletion-set rows
        through the underlying store are audited."""
        store = AuditedData(self.d_prime, self.df_indices, mode=audit)
        return DataView(store, self.retain_indices()), store

    def df_view(self):
        """Deletion-set rows with their manipulated (D') labels."""
        return DataView(self.d_prime, self.df_indices)


def _per_class_quota(spec, labels, num_classes, rng):
    if spec.n % num_classes:
        raise TestSpecError(
            f"{spec.kind} draws equally per class: n={spec.n} is not a "
            f"multiple of {num_classes}"
        )
    quota = spec.n // num_classes
    chosen = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < quota:
            raise TestSpecError(
                f"class {c} has {len(pool)} train samples, need {quota}"
            )
        chosen.append(rng.choice(pool, size=quota, replace=False))
    return np.sort(np.concatenate(chosen))


def make_deletion_plan(data, spec):
    """Build the deletion plan for `spec` on `data`'s train split.

    Pure in (data, spec): the same inputs give the same plan.  Sampling
    is without replacement; only IC and RC touch labels, and never
    outside the deletion set.
    """
    train_idx = data.train_indices
    if len(train_idx) == 0:
        raise TestSpecError("dataset has no train split")
    labels = data.labels[train_idx].copy()
    rng = np.random.default_rng(spec.seed)
    num_classes = data.num_classes

    if spec.kind == "RS":
        df = _per_class_quota(spec, labels, num_classes, rng)
        affected = frozenset(range(num_classes))
    elif spec.kind == "CR":
        c = int(spec.removed_class)
        if not 0 <= c < num_classes:
            raise TestSpecError(f"removed class {c} outside [0, {num_classes})")
        pool = np.flatnonzero(labels == c)
        if spec.n > len(pool):
            raise TestSpecError(
                f"CR asks for {spec.n} samples, class {c} has {len(pool)}"
            )
        df = np.sort(rng.choice(pool, size=spec.n, replace=False))
        affected = frozenset({c})
    elif spec.kind == "RC":
        df = _per_class_quota(spec, labels, num_classes, rng)
        affected = frozenset(range(num_classes))
    else:  # IC
        a, b = spec.classes
        if not (0 <= a < num_classes and 0 <= b < num_classes):
            raise TestSpecError(f"IC classes {spec.classes} out of range")
        half = spec.n // 2
        picks = []
        for c in (a, b):
            pool = np.flatnonzero(labels == c)
            if half > len(pool):
                raise TestSpecError(
                    f"IC asks for {half} samples of class {c}, have {len(pool)}"
                )
            picks.append(rng.choice(pool, size=half, replace=False))
        df = np.sort(np.concatenate(picks))
        affected = frozenset({a, b})

    original = labels[df].copy()
    if spec.kind == "RC":
        # Uniform new label among the other classes: shift draws past the
        # original label so new != original by construction.
        draws = rng.integers(0, num_classes - 1, size=len(df))
        labels[df] = draws + (draws >= original)
    elif spec.kind == "IC":
        a, b = spec.classes
        swapped = np.where(original == a, b, a)
        labels[df] = swapped

    d_prime = ArrayData(data.features[train_idx], labels)
    return DeletionPlan(
        kind=spec.kind,
        d_prime=d_prime,
        df_indices=df,
        affected_classes=affected,
        original_labels=original,
        num_classes=num_classes,
        spec=spec,
    )


def dt_for(plan, data):
    """Evaluation subset for property generalization: unseen test-split
    samples of the affected classes for targeted tests (CR, IC), the
    whole test split otherwise."""
    test_idx = data.test_indices
    if plan.kind in ("CR", "IC"):
        keep = np.isin(data.labels[test_idx], sorted(plan.affected_classes))
        test_idx = test_idx[keep]
    return data.view(test_idx)
