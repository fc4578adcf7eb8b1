"""Forgetting and utility metrics.

Every metric reduces model predictions on a labeled sample set.  Computed
on the deletion set they measure memorization; on unseen samples of the
affected classes they measure property generalization.

* err: percent of mistakes among samples of the affected classes.
* fgt (confused classes): count of samples still cross-predicted inside
  the confused set; with all classes in the set this is simply the
  misclassified count.
* fgt (removed class): count of samples predicted as the removed class.
* comi: confidence-based membership inference; a per-class threshold on
  the target-class probability is fit on a shadow half and scored on a
  test half, averaged over balanced resampling runs.  50 means the
  attack cannot tell deletion-set members from unseen samples.
* utility_err: error on the retain distribution (test samples outside
  the affected classes for targeted tests, the full test split otherwise).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .engine import predict_probs
from .errors import ConfigurationError, EvaluationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """true-class x predicted-class counts."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def predicted_labels(model, features):
    """Argmax predictions; ties break toward the lower class id."""
    return np.argmax(predict_probs(model, features), axis=1)


def confusion_matrix(model, features, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EvaluationError("cannot build a confusion matrix from zero samples")
    preds = predicted_labels(model, features)
    k = model.num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise EvaluationError("labels outside [0, num_classes)")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _class_set(matrix, classes):
    classes = sorted(int(c) for c in classes)
    if any(c < 0 or c >= matrix.num_classes for c in classes):
        raise ConfigurationError(f"classes {classes} outside the matrix")
    if len(set(classes)) != len(classes):
        raise ConfigurationError("duplicate classes")
    return classes


def err(matrix, affected):
    """Percent of samples with true class in `affected` that were
    misclassified (into any class at all)."""
    affected = _class_set(matrix, affected)
    if not affected:
        raise EvaluationError("affected class set is empty")
    rows = matrix.counts[affected]
    total = int(rows.sum())
    if total == 0:
        raise EvaluationError("no evaluated samples in the affected classes")
    correct = int(matrix.counts[affected, affected].sum())
    return 100.0 * (total - correct) / total


def fgt_confusion(matrix, classes):
    """Count of samples cross-predicted within the confused class set:
    sum of C[i, j] + C[j, i] over unordered pairs {i, j}."""
    classes = _class_set(matrix, classes)
    if len(classes) < 2:
        raise ConfigurationError("confusion mode needs at least two classes")
    sub = matrix.counts[np.ix_(classes, classes)]
    return int(sub.sum() - np.trace(sub))


def fgt_removed_class(matrix, removed):
    """Count of evaluated samples the model predicts as the removed
    class (full column sum)."""
    (removed,) = _class_set(matrix, [removed])
    return int(matrix.counts[:, removed].sum())


def fgt(matrix, confused=None, removed_class=None):
    """Forgetting score; pass exactly one of `confused` (class set) or
    `removed_class`."""
    if (confused is None) == (removed_class is None):
        raise ConfigurationError("pass exactly one of confused / removed_class")
    if confused is not None:
        return fgt_confusion(matrix, confused)
    return fgt_removed_class(matrix, removed_class)


# --------------------------------------------------------------------
# confidence-based membership inference


@dataclass(frozen=True)
class MiaConfig:
    shadow_fraction: float = 0.5
    repetitions: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.shadow_fraction < 1.0:
            raise ConfigurationError("shadow_fraction must be in (0, 1)")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")


def threshold_candidates(values):
    """Midpoints between consecutive sorted distinct values, with -inf
    and +inf sentinels, in ascending order."""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def fit_threshold(probs, is_member):
    """Threshold maximizing accuracy of the rule `prob > threshold =>
    member`; ties break toward the smallest threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    best_thr = -np.inf
    best_acc = -1.0
    for thr in threshold_candidates(probs):
        acc = float(((probs > thr) == is_member).mean())
        if acc > best_acc:
            best_acc, best_thr = acc, thr
    return best_thr, best_acc


def attack_split_accuracy(probs, is_member, shadow_idx, test_idx):
    """Fit the threshold on the shadow rows, score on the test rows."""
    thr, _ = fit_threshold(probs[shadow_idx], is_member[shadow_idx])
    return float(((probs[test_idx] > thr) == is_member[test_idx]).mean())


def _comi_one_rep(class_probs, shadow_fraction, rng):
    accs = []
    weights = []
    for member, nonmember in class_probs:
        m = min(len(member), len(nonmember))
        if len(member) > m:
            member = member[rng.choice(len(member), size=m, replace=False)]
        if len(nonmember) > m:
            nonmember = nonmember[rng.choice(len(nonmember), size=m, replace=False)]
        probs = np.concatenate([member, nonmember])
        is_member = np.zeros(2 * m, dtype=bool)
        is_member[:m] = True
        perm = rng.permutation(2 * m)
        n_shadow = min(2 * m - 1, max(1, int(2 * m * shadow_fraction)))
        accs.append(
            attack_split_accuracy(probs, is_member, perm[:n_shadow], perm[n_shadow:])
        )
        weights.append(2 * m - n_shadow)
    return float(np.average(accs, weights=weights))


def comi_from_probs(member_probs, member_classes, nonmember_probs, nonmember_classes,
                    config):
    """Attack accuracy in percent from precomputed target-class
    probabilities and the target class of each sample."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    nonmember_probs = np.asarray(nonmember_probs, dtype=np.float64)
    member_classes = np.asarray(member_classes, dtype=np.int64)
    nonmember_classes = np.asarray(nonmember_classes, dtype=np.int64)
    if member_probs.size == 0 or nonmember_probs.size == 0:
        raise EvaluationError("both membership sides must be nonempty")

    class_probs = []
    for cls in sorted(set(member_classes.tolist()) | set(nonmember_classes.tolist())):
        member = member_probs[member_classes == cls]
        nonmember = nonmember_probs[nonmember_classes == cls]
        if min(len(member), len(nonmember)) < 2:
            warnings.warn(
                f"comi: target class {cls} skipped "
                f"({len(member)} member / {len(nonmember)} nonmember samples)",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        class_probs.append((member, nonmember))
    if not class_probs:
        raise EvaluationError("every target class was too small for the attack")

    streams = np.random.SeedSequence(config.seed).spawn(config.repetitions)
    reps = [
        _comi_one_rep(class_probs, config.shadow_fraction, np.random.default_rng(s))
        for s in streams
    ]
    return 100.0 * float(np.mean(reps))


def comi(model, member_features, member_targets, nonmember_features,
         nonmember_targets, config):
    """Confidence-based membership inference between the deletion set and
    unseen samples.  `*_targets` give the target class per sample (the
    manipulated label for IC, the true label otherwise); the attacked
    statistic is the model's probability for that class."""
    member_targets = np.asarray(member_targets, dtype=np.int64)
    nonmember_targets = np.asarray(nonmember_targets, dtype=np.int64)
    mp = predict_probs(model, member_features)
    up = predict_probs(model, nonmember_features)
    member_probs = mp[np.arange(len(member_targets)), member_targets]
    nonmember_probs = up[np.arange(len(nonmember_targets)), nonmember_targets]
    return comi_from_probs(
        member_probs, member_targets, nonmember_probs, nonmember_targets, config
    )


# --------------------------------------------------------------------
# utility


def utility_err(model, data, plan):
    """Test error on the retain distribution: for targeted tests (CR, IC)
    only test samples outside the affected classes count; untargeted
    tests (RS, RC) use the whole test split."""
    test_idx = data.test_indices
    if plan.kind in ("CR", "IC"):
        keep_classes = sorted(set(range(data.num_classes)) - plan.affected_classes)
    else:
        keep_classes = list(range(data.num_classes))
    if not keep_classes:
        raise EvaluationError("no unaffected classes to evaluate utility on")
    keep = np.isin(data.labels[test_idx], keep_classes)
    test_idx = test_idx[keep]
    if len(test_idx) == 0:
        raise EvaluationError("test split is empty after excluding affected classes")
    matrix = confusion_matrix(model, data.features[test_idx], data.labels[test_idx])
    return err(matrix, keep_classes)


# --------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricReport:
    metric: str
    target: str  # memorization | property_generalization | utility
    value: float
    unit: str  # percent | count

    def __post_init__(self):
        if self.unit == "percent" and not 0.0 <= self.value <= 100.0:
            raise ValueError(f"percent metric out of range: {self.value}")
        if self.unit == "count" and (self.value < 0 or self.value != int(self.value)):
            raise ValueError(f"count metric must be a nonnegative integer: {self.value}")
