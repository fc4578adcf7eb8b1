"""Scaling analysis for data-influence-isolation unlearning.

When training is split into P parts and each sample influences exactly one
part, deleting n uniformly-assigned samples touches a random number of
parts.  This module evaluates the expected number of affected parts and
the probability that *every* part is affected (forcing a full retrain),
and emits both curves as CSV for plotting.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from fractions import Fraction

from .errors import NumericalStabilityError

# Above this many deletions the exact rational path would carry
# multi-megabit integers; the float formula is accurate to ~1e-15 there.
_EXACT_N_LIMIT = 10_000

# Alternating-sum cancellation in float64 stays below ~1e-10 relative up
# to 60 parts; beyond that callers must use the exact integer path.
_FLOAT_PARTS_LIMIT = 60


def _check_counts(parts, deletions):
    if not isinstance(parts, int) or isinstance(parts, bool) or parts < 1:
        raise ValueError(f"parts must be a positive integer, got {parts!r}")
    if not isinstance(deletions, int) or isinstance(deletions, bool) or deletions < 0:
        raise ValueError(f"deletions must be a nonnegative integer, got {deletions!r}")


def expected_affected(parts, deletions):
    """Expected number of parts hit by `deletions` uniform assignments.

    Evaluates P*(1 - (1 - 1/P)^n).  Small instances go through exact
    rational arithmetic so the endpoint identities (0 at n=0, exactly 1
    at n=1) hold to the bit; huge n falls back to the float formula.
    """
    _check_counts(parts, deletions)
    if deletions == 0:
        return 0.0
    if deletions <= _EXACT_N_LIMIT:
        miss = Fraction(parts - 1, parts) ** deletions
        return float(parts * (1 - miss))
    return parts * -math.expm1(deletions * math.log1p(-1.0 / parts))


def surjection_count(deletions, parts):
    """Number of ways to assign `deletions` labeled balls onto `parts`
    boxes leaving none empty (inclusion-exclusion, exact integers)."""
    _check_counts(parts, deletions)
    return sum(
        (-1) ** j * math.comb(parts, j) * (parts - j) ** deletions
        for j in range(parts + 1)
    )


def full_retrain_prob_exact(parts, deletions):
    """Probability that all parts are affected, as an exact Fraction."""
    _check_counts(parts, deletions)
    if deletions < parts:
        return Fraction(0)
    return Fraction(surjection_count(deletions, parts), parts**deletions)


def full_retrain_prob(parts, deletions, exact=False):
    """Probability that a uniform assignment of `deletions` to `parts`
    leaves no part empty, i.e. every part must be retrained.

    Small instances go through the exact big-integer path regardless.
    Otherwise the float path evaluates the alternating inclusion-exclusion
    sum with compensated summation and refuses parts > 60, where
    cancellation would eat the answer; pass exact=True for the big-integer
    path, which is valid for any size.
    """
    _check_counts(parts, deletions)
    if exact:
        return float(full_retrain_prob_exact(parts, deletions))
    if parts > _FLOAT_PARTS_LIMIT:
        raise NumericalStabilityError(
            f"float path unreliable for parts={parts} > {_FLOAT_PARTS_LIMIT}; "
            "call full_retrain_prob(..., exact=True)"
        )
    if deletions < parts:
        return 0.0
    if deletions <= _EXACT_N_LIMIT:
        # Cheap here, and the alternating sum cancels catastrophically in
        # float64 when the probability is far below one.
        return float(full_retrain_prob_exact(parts, deletions))
    # deletions >> parts: every term is minuscule, the sum is benign.
    log_p = math.log(parts)
    # Neumaier-compensated alternating sum of C(P,j) * ((P-j)/P)^n.
    total = 0.0
    comp = 0.0
    for j in range(1, parts + 1):
        if j == parts:
            term = 0.0
        else:
            term = math.comb(parts, j) * math.exp(
                deletions * (math.log(parts - j) - log_p)
            )
        if j % 2 == 0:
            term = -term
        s = total + term
        if abs(total) >= abs(term):
            comp += (total - s) + term
        else:
            comp += (term - s) + total
        total = s
    prob = 1.0 - (total + comp)
    return min(1.0, max(0.0, prob))


@dataclass(frozen=True)
class CurvePoint:
    kind: str  # "expected_affected" | "retrain_prob"
    parts: int
    n: int
    value: float


def emit_curves(parts_list, n_max, step=1, path=None):
    """Tabulate both curves over n = 0, step, ..., n_max for each part
    count, sorted by (kind, parts, n).  Writes CSV to `path` if given
    (atomically: temp file then rename) and returns the points."""
    parts_list = sorted(set(parts_list))
    if not parts_list or n_max < 0 or step < 1:
        raise ValueError("need at least one part count, n_max >= 0, step >= 1")
    ns = range(0, n_max + 1, step)
    points = []
    for kind in ("expected_affected", "retrain_prob"):
        for parts in parts_list:
            for n in ns:
                if kind == "expected_affected":
                    value = expected_affected(parts, n)
                else:
                    value = full_retrain_prob(parts, n, exact=True)
                points.append(CurvePoint(kind, parts, n, value))
    if path is not None:
        lines = ["kind,P,n,value"]
        lines += [f"{p.kind},{p.parts},{p.n},{p.value!r}" for p in points]
        text = "\n".join(lines) + "\n"
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return points
