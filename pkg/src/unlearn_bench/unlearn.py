"""Unlearning procedures: full retrain, EU-k, CF-k, and the noop baseline.

EU-k reinitializes the last k parameterized layers and retrains them from
scratch on the retain set with the prefix frozen; CF-k finetunes the last
k layers from their current weights for half the epochs (fresh learning-
rate schedule, fresh momentum).  Neither ever reads the deletion set.
With a frozen prefix both train the suffix on freeze-boundary features
precomputed once; the precomputation is timed separately from the
unlearning call itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .data import ArrayData
from .engine import (
    init_model,
    precompute_prefix_features,
    reinit_suffix,
    replace_suffix,
    suffix_model,
    train,
)
from .errors import ConfigurationError


@dataclass(frozen=True)
class UnlearnMethod:
    kind: str  # retrain | eu | cf | noop
    k: int | None = None
    cf_epochs: int | None = None

    def __post_init__(self):
        if self.kind not in ("retrain", "eu", "cf", "noop"):
            raise ConfigurationError(f"unknown unlearning method {self.kind!r}")
        if self.kind in ("eu", "cf"):
            if self.k is None or self.k < 1:
                raise ConfigurationError(f"{self.kind} needs k >= 1")
        elif self.k is not None:
            raise ConfigurationError(f"{self.kind} takes no k")
        if self.cf_epochs is not None:
            if self.kind != "cf":
                raise ConfigurationError("only cf takes an epochs override")
            if self.cf_epochs < 0:
                raise ConfigurationError("cf epochs override must be >= 0")

    @property
    def label(self):
        if self.kind in ("retrain", "noop"):
            return self.kind
        if self.kind == "cf" and self.cf_epochs is not None:
            return f"cf:{self.k}:{self.cf_epochs}"
        return f"{self.kind}:{self.k}"


def parse_method(token, default_k=None, default_cf_epochs=None):
    """Parse a method token: retrain | noop | eu[:k] | cf[:k[:epochs]].
    Omitted k / epochs fall back to the supplied defaults."""
    parts = token.strip().split(":")
    kind = parts[0]
    if kind in ("retrain", "noop"):
        if len(parts) != 1:
            raise ConfigurationError(f"{kind} takes no arguments: {token!r}")
        return UnlearnMethod(kind)
    if kind not in ("eu", "cf"):
        raise ConfigurationError(f"unknown unlearning method token {token!r}")
    try:
        k = int(parts[1]) if len(parts) > 1 and parts[1] != "" else default_k
        epochs = int(parts[2]) if len(parts) > 2 else default_cf_epochs
    except ValueError as exc:
        raise ConfigurationError(f"bad method token {token!r}") from exc
    if len(parts) > 3 or (kind == "eu" and len(parts) > 2):
        raise ConfigurationError(f"bad method token {token!r}")
    if k is None:
        raise ConfigurationError(
            f"{token!r} has no k and no default k was configured"
        )
    return UnlearnMethod(kind, k=k, cf_epochs=epochs if kind == "cf" else None)


@dataclass
class UnlearnResult:
    model: object
    wall_time_s: float
    method: UnlearnMethod
    precompute_time_s: float = 0.0


def _train_with_frozen_prefix(model, retain, config, frozen_prefix):
    """Train the unfrozen suffix, caching prefix features once when a
    prefix is frozen.  Returns (model, unlearn_seconds, precompute_seconds)."""
    if frozen_prefix == 0:
        start = time.perf_counter()
        trained = train(model, retain, config, frozen_prefix=0)
        return trained, time.perf_counter() - start, 0.0
    pre_start = time.perf_counter()
    cached = precompute_prefix_features(model, frozen_prefix, retain)
    suffix_data = ArrayData(cached, retain.labels)
    pre_s = time.perf_counter() - pre_start
    start = time.perf_counter()
    suffix = train(suffix_model(model, frozen_prefix), suffix_data, config)
    merged = replace_suffix(model, frozen_prefix, suffix)
    return merged, time.perf_counter() - start, pre_s


def retrain(arch_spec, retain, config, seed):
    """Train a fresh model on the retain set with the same procedure; the
    deletion set is never read."""
    start = time.perf_counter()
    model = train(init_model(arch_spec, seed), retain, config, frozen_prefix=0)
    wall = time.perf_counter() - start
    return UnlearnResult(model, wall, UnlearnMethod("retrain"))


def eu_k(original, retain, config, k, seed):
    """Exact-unlearn the last k parameterized layers: reinitialize them
    from a fresh seed and retrain them from scratch on the retain set."""
    total = original.param_layer_count
    if not 1 <= k <= total:
        raise ConfigurationError(f"k={k} outside [1, {total}]")
    fresh = reinit_suffix(original, k, seed)
    model, wall, pre_s = _train_with_frozen_prefix(fresh, retain, config, total - k)
    return UnlearnResult(model, wall, UnlearnMethod("eu", k=k), pre_s)


def cf_k(original, retain, config, k, cf_epochs=None):
    """Catastrophically forget the last k parameterized layers: finetune
    them on the retain set from their current weights, by default for
    half the epochs, with a restarted schedule and fresh momentum."""
    total = original.param_layer_count
    if not 1 <= k <= total:
        raise ConfigurationError(f"k={k} outside [1, {total}]")
    epochs = config.epochs // 2 if cf_epochs is None else cf_epochs
    method = UnlearnMethod("cf", k=k, cf_epochs=cf_epochs)
    if epochs == 0:
        return UnlearnResult(original.copy(), 0.0, method)
    finetune = replace(config, epochs=epochs)
    model, wall, pre_s = _train_with_frozen_prefix(
        original, retain, finetune, total - k
    )
    return UnlearnResult(model, wall, method, pre_s)


def apply(method, original, retain, arch_spec, config, seed):
    """Dispatch one unlearning method; wall time covers the unlearning
    call only."""
    if method.kind == "noop":
        return UnlearnResult(original.copy(), 0.0, method)
    if method.kind == "retrain":
        return retrain(arch_spec, retain, config, seed)
    if method.kind == "eu":
        return eu_k(original, retain, config, method.k, seed)
    return cf_k(original, retain, config, method.k, method.cf_epochs)
