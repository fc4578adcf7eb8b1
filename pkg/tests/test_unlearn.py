"""Unlearning procedures: structural equivalences, deletion-set
blindness, and method parsing."""

import numpy as np
import pytest

from unlearn_bench.data import TestSpec, make_deletion_plan, synth_gaussians
from unlearn_bench.engine import ArchSpec, TrainingConfig, init_model, params_equal, train
from unlearn_bench.errors import ConfigurationError
from unlearn_bench.unlearn import (
    UnlearnMethod,
    apply,
    cf_k,
    eu_k,
    parse_method,
    retrain,
)

ARCH = ArchSpec("dense:24,relu,dense:16,relu,dense:3", (4,), 3)
CFG = TrainingConfig(epochs=6, batch_size=32, seed=21)


@pytest.fixture(scope="module")
def setting():
    data = synth_gaussians(3, 60, dims=4, center_spread=3.0, noise_sigma=0.5, seed=1)
    plan = make_deletion_plan(data, TestSpec("IC", 12, classes=(0, 1), seed=4))
    original = train(init_model(ARCH, 11), plan.d_prime, CFG)
    retain, audit = plan.retain_view(audit="count")
    return data, plan, original, retain, audit


class TestParseMethod:
    def test_plain_tokens(self):
        assert parse_method("retrain") == UnlearnMethod("retrain")
        assert parse_method("noop") == UnlearnMethod("noop")
        assert parse_method("eu:2") == UnlearnMethod("eu", k=2)
        assert parse_method("cf:3") == UnlearnMethod("cf", k=3)
        assert parse_method("cf:3:10") == UnlearnMethod("cf", k=3, cf_epochs=10)

    def test_defaults(self):
        assert parse_method("eu", default_k=4) == UnlearnMethod("eu", k=4)
        assert parse_method("cf", default_k=4, default_cf_epochs=7) == UnlearnMethod(
            "cf", k=4, cf_epochs=7
        )

    def test_labels(self):
        assert parse_method("cf:3:10").label == "cf:3:10"
        assert parse_method("eu:1").label == "eu:1"
        assert parse_method("noop").label == "noop"

    def test_bad_tokens(self):
        for token in ("eu", "cf:x", "eu:1:2", "retrain:1", "magic", "cf:0"):
            with pytest.raises(ConfigurationError):
                parse_method(token)


class TestRetrain:
    def test_deterministic_and_matches_plain_train(self, setting):
        _, _, _, retain, _ = setting
        a = retrain(ARCH, retain, CFG, seed=33)
        b = retrain(ARCH, retain, CFG, seed=33)
        assert params_equal(a.model, b.model)
        direct = train(init_model(ARCH, 33), retain, CFG)
        assert params_equal(a.model, direct)
        assert a.wall_time_s >= 0.0

    def test_never_reads_deletion_set(self, setting):
        _, _, _, retain, audit = setting
        audit.forbidden_reads = 0
        retrain(ARCH, retain, CFG, seed=1)
        assert audit.forbidden_reads == 0


class TestEuK:
    def test_eu_all_equals_retrain(self, setting):
        _, _, original, retain, _ = setting
        eu = eu_k(original, retain, CFG, k=3, seed=77)
        rt = retrain(ARCH, retain, CFG, seed=77)
        assert params_equal(eu.model, rt.model)

    def test_prefix_bit_identical(self, setting):
        _, _, original, retain, _ = setting
        for k in (1, 2):
            result = eu_k(original, retain, CFG, k=k, seed=5)
            orig_params = [l for l in original.layers if l.has_params]
            new_params = [l for l in result.model.layers if l.has_params]
            for a, b in zip(orig_params[: 3 - k], new_params[: 3 - k]):
                for p, q in zip(a.params(), b.params()):
                    assert np.array_equal(p, q)

    def test_k_one_changes_only_final_layer_before_training(self, setting):
        _, _, original, _, _ = setting
        from unlearn_bench.engine import reinit_suffix

        fresh = reinit_suffix(original, 1, seed=3)
        orig_params = [l for l in original.layers if l.has_params]
        new_params = [l for l in fresh.layers if l.has_params]
        for a, b in zip(orig_params[:-1], new_params[:-1]):
            assert np.array_equal(a.w, b.w)
        assert not np.array_equal(orig_params[-1].w, new_params[-1].w)

    def test_never_reads_deletion_set(self, setting):
        _, _, original, retain, audit = setting
        audit.forbidden_reads = 0
        eu_k(original, retain, CFG, k=2, seed=5)
        assert audit.forbidden_reads == 0

    def test_k_out_of_range(self, setting):
        _, _, original, retain, _ = setting
        with pytest.raises(ConfigurationError):
            eu_k(original, retain, CFG, k=4, seed=0)
        with pytest.raises(ConfigurationError):
            eu_k(original, retain, CFG, k=0, seed=0)


class TestCfK:
    def test_zero_override_is_identity(self, setting):
        _, _, original, retain, _ = setting
        result = cf_k(original, retain, CFG, k=2, cf_epochs=0)
        assert params_equal(result.model, original)
        assert result.model is not original

    def test_default_epochs_floor_half(self, setting):
        _, _, original, retain, _ = setting
        half = cf_k(original, retain, CFG, k=1)
        explicit = cf_k(original, retain, CFG, k=1, cf_epochs=CFG.epochs // 2)
        assert params_equal(half.model, explicit.model)

    def test_suffix_starts_from_original_weights(self, setting):
        # one finetune epoch moves the suffix but keeps it near the
        # original, unlike EU's fresh reinitialization
        _, _, original, retain, _ = setting
        cf = cf_k(original, retain, CFG, k=1, cf_epochs=1)
        eu = eu_k(original, retain, CFG, k=1, seed=123)
        orig_w = [l for l in original.layers if l.has_params][-1].w
        cf_w = [l for l in cf.model.layers if l.has_params][-1].w
        eu_w = [l for l in eu.model.layers if l.has_params][-1].w
        assert not np.array_equal(orig_w, cf_w)
        assert np.linalg.norm(cf_w - orig_w) < np.linalg.norm(eu_w - orig_w)

    def test_prefix_bit_identical(self, setting):
        _, _, original, retain, _ = setting
        result = cf_k(original, retain, CFG, k=1)
        orig_params = [l for l in original.layers if l.has_params]
        new_params = [l for l in result.model.layers if l.has_params]
        for a, b in zip(orig_params[:2], new_params[:2]):
            for p, q in zip(a.params(), b.params()):
                assert np.array_equal(p, q)

    def test_never_reads_deletion_set(self, setting):
        _, _, original, retain, audit = setting
        audit.forbidden_reads = 0
        cf_k(original, retain, CFG, k=2)
        assert audit.forbidden_reads == 0


class TestApply:
    def test_noop_identity_and_zero_wall(self, setting):
        _, _, original, retain, _ = setting
        result = apply(UnlearnMethod("noop"), original, retain, ARCH, CFG, seed=0)
        assert params_equal(result.model, original)
        assert result.wall_time_s == 0.0
        assert result.method == UnlearnMethod("noop")

    def test_eu_all_same_seed_as_retrain(self, setting):
        _, _, original, retain, _ = setting
        eu = apply(UnlearnMethod("eu", k=3), original, retain, ARCH, CFG, seed=9)
        rt = apply(UnlearnMethod("retrain"), original, retain, ARCH, CFG, seed=9)
        assert params_equal(eu.model, rt.model)

    def test_method_echo(self, setting):
        _, _, original, retain, _ = setting
        method = UnlearnMethod("cf", k=2, cf_epochs=1)
        assert apply(method, original, retain, ARCH, CFG, seed=0).method == method

    def test_wall_time_excludes_precompute(self, setting):
        _, _, original, retain, _ = setting
        result = apply(UnlearnMethod("eu", k=1), original, retain, ARCH, CFG, seed=2)
        assert result.precompute_time_s > 0.0
        assert result.wall_time_s > 0.0
