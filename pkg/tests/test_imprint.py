import dataclasses

import numpy as np
import pytest

from dpaudit import datagen, evalrecon, imprint, models, trainer
from dpaudit.accountant import PrivacyParams
from dpaudit.imprint import (AttackScenario, bin_thresholds,
                             detect_imprint, init_imprint, recover,
                             run_campaign, surgery_prepend, surgery_weights)
from dpaudit.models import conv_classifier, dense_classifier, model_zoo
from dpaudit.numerics import Rng

from oracles import normal_quantile_bisection

PIXELS = 256


@pytest.fixture(scope="module")
def attack_dataset():
    spec = datagen.DatasetSpec(kind="binary_imbalanced", n_samples=80,
                               image_size=16, seed=3)
    ds = datagen.normalize(datagen.generate(spec))
    return dataclasses.replace(ds, train_images=ds.train_images[:32],
                               train_labels=ds.train_labels[:32])


class TestSurgery:
    def test_shape_contract(self):
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        block = init_imprint(10, PIXELS)
        weights = surgery_weights(modified, block, rng=Rng(0))
        x = Rng(1).normal((3, 16, 16, 1))
        out, cache = models.forward(modified, weights, x)
        assert out.shape == (3, 2)  # downstream head unchanged
        assert cache[imprint.PRELUDE_LENGTH].shape == (3, 16, 16, 1)

    def test_parameter_count_delta(self):
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        block = init_imprint(10, PIXELS)
        w_base = models.init_weights(base, Rng(0))
        w_mod = surgery_weights(modified, block, original_weights=w_base)
        added = (sum(v.size for v in w_mod.values())
                 - sum(v.size for v in w_base.values()))
        assert added == imprint.imprint_parameter_count(PIXELS, 10)
        assert added == PIXELS * 10 + 10 + 10 * PIXELS

    def test_downstream_swap_leaves_recovery_unchanged(self, attack_dataset):
        # same W1/b1 and batch; different heads only perturb the last ulp of
        # the division, so compare at 1e-12 rather than bitwise
        ds = attack_dataset
        x, y = ds.train_images[:1], ds.train_labels[:1]
        block = init_imprint(10, PIXELS)
        recons = []
        for base in (dense_classifier((16, 16, 1), 2), conv_classifier((16, 16, 1), 2)):
            modified = surgery_prepend(base, (16, 16, 1), bins=10)
            weights = surgery_weights(modified, block, rng=Rng(5))
            packet = imprint.client_round(modified, weights, x, y,
                                          "cross_entropy", None, Rng(6))
            rs = recover(packet, ds.mean, ds.std)
            recons.append(rs)
        a, b = recons
        assert a.source_bins == b.source_bins
        np.testing.assert_allclose(a.images, b.images, atol=1e-12)

    def test_original_layers_untouched(self):
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        assert modified.layers[imprint.PRELUDE_LENGTH:] == base.layers


class TestInitImprint:
    def test_single_bin_probes_the_median(self):
        thresholds = bin_thresholds(1)
        assert thresholds.shape == (1,)
        assert thresholds[0] == pytest.approx(0.0, abs=1e-12)

    def test_ten_bins_match_inverse_cdf_oracle(self):
        thresholds = bin_thresholds(10)
        assert thresholds[0] == imprint.CATCH_ALL_THRESHOLD
        for k in range(1, 10):
            oracle = normal_quantile_bisection(k / 10)
            assert thresholds[k] == pytest.approx(oracle, abs=1e-9)

    def test_biases_descending(self):
        block = init_imprint(10, PIXELS)
        assert (np.diff(block.b1) < 0).all()
        assert np.allclose(block.w1, 1.0 / PIXELS)

    def test_every_normalized_input_hits_a_bin(self):
        spec = datagen.DatasetSpec(kind="binary_imbalanced", n_samples=1000,
                                   image_size=16, seed=1)
        ds = datagen.normalize(datagen.generate(spec))
        block = init_imprint(10, PIXELS)
        means = ds.all_images().reshape(len(ds.all_images()), -1).mean(axis=1)
        activations = means[:, None] + block.b1[None, :]  # pre-relu per bin
        assert ((activations > 0).sum(axis=1) >= 1).all()


class TestRecover:
    def test_batch_one_exact(self, attack_dataset):
        ds = attack_dataset
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(7))
        raw = ds.denormalize(ds.train_images)
        for s in range(8):
            packet = imprint.client_round(modified, weights,
                                          ds.train_images[s:s + 1],
                                          ds.train_labels[s:s + 1],
                                          "cross_entropy", None, Rng(8))
            rs = recover(packet, ds.mean, ds.std)
            assert len(rs.images) >= 1
            for img in rs.images:
                assert np.abs(img - raw[s]).max() < 1e-9

    def test_clipping_invariance(self, attack_dataset):
        ds = attack_dataset
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(9))
        x, y = ds.train_images[:1], ds.train_labels[:1]
        plain = recover(imprint.client_round(modified, weights, x, y,
                                             "cross_entropy", None, Rng(1)),
                        ds.mean, ds.std)
        dp = PrivacyParams(0.0, 0.01, 1 / 32, 32, 8e-7)  # clip hard, no noise
        clipped = recover(imprint.client_round(modified, weights, x, y,
                                               "cross_entropy", dp, Rng(1)),
                          ds.mean, ds.std)
        assert plain.source_bins == clipped.source_bins
        np.testing.assert_allclose(plain.images, clipped.images, atol=1e-12)

    def test_noisy_recovery_matches_paired_seed_simulation(self, attack_dataset):
        ds = attack_dataset
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(10))
        x, y = ds.train_images[:1], ds.train_labels[:1]
        sigma, clip = 1e-3, 0.5
        dp = PrivacyParams(sigma, clip, 1 / 32, 32, 8e-7)
        packet = imprint.client_round(modified, weights, x, y, "cross_entropy",
                                      dp, Rng(77))
        rs = recover(packet, ds.mean, ds.std, threshold=0.0)
        # same clipping and the same seeded noise, applied outside the attack
        grads = trainer.per_sample_gradients(modified, weights, x, y)
        clipped = trainer.clip_per_sample(grads, clip)
        rng = Rng(77)
        released = {}
        for k in sorted(clipped.stacked):
            total = clipped.stacked[k].sum(axis=0)
            released[k] = (total + rng.normal(total.shape, std=sigma * clip)) / 1
        expected = []
        for i in range(10):
            if abs(released["1.b"][i]) > 0.0:
                flat = released["1.W"][i] / released["1.b"][i]
                expected.append(flat.reshape(16, 16, 1) * ds.std + ds.mean)
        np.testing.assert_allclose(rs.images, np.stack(expected), atol=1e-12)

    def test_all_bins_skipped_is_diagnostic_not_error(self, attack_dataset):
        ds = attack_dataset
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(11))
        packet = imprint.client_round(modified, weights, ds.train_images[:1],
                                      ds.train_labels[:1], "cross_entropy",
                                      None, Rng(1))
        rs = recover(packet, ds.mean, ds.std, threshold=np.inf)
        assert len(rs.images) == 0
        assert rs.skipped_bins == 10

    def test_packet_without_imprint_rejected(self, attack_dataset):
        ds = attack_dataset
        base = conv_classifier((16, 16, 1), 2)
        weights = models.init_weights(base, Rng(0))
        packet = imprint.client_round(base, weights, ds.train_images[:1],
                                      ds.train_labels[:1], "cross_entropy",
                                      None, Rng(1))
        with pytest.raises(Exception, match="imprint"):
            recover(packet, ds.mean, ds.std)


class TestDetect:
    def test_zoo_true_and_false_positives(self):
        for name, base in model_zoo().items():
            assert not detect_imprint(base), name
            modified = surgery_prepend(base, base.input_shape, bins=10)
            block = init_imprint(10, int(np.prod(base.input_shape)))
            weights = surgery_weights(modified, block, rng=Rng(2))
            assert detect_imprint(modified, weights), name

    def test_shuffled_rows_still_detected(self):
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(3))
        perm = Rng(4).permutation(10)
        weights["1.W"] = weights["1.W"][perm]
        weights["1.b"] = weights["1.b"][perm]
        assert detect_imprint(modified, weights)

    def test_structure_only_check_without_weights(self):
        base = conv_classifier((16, 16, 1), 2)
        assert detect_imprint(surgery_prepend(base, (16, 16, 1), 10))

    def test_nonconstant_rows_not_flagged(self):
        base = conv_classifier((16, 16, 1), 2)
        modified = surgery_prepend(base, (16, 16, 1), bins=10)
        weights = surgery_weights(modified, init_imprint(10, PIXELS), rng=Rng(5))
        weights["1.W"] = Rng(6).normal((10, PIXELS))  # an ordinary dense layer
        assert not detect_imprint(modified, weights)


class TestCampaign:
    def test_nonprivate_recovers_nearly_everything(self, attack_dataset):
        ds = attack_dataset
        model = conv_classifier((16, 16, 1), 2)
        results = run_campaign(ds, AttackScenario(batch_size=1), model, seed=0)
        assert len(results) == 32
        pool = imprint.campaign_pool(results)
        raw = ds.denormalize(ds.train_images)
        matches = evalrecon.match(raw, pool)
        good = sum(m.best_ssim >= 0.999 for m in matches)
        assert good >= 31

    def test_deterministic_per_seed(self, attack_dataset):
        ds = attack_dataset
        model = conv_classifier((16, 16, 1), 2)
        scenario = AttackScenario(batch_size=1, rounds=4)
        a = imprint.campaign_pool(run_campaign(ds, scenario, model, seed=5))
        b = imprint.campaign_pool(run_campaign(ds, scenario, model, seed=5))
        assert np.array_equal(a, b)

    def test_monotone_degradation_in_noise(self, attack_dataset):
        ds = attack_dataset
        model = conv_classifier((16, 16, 1), 2)
        raw = ds.denormalize(ds.train_images)
        medians = []
        for sigma in (0.0, 1e-4, 1e-3, 1e-2, 1e-1):
            dp = None
            if sigma > 0:
                dp = PrivacyParams(sigma, 1.0, 1 / 32, 32, 8e-7)
            results = run_campaign(ds, AttackScenario(batch_size=1, dp_on_client=dp),
                                   model, seed=0)
            pool = imprint.campaign_pool(results)
            if pool.size == 0:
                pool = np.zeros((0,) + raw.shape[1:])
            matches = evalrecon.match(raw, pool)
            medians.append(float(np.median([m.best_ssim for m in matches])))
        assert all(a >= b - 1e-12 for a, b in zip(medians, medians[1:]))

    def test_larger_batches_recover_fewer(self, attack_dataset):
        ds = attack_dataset
        model = conv_classifier((16, 16, 1), 2)
        raw = ds.denormalize(ds.train_images)

        def fraction(batch_size):
            results = run_campaign(ds, AttackScenario(batch_size=batch_size),
                                   model, seed=0)
            matches = evalrecon.match(raw, imprint.campaign_pool(results))
            return evalrecon.success_rate(matches, 0.999)

        assert fraction(8) < fraction(1)


def test_campaign_artifact_round_trip(tmp_path, attack_dataset):
    ds = attack_dataset
    model = conv_classifier((16, 16, 1), 2)
    results = run_campaign(ds, AttackScenario(batch_size=1, rounds=4), model, seed=0)
    raw = ds.denormalize(ds.train_images[:4])
    imprint.save_campaign(tmp_path / "c.bin", raw, results, {"label": "demo"})
    samples, pool, meta = imprint.load_campaign(tmp_path / "c.bin")
    assert meta["label"] == "demo"
    assert np.array_equal(samples, raw)
    assert np.array_equal(pool, imprint.campaign_pool(results))
