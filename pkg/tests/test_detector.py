import numpy as np
import pytest

from quadfine import nn
from quadfine.detector import (
    DetectionResult,
    Detector,
    JitterConfig,
    detect_oracle,
    detector_loss,
    detector_metrics,
    jitter_targets,
    train_detector,
)
from quadfine.masks import upsample_nn
from quadfine.synth import (
    FeatureConfig,
    NoiseConfig,
    ShapeSpec,
    degrade_to_coarse,
    rasterize,
    synth_features,
)


@pytest.fixture(scope="module")
def sample():
    gt = rasterize(ShapeSpec("ellipse", (0.5, 0.52), (0.28, 0.21), rotation=0.5))
    coarse = degrade_to_coarse(gt, NoiseConfig(p=0.8, radius=1), seed=0)
    pyr = synth_features(gt, coarse, 8, seed=0, config=FeatureConfig(channels=8))
    return gt, coarse, pyr


class TestOracle:
    def test_constant_gt_empty_pyramid(self):
        pyr = detect_oracle(np.ones((224, 224), np.uint8))
        assert all(not lvl.any() for lvl in pyr.levels)

    def test_disk_rings_per_level_match_direct_recomputation(self):
        gt = rasterize(ShapeSpec("ellipse", (0.5, 0.5), (0.25, 0.25)))
        pyr = detect_oracle(gt)
        from quadfine.masks import downsample_nn, incoherence

        m = gt
        expected = []
        for _ in range(3):
            expected.append(incoherence(m))
            m = downsample_nn(m)
        for lvl, exp in zip(pyr.levels, reversed(expected)):
            assert np.array_equal(lvl, exp)

    def test_complete_oracle_is_superset_and_nested(self, sample):
        gt, _, _ = sample
        plain = detect_oracle(gt)
        complete = detect_oracle(gt, reconstruction_complete=True)
        for p, c in zip(plain.levels, complete.levels):
            assert not np.any(p & ~c)
        assert complete.nested()


class TestLearnedShapes:
    def test_all_levels_produced_with_random_params(self, sample):
        _, coarse, pyr = sample
        det = Detector(channels=8, seed=1).detect(pyr, coarse)
        assert sorted(det.probs) == [28, 56, 112]
        for size in (28, 56, 112):
            assert det.probs[size].shape == (size, size)
            assert det.masks[size].shape == (size, size)

    def test_guidance_restriction_enforced(self, sample):
        _, coarse, pyr = sample
        det = Detector(channels=8, seed=2).detect(pyr, coarse)
        for coarse_size, fine_size in ((28, 56), (56, 112)):
            cover = upsample_nn(det.masks[coarse_size])
            assert not np.any(det.masks[fine_size] & ~cover)

    def test_zero_coarsest_zeroes_all_finer(self, sample):
        _, coarse, pyr = sample
        model = Detector(channels=8, seed=3)
        # drive the stage-1 head to strongly negative logits
        model.params["head1.w"].data[:] = 0.0
        model.params["head1.b"].data[:] = -50.0
        det = model.detect(pyr, coarse)
        assert not det.masks[28].any()
        assert not det.masks[56].any()
        assert not det.masks[112].any()

    def test_channel_mismatch_rejected(self, sample):
        _, coarse, pyr = sample
        with pytest.raises(ValueError, match="channels"):
            Detector(channels=16).detect(pyr, coarse)

    def test_result_invariant_validated(self):
        masks = {28: np.zeros((28, 28), np.uint8), 56: np.zeros((56, 56), np.uint8),
                 112: np.zeros((112, 112), np.uint8)}
        masks[56][3, 3] = 1
        # the restriction is asserted on every result, guided input or not
        for guided in (True, False):
            with pytest.raises(ValueError, match="guidance restriction"):
                DetectionResult(probs={k: v.astype(np.float32) for k, v in masks.items()},
                                masks=masks, guided=guided)

    def test_unguided_drops_only_the_fusion_input(self, sample):
        _, coarse, pyr = sample
        guided = Detector(channels=8, guidance=True, seed=4)
        unguided = Detector(channels=8, guidance=False, seed=4)
        assert guided.params["fuse2.w"].data.shape[1] == 9
        assert unguided.params["fuse2.w"].data.shape[1] == 8
        det = unguided.detect(pyr, coarse)
        assert det.guided is False
        # binarized levels still nest without the guide input
        for coarse_size, fine_size in ((28, 56), (56, 112)):
            cover = upsample_nn(det.masks[coarse_size])
            assert not np.any(det.masks[fine_size] & ~cover)


class TestLoss:
    def test_uniform_half_logits_give_ln2(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        logits = {s: nn.Tensor(np.zeros((1, s, s))) for s in (28, 56, 112)}
        loss = detector_loss(logits, oracle, jitter=None)
        assert np.allclose(loss.data, np.log(2.0))

    def test_perfect_confident_logits_near_zero(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        logits = {
            s: nn.Tensor(np.where(lvl[None] > 0, 25.0, -25.0))
            for s, lvl in zip((28, 56, 112), oracle.levels)
        }
        assert detector_loss(logits, oracle, jitter=None).data < 1e-9

    def test_no_jitter_is_plain_bce(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        rng = np.random.default_rng(0)
        logits = {s: nn.Tensor(rng.standard_normal((1, s, s))) for s in (28, 56, 112)}
        a = detector_loss(logits, oracle, jitter=JitterConfig(p=0.0, r=1), seed=1)
        b = detector_loss(logits, oracle, jitter=None)
        assert np.allclose(a.data, b.data)

    def test_jitter_only_dilates(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        targets = jitter_targets(oracle, JitterConfig(p=1.0, r=2), seed=5)
        for lvl, t in zip(oracle.levels, targets):
            assert not np.any(lvl & ~t)  # never erodes

    def test_loss_gradients_pass_grad_check(self):
        gt = rasterize(ShapeSpec("ellipse", (0.5, 0.5), (0.3, 0.3)), 64)
        cfg = FeatureConfig(channels=4)
        # tiny pyramid stand-in: build levels directly at 8/16/32 semantics
        # is covered by refiner tests; here check the detector graph end to end
        from quadfine.masks import incoherence_pyramid
        from quadfine.pyramid import FeaturePyramid

        rng = np.random.default_rng(6)
        finest = rng.standard_normal((4, 112, 112)).astype(np.float64)
        pyr = FeaturePyramid.from_finest(finest.astype(np.float32))
        pyr = FeaturePyramid(levels={k: v.astype(np.float64) for k, v in pyr.levels.items()})
        coarse = rng.random((28, 28))
        gt224 = rasterize(ShapeSpec("ellipse", (0.5, 0.5), (0.3, 0.3)))
        oracle = incoherence_pyramid(gt224, 3)
        model = Detector(channels=4, seed=7, dtype=np.float64)

        def make_loss():
            logits = model.forward(pyr, coarse)
            return detector_loss(logits, oracle, jitter=None)

        report = nn.grad_check(make_loss, model.parameters(), entries_per_param=3, seed=0)
        assert report["__overall__"]["max_rel_err"] < 1e-6


class TestMetrics:
    def _det(self, levels):
        # plain pyramids are accepted directly (oracle levels need not nest)
        from quadfine.masks import IncoherencePyramid

        return IncoherencePyramid(tuple(np.asarray(l, np.uint8) for l in levels))

    def test_pred_equals_oracle(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        m = detector_metrics(self._det(oracle.levels), oracle)
        assert m == {"recall": 1.0, "accuracy": 1.0}

    def test_pred_everything(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        full = [np.ones_like(lvl) for lvl in oracle.levels]
        m = detector_metrics(self._det(full), oracle)
        density = sum(int(l.sum()) for l in oracle.levels) / sum(l.size for l in oracle.levels)
        assert m["recall"] == 1.0
        assert np.isclose(m["accuracy"], density)

    def test_empty_pred_nonempty_oracle(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        empty = [np.zeros_like(lvl) for lvl in oracle.levels]
        m = detector_metrics(self._det(empty), oracle)
        assert m["recall"] == 0.0 and m["accuracy"] == 0.0

    def test_empty_oracle_conventions(self):
        zeros = [np.zeros((28, 28), np.uint8), np.zeros((56, 56), np.uint8),
                 np.zeros((112, 112), np.uint8)]
        from quadfine.masks import IncoherencePyramid

        oracle = IncoherencePyramid(tuple(zeros))
        m = detector_metrics(self._det(zeros), oracle)
        assert m["recall"] == 1.0 and m["accuracy"] == 1.0

    def test_pixel_accuracy_flag(self, sample):
        gt, _, _ = sample
        oracle = detect_oracle(gt)
        m = detector_metrics(self._det(oracle.levels), oracle, accuracy_mode="pixel")
        assert m["accuracy"] == 1.0
        with pytest.raises(ValueError, match="accuracy mode"):
            detector_metrics(self._det(oracle.levels), oracle, accuracy_mode="nope")


class TestTraining:
    def test_short_training_reduces_loss_and_is_deterministic(self):
        samples = []
        for i in range(6):
            gt = rasterize(ShapeSpec("ellipse", (0.5, 0.5), (0.2 + 0.02 * i, 0.25)))
            coarse = degrade_to_coarse(gt, NoiseConfig(p=0.8, radius=1), seed=i)
            pyr = synth_features(gt, coarse, 8, seed=i, config=FeatureConfig(channels=8))
            samples.append((pyr, coarse, gt))
        r1 = train_detector(samples, epochs=3, seed=0, lr=0.2)
        r2 = train_detector(samples, epochs=3, seed=0, lr=0.2)
        assert r1.epoch_losses == r2.epoch_losses
        assert r1.epoch_losses[-1] < r1.epoch_losses[0]
        for name, p in r1.model.params.items():
            assert np.array_equal(p.data, r2.model.params[name].data)
