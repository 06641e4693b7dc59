import numpy as np
import pytest

from contalign.backbone import BackboneConfig, PretrainingError, evaluate_backbone, pretrain_backbone
from contalign.data import (
    DEFAULT_TASK_ROSTER,
    OOD_TASK_PARAMS,
    SHAPE_FAMILIES,
    AccessError,
    SampleList,
    TaskSpec,
    generate_stream,
    make_task_spec,
    permute_stream,
    render_sample,
    sample_pretraining_batch,
)
from contalign.nn import Rng, Tensor
from contalign.router import pool_feature_array
from contalign.training import batch_arrays, segmentation_loss


class TestTaskSpec:
    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            TaskSpec(0, "hexagon", (0.5,) * 3, (0.1,) * 3, 0.05, (0.2, 0.4), (1, 2), 7)

    def test_empty_size_range_rejected(self):
        with pytest.raises(ValueError):
            TaskSpec(0, "ellipse", (0.5,) * 3, (0.1,) * 3, 0.05, (0.4, 0.2), (1, 2), 7)

    def test_roster_combinations_distinct(self):
        keys = set()
        for tid in range(len(DEFAULT_TASK_ROSTER)):
            spec = make_task_spec(tid, 1)
            keys.add(spec.texture_key())
        assert len(keys) == len(DEFAULT_TASK_ROSTER)


class TestStreamGeneration:
    def test_single_task_stream(self):
        stream = generate_stream(1, 4, 3, master_seed=5)
        assert len(stream) == 1
        assert len(stream[0].train) == 4
        assert len(stream[0].test) == 3

    def test_same_seed_identical_pixels(self):
        a = generate_stream(2, 3, 2, master_seed=9)
        b = generate_stream(2, 3, 2, master_seed=9)
        for ta, tb in zip(a, b):
            for sa, sb in zip(ta.train.raw(), tb.train.raw()):
                np.testing.assert_array_equal(sa.image, sb.image)
                np.testing.assert_array_equal(sa.mask, sb.mask)
                assert sa.box == sb.box

    def test_different_seed_differs(self):
        a = generate_stream(1, 2, 1, master_seed=9)
        b = generate_stream(1, 2, 1, master_seed=10)
        assert not np.array_equal(a[0].train.raw()[0].image, b[0].train.raw()[0].image)

    def test_nine_task_structure(self):
        stream = generate_stream(9, 2, 1, master_seed=3)
        assert [t.spec.task_id for t in stream] == list(range(9))
        families = {t.spec.shape_family for t in stream}
        assert families == set(SHAPE_FAMILIES)

    def test_train_test_disjoint(self):
        stream = generate_stream(2, 6, 6, master_seed=11)
        for task in stream:
            train_bytes = {s.image.tobytes() for s in task.train.raw()}
            test_bytes = {s.image.tobytes() for s in task.test.raw()}
            assert not train_bytes & test_bytes

    def test_masks_nonempty_and_boxes_tight_on_test(self):
        stream = generate_stream(3, 4, 4, master_seed=13)
        for task in stream:
            for s in task.test.raw():
                assert s.mask.sum() > 0
                ys, xs = np.nonzero(s.mask[0])
                assert s.box == (xs.min(), ys.min(), xs.max(), ys.max())

    def test_sample_values_in_unit_range(self):
        stream = generate_stream(2, 3, 2, master_seed=17)
        for task in stream:
            for s in task.train.raw():
                assert s.image.min() >= 0.0 and s.image.max() <= 1.0
                assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_permutation_preserves_task_data(self):
        stream = generate_stream(3, 3, 2, master_seed=19)
        permuted = permute_stream(stream, [2, 0, 1])
        assert [t.spec.task_id for t in permuted] == [2, 0, 1]
        np.testing.assert_array_equal(
            permuted[1].train.raw()[0].image, stream[0].train.raw()[0].image
        )
        with pytest.raises(ValueError):
            permute_stream(stream, [0, 0, 1])

    def test_task_data_keyed_by_identity_not_position(self):
        # the same task id must produce identical data in any stream length
        long_stream = generate_stream(3, 3, 2, master_seed=23)
        short_stream = generate_stream(2, 3, 2, master_seed=23)
        np.testing.assert_array_equal(
            long_stream[1].train.raw()[0].image,
            short_stream[1].train.raw()[0].image,
        )

    def test_pretraining_mixture_covers_families(self):
        samples = sample_pretraining_batch(40, Rng(29))
        assert len(samples) == 40
        again = sample_pretraining_batch(40, Rng(29))
        np.testing.assert_array_equal(samples[0].image, again[0].image)


class TestSampleListAudit:
    def test_lock_blocks_reads(self):
        sl = SampleList(generate_stream(1, 3, 1, 31)[0].train.raw(), task_id=0)
        _ = sl[0]
        assert sl.reads == 1
        sl.lock()
        with pytest.raises(AccessError):
            _ = sl[0]
        sl.unlock()
        _ = sl[1]
        assert sl.reads == 2

    def test_iteration_counts_reads(self):
        sl = SampleList(generate_stream(1, 3, 1, 37)[0].train.raw(), task_id=0)
        list(sl)
        assert sl.reads == 3

    def test_raw_bypasses_audit(self):
        sl = SampleList(generate_stream(1, 2, 1, 41)[0].train.raw(), task_id=0)
        sl.lock()
        assert len(sl.raw()) == 2


class TestBackbone:
    def test_pretraining_deterministic(self):
        cfg = BackboneConfig(n_train=48, n_holdout=16, epochs=2, min_holdout_iou=0.0)
        a = pretrain_backbone(cfg, seed=3)
        b = pretrain_backbone(cfg, seed=3)
        assert a.parameter_hash() == b.parameter_hash()

    def test_quality_gate_aborts(self):
        cfg = BackboneConfig(n_train=32, n_holdout=16, epochs=1, min_holdout_iou=0.99)
        with pytest.raises(PretrainingError, match="held-out IoU"):
            pretrain_backbone(cfg, seed=3)

    def test_holdout_gate_passed(self, micro_backbone):
        assert micro_backbone.holdout_iou >= micro_backbone.config.min_holdout_iou

    def test_encode_shape_and_determinism(self, micro_backbone):
        stream = generate_stream(1, 2, 1, 43)
        image = stream[0].train.raw()[0].image
        z1 = micro_backbone.encode(image)
        z2 = micro_backbone.encode(image)
        assert tuple(z1.shape) == micro_backbone.feature_shape
        np.testing.assert_array_equal(z1.data, z2.data)

    def test_encoder_receives_no_gradient(self, micro_backbone):
        stream = generate_stream(1, 2, 1, 47)
        image = stream[0].train.raw()[0].image
        z = micro_backbone.encode(image[None])
        loss = (z * z).sum()
        assert not loss.requires_grad  # frozen encoder: nothing to reach
        for _, p in micro_backbone.encoder.named_parameters():
            assert p.grad is None

    def test_decoder_frozen_during_alignment_training(self, micro_backbone):
        from contalign.alignment import AlignmentLayer, train_alignment

        stream = generate_stream(1, 6, 1, 53)
        before = micro_backbone.parameter_hash()
        layer = AlignmentLayer(32, 1, 0, Rng(1))
        train_alignment(stream[0].train.raw(), micro_backbone, layer,
                        epochs=1, batch_size=3, rng=Rng(2))
        assert micro_backbone.parameter_hash() == before
        for _, p in micro_backbone.decoder.named_parameters():
            assert p.grad is None
        assert all(p.grad is None for p in layer.parameters())  # cleared after step

    def test_decode_rejects_wrong_feature_shape(self, micro_backbone):
        bad = Tensor(np.zeros((1, 8, 16, 16), dtype=np.float32))
        box = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError):
            micro_backbone.decode(bad, box)

    def test_zero_features_ignore_image_content(self, micro_backbone):
        c, h, w = micro_backbone.feature_shape
        zeros = Tensor(np.zeros((1, c, h, w), dtype=np.float32))
        box = np.zeros((1, 1, h, w), dtype=np.float32)
        box[0, 0, 4:12, 4:12] = 1.0
        out1 = micro_backbone.decode(zeros, Tensor(box)).data
        out2 = micro_backbone.decode(Tensor(np.zeros((1, c, h, w), dtype=np.float32)),
                                     Tensor(box)).data
        np.testing.assert_array_equal(out1, out2)

    def test_identity_alignment_meets_quality_gate_on_mixture(self, micro_backbone):
        holdout = sample_pretraining_batch(24, Rng(59).child("gate"))
        score = evaluate_backbone(micro_backbone.encoder, micro_backbone.decoder,
                                  holdout, micro_backbone.config.feature_size)
        assert score >= micro_backbone.config.min_holdout_iou

    def test_domain_gap_on_shifted_task(self, micro_backbone):
        mixture = sample_pretraining_batch(24, Rng(61).child("mix"))
        mixture_iou = evaluate_backbone(micro_backbone.encoder, micro_backbone.decoder,
                                        mixture, micro_backbone.config.feature_size)
        spec = make_task_spec(0, 61)  # inverted-contrast ellipse task
        shifted = [render_sample(spec, Rng(spec.seed).child("probe", i)) for i in range(24)]
        shifted_iou = evaluate_backbone(micro_backbone.encoder, micro_backbone.decoder,
                                        shifted, micro_backbone.config.feature_size)
        assert shifted_iou < mixture_iou

    def test_pooled_feature_separability(self, micro_backbone):
        stream = generate_stream(3, 16, 1, 20260301)
        feats = {}
        for task in stream:
            images, _, _ = batch_arrays(task.train.raw(),
                                        micro_backbone.config.feature_size)
            feats[task.spec.task_id] = pool_feature_array(
                micro_backbone.encode_array(images)
            )
        centroids = {k: f.mean(axis=0) for k, f in feats.items()}
        spreads = {k: np.linalg.norm(f - centroids[k], axis=1).mean()
                   for k, f in feats.items()}
        for a in feats:
            for b in feats:
                if a >= b:
                    continue
                distance = np.linalg.norm(centroids[a] - centroids[b])
                assert distance >= 2.0 * max(spreads[a], spreads[b]), (
                    f"tasks {a},{b}: centroid distance {distance:.3f} vs "
                    f"spreads {spreads[a]:.3f}/{spreads[b]:.3f}"
                )

    def test_segmentation_loss_zero_for_perfect_confident_logits(self):
        masks = np.zeros((1, 1, 8, 8), dtype=np.float32)
        masks[0, 0, 2:6, 2:6] = 1.0
        logits = (masks * 2.0 - 1.0) * 50.0
        loss = segmentation_loss(Tensor(logits), Tensor(masks)).item()
        assert loss == pytest.approx(0.0, abs=1e-2)
