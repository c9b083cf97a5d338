import math
from types import SimpleNamespace

import numpy as np
import pytest

from iadn.dataio import Annotation, EXCLUDED, SegTargets, generate_synthetic_dataset
from iadn.errors import ConfigError, DataError, NumericDomainError, ShapeError, UsageError
from iadn.netgraph import IlluminationWeights, Network, NetworkConfig, RawOutputs, build_network, forward, gated_mix
from iadn.numerics import Tape, backprop, grad_check
from iadn.training import (
    AnchorAssignment,
    FrameCache,
    Sample,
    TrainConfig,
    anchors_for,
    assign_anchor_labels,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    global_norm,
    loss_detection,
    loss_illumination,
    loss_segmentation,
    loss_total,
    sample_minibatch,
    sgd_step,
    smooth_l1,
    train,
)

LN2 = math.log(2.0)


class TestAnchors:
    def test_count(self):
        grid = generate_anchors(128, 160, 8, [(h, 0.41) for h in (24, 32, 44, 60)])
        assert len(grid) == 20 * 16 * 4 == 1280
        assert grid.grid == (16, 20, 4)

    def test_first_center(self):
        grid = generate_anchors(128, 160, 8, [(32.0, 0.41)])
        x, y, w, h = grid.boxes[0]
        assert (x + w / 2, y + h / 2) == (4.0, 4.0)

    def test_template_size(self):
        grid = generate_anchors(16, 16, 8, [(32.0, 0.41)])
        np.testing.assert_allclose(grid.boxes[0, 2:], [13.12, 32.0], rtol=1e-12)

    def test_centers_on_lattice(self):
        grid = generate_anchors(64, 48, 8, [(24.0, 0.41), (60.0, 0.41)])
        cx = grid.boxes[:, 0] + grid.boxes[:, 2] / 2
        cy = grid.boxes[:, 1] + grid.boxes[:, 3] / 2
        np.testing.assert_allclose((cx - 4) % 8, 0, atol=1e-9)
        np.testing.assert_allclose((cy - 4) % 8, 0, atol=1e-9)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            generate_anchors(100, 160, 8, [(32.0, 0.41)])


class TestEncoding:
    def test_identity(self):
        assert encode_boxes((10, 20, 8, 16), (10, 20, 8, 16)) == (0.0, 0.0, 0.0, 0.0)

    def test_half_width_shift(self):
        tx, ty, tw, th = encode_boxes((10, 20, 8, 16), (14, 20, 8, 16))
        assert tx == 0.5 and ty == 0.0

    def test_double_width(self):
        # same center, twice the width
        tw = encode_boxes((10, 20, 8, 16), (6, 20, 16, 16))[2]
        assert tw == pytest.approx(LN2, abs=1e-12)

    def test_decode_inverts_encode(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = (*rng.uniform(0, 100, 2), *rng.uniform(5, 50, 2))
            g = (*rng.uniform(0, 100, 2), *rng.uniform(5, 50, 2))
            np.testing.assert_allclose(decode_boxes(a, encode_boxes(a, g)), g, rtol=1e-10, atol=1e-9)

    def test_non_positive(self):
        with pytest.raises(DataError):
            encode_boxes((0, 0, 0, 5), (0, 0, 5, 5))


def brute_force_assignment(anchors, annotations):
    def iou(a, b):
        ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
        iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
        inter = ix * iy
        return inter / (a[2] * a[3] + b[2] * b[3] - inter)

    labels, matched = [], []
    for a in anchors:
        best, best_j, ign = 0.0, -1, 0.0
        for j, g in enumerate(annotations):
            v = iou(a, g.box)
            if g.ignore:
                ign = max(ign, v)
            elif v > best:
                best, best_j = v, j
        if best > 0.5:
            labels.append(1)
            matched.append(best_j)
        else:
            labels.append(EXCLUDED if ign > 0.5 else 0)
            matched.append(-1)
    return np.array(labels), np.array(matched)


class TestAssignment:
    grid = generate_anchors(32, 32, 8, [(16.0, 0.5)])

    def test_identical_box_is_positive(self):
        box = tuple(self.grid.boxes[5])
        a = assign_anchor_labels(self.grid, [Annotation(box)])
        assert a.labels[5] == 1 and a.matched[5] == 0
        np.testing.assert_allclose(a.targets[5], 0, atol=1e-12)

    def test_low_overlap_is_negative(self):
        x, y, w, h = self.grid.boxes[5]
        # same height, shifted so IoU = 0.4: overlap width 4w/7
        gt = (x + w * 3 / 7, y, w, h)
        a = assign_anchor_labels(self.grid, [Annotation(gt)])
        assert a.labels[5] == 0

    def test_ignore_overlap_is_excluded(self):
        x, y, w, h = self.grid.boxes[5]
        # IoU 0.8 with an ignore box
        gt = (x, y, w, h * 0.8)
        a = assign_anchor_labels(self.grid, [Annotation(gt, ignore=True)])
        assert a.labels[5] == EXCLUDED

    def test_positive_beats_ignore(self):
        box = tuple(self.grid.boxes[5])
        a = assign_anchor_labels(self.grid, [Annotation(box, ignore=True), Annotation(box)])
        assert a.labels[5] == 1 and a.matched[5] == 1

    def test_degenerate_annotation(self):
        with pytest.raises(DataError):
            assign_anchor_labels(self.grid, [SimpleNamespace(box=(1, 1, 0, 3), ignore=False)])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        grid = generate_anchors(32, 40, 8, [(12.0, 0.5), (20.0, 0.41)])
        for _ in range(1000):
            anns = []
            for _ in range(rng.integers(0, 4)):
                h = rng.uniform(6, 26)
                w = h * rng.uniform(0.3, 0.8)
                anns.append(Annotation((rng.uniform(-5, 35), rng.uniform(-5, 25), w, h), ignore=bool(rng.random() < 0.3)))
            got = assign_anchor_labels(grid, anns)
            labels, matched = brute_force_assignment(grid.boxes, anns)
            np.testing.assert_array_equal(got.labels, labels)
            np.testing.assert_array_equal(got.matched[labels == 1], matched[labels == 1])


def _assignment(n_pos, n_neg, n_exc=0):
    labels = np.array([1] * n_pos + [0] * n_neg + [EXCLUDED] * n_exc, dtype=np.int8)
    n = len(labels)
    return AnchorAssignment(labels, np.where(labels == 1, 0, -1), np.zeros((n, 4)))


class TestSampling:
    def test_scarce_positives(self):
        s = sample_minibatch(_assignment(5, 2000), 120, np.random.default_rng(0))
        assert (s.labels == 1).sum() == 5 and (s.labels == 0).sum() == 115

    def test_one_to_one_cap(self):
        s = sample_minibatch(_assignment(200, 200), 120, np.random.default_rng(0))
        assert (s.labels == 1).sum() == 60 and (s.labels == 0).sum() == 60

    def test_no_padding_with_positives(self):
        s = sample_minibatch(_assignment(100, 10), 120, np.random.default_rng(0))
        assert (s.labels == 1).sum() == 60 and (s.labels == 0).sum() == 10

    def test_deterministic(self):
        a = _assignment(30, 500, 20)
        s1 = sample_minibatch(a, 120, np.random.default_rng(9))
        s2 = sample_minibatch(a, 120, np.random.default_rng(9))
        np.testing.assert_array_equal(s1.indices, s2.indices)

    def test_never_samples_excluded_or_repeats(self):
        a = _assignment(10, 50, 100)
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = sample_minibatch(a, 120, rng)
            assert len(set(s.indices.tolist())) == len(s)
            assert np.all(a.labels[s.indices] != EXCLUDED)

    def test_all_excluded(self):
        with pytest.raises(DataError):
            sample_minibatch(_assignment(0, 0, 5), 120, np.random.default_rng(0))


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (-2.0, 1.5)])
    def test_fixed_points(self, x, expected):
        assert abs(float(smooth_l1(np.array(x))) - expected) <= 1e-12

    def test_derivative_continuous_at_one(self):
        h = 1e-7
        left = (smooth_l1(np.array(1.0)) - smooth_l1(np.array(1.0 - h))) / h
        right = (smooth_l1(np.array(1.0 + h)) - smooth_l1(np.array(1.0))) / h
        assert abs(left - 1.0) < 1e-6 and abs(right - 1.0) < 1e-6


def _raw(scores, deltas=None):
    scores = np.asarray(scores, dtype=np.float64).reshape(1, -1, 1)
    if deltas is None:
        deltas = np.zeros(scores.shape[:2] + (4,))
    return RawOutputs(None, scores, np.asarray(deltas, dtype=np.float64).reshape(1, -1, 4))


class TestLosses:
    def test_illumination_spot_values(self):
        assert abs(float(loss_illumination(IlluminationWeights.from_day(0.5), 1.0)) - LN2) < 1e-9
        assert abs(float(loss_illumination(IlluminationWeights.from_day(0.9), 0.0)) + math.log(0.1)) < 1e-9
        assert float(loss_illumination(IlluminationWeights.from_day(1.0 - 1e-12), 1.0)) < 1e-6

    def test_detection_single_positive(self):
        raw = _raw([0.6], [[0.5, 0.5, 0.5, 0.5]])
        sample = Sample(np.array([0]), np.array([1.0]), np.zeros((1, 4)))
        val = float(loss_detection(raw, sample, lambda_bb=5.0))
        assert abs(val - (-math.log(0.6) + 2.5)) < 1e-9
        assert val == pytest.approx(3.0108, abs=1e-4)

    def test_detection_only_negatives(self):
        raw = _raw([0.5] * 6, np.ones((6, 4)))
        sample = Sample(np.arange(6), np.zeros(6), np.zeros((6, 4)))
        assert abs(float(loss_detection(raw, sample)) - LN2) < 1e-9

    def test_detection_sums(self):
        raw = _raw([0.5] * 4)
        sample = Sample(np.arange(4), np.zeros(4), np.zeros((4, 4)))
        assert abs(float(loss_detection(raw, sample, normalization="sums")) - 4 * LN2) < 1e-9

    def test_detection_empty_sample(self):
        with pytest.raises(DataError):
            loss_detection(_raw([0.5]), Sample(np.array([], dtype=int), np.array([]), np.zeros((0, 4))))

    def _seg_raw(self, maps):
        return RawOutputs(None, np.zeros((1, 1, 1)), np.zeros((1, 1, 4)), seg_fused=maps)

    def test_segmentation_half(self):
        targets = SegTargets(np.array([[1, 0, EXCLUDED], [0, 0, 1]], dtype=np.int8))
        one = [np.full((2, 3, 1), 0.5)]
        assert abs(float(loss_segmentation(self._seg_raw(one), targets)) - LN2) < 1e-9
        two = [np.full((2, 3, 1), 0.5), np.full((2, 3, 1), 0.5)]
        assert abs(float(loss_segmentation(self._seg_raw(two), targets)) - 2 * LN2) < 1e-9

    def test_segmentation_perfect(self):
        labels = np.array([[1, 0], [0, 1]], dtype=np.int8)
        m = np.where(labels == 1, 1.0, 0.0)[:, :, None]
        assert float(loss_segmentation(self._seg_raw([m]), SegTargets(labels))) < 1e-5

    def test_segmentation_excluded_cells_ignored(self):
        labels = np.array([[1, EXCLUDED]], dtype=np.int8)
        a = np.array([[0.9, 0.01]])[:, :, None]
        b = np.array([[0.9, 0.99]])[:, :, None]
        assert float(loss_segmentation(self._seg_raw([a]), SegTargets(labels))) == float(
            loss_segmentation(self._seg_raw([b]), SegTargets(labels))
        )

    def test_segmentation_grid_mismatch(self):
        with pytest.raises(ShapeError):
            loss_segmentation(self._seg_raw([np.full((2, 2, 1), 0.5)]), SegTargets(np.zeros((2, 3), dtype=np.int8)))

    def test_total(self):
        cfg = TrainConfig()
        _, parts = loss_total(np.array(1.0), np.array(0.2), np.array(0.3), cfg)
        assert parts.total == 1.0 + 0.2 + 0.3
        _, parts = loss_total(np.array(1.0), np.array(7.0), np.array(0.3), TrainConfig(lambda_ia=0.0))
        assert parts.total == 1.0 + 0.3

    def test_total_rejects_non_finite(self):
        with pytest.raises(NumericDomainError):
            loss_total(np.array(np.inf), np.array(0.0), np.array(0.0), TrainConfig())

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lambda_bb, cfg.lambda_ia, cfg.lambda_sm) == (5.0, 1.0, 1.0)
        assert (cfg.anchors_per_image, cfg.momentum, cfg.weight_decay, cfg.clip_norm) == (120, 0.9, 0.0005, 10.0)


class TestLossGradients:
    def test_detection(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(0.05, 0.95, size=(3, 4, 2))
        deltas = rng.normal(size=(3, 4, 8)) * 0.6
        sample = Sample(np.arange(10), (np.arange(10) < 4).astype(float), rng.normal(size=(10, 4)) * 0.3)

        def f(s, d, tape=None):
            return loss_detection(RawOutputs(None, s, d), sample, tape=tape)

        assert grad_check(f, [scores, deltas]) < 1e-4

    def test_illumination(self):
        probs = np.array([0.3, 0.7])

        def f(p, tape=None):
            return loss_illumination(IlluminationWeights(p), 1.0, tape)

        assert grad_check(f, [probs]) < 1e-4

    def test_segmentation(self):
        rng = np.random.default_rng(1)
        maps = [rng.uniform(0.05, 0.95, size=(3, 5, 1)) for _ in range(2)]
        targets = SegTargets(rng.choice([0, 1, EXCLUDED], size=(3, 5)).astype(np.int8))

        def f(a, b, tape=None):
            raw = RawOutputs(None, np.zeros((1, 1, 1)), np.zeros((1, 1, 4)), seg_fused=[a, b])
            return loss_segmentation(raw, targets, tape=tape)

        assert grad_check(f, maps) < 1e-4

    def test_gate_gradient_sign(self):
        # day head ranks positives above the night head, label says day
        day = np.full((1, 4, 1), 0.8)
        night = np.full((1, 4, 1), 0.3)
        probs = np.array([0.5, 0.5])
        sample = Sample(np.arange(4), np.ones(4), np.zeros((4, 4)))
        tape = Tape()
        fused = gated_mix(IlluminationWeights(probs), day, night, tape)
        loss = loss_detection(RawOutputs(None, fused, np.zeros((1, 4, 4))), sample, tape=tape)
        g = backprop(tape, loss, np.ones_like(loss), wrt=[probs])[probs]
        # direction that raises w_day and lowers w_night
        assert g[0] - g[1] < 0


class TestSGD:
    def _net(self, **params):
        return Network(NetworkConfig(), {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})

    def test_decay_only(self):
        net = self._net(p=[1.0])
        sgd_step(net, {"p": np.zeros(1)}, {}, TrainConfig(lr=0.1, weight_decay=0.5, momentum=0.0))
        assert net.params["p"][0] == pytest.approx(0.95, abs=1e-15)

    def test_momentum_recursion(self):
        net = self._net(p=[0.0])
        state, cfg = {}, TrainConfig(lr=0.1, weight_decay=0.0, momentum=0.9)
        for _ in range(2):
            sgd_step(net, {"p": np.ones(1)}, state, cfg)
        assert net.params["p"][0] == pytest.approx(-0.29, abs=1e-15)

    def test_clipping_halves(self):
        net = self._net(a=[0.0, 0.0], b=[0.0])
        grads = {"a": np.array([12.0, 0.0]), "b": np.array([16.0])}
        assert global_norm(grads) == 20.0
        sgd_step(net, grads, {}, TrainConfig(lr=1.0, weight_decay=0.0, momentum=0.0, clip_norm=10.0))
        np.testing.assert_allclose(net.params["a"], [-6.0, 0.0])
        np.testing.assert_allclose(net.params["b"], [-8.0])

    def test_missing_gradient(self):
        with pytest.raises(UsageError):
            sgd_step(self._net(a=[0.0], b=[0.0]), {"a": np.zeros(1)}, {}, TrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(self._net(a=[0.0, 1.0]), {"a": np.zeros(3)}, {}, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(anchors_per_image=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(normalization="sum")


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic_dataset(n_frames=6, seed=3, height=64, width=80)


class TestTrainLoop:
    def test_history_and_determinism(self, small_data, tmp_path):
        cfg = NetworkConfig(head_variant="IATDNN", seg_variant="IAMSS")
        tc = TrainConfig(iterations=12, seed=4, checkpoint_every=5)
        net_a, hist_a = train(small_data, build_network(cfg, seed=1), tc, run_dir=tmp_path / "a")
        net_b, hist_b = train(small_data, build_network(cfg, seed=1), tc, run_dir=tmp_path / "b")
        assert len(hist_a) == 12
        for h in hist_a:
            assert h.total == h.L_D + tc.lambda_ia * h.L_I + tc.lambda_sm * h.L_S
            assert min(h.L_D, h.L_I, h.L_S) >= 0
        for name in ("final.iadn", "checkpoint_000005.iadn", "checkpoint_000010.iadn", "loss.csv", "config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
        assert lines[0] == "iter,L_I,L_D,L_S,total" and len(lines) == 13

    def test_does_not_mutate_input(self, small_data):
        net = build_network(NetworkConfig(head_variant="TDNN", seg_variant="NONE"), seed=0)
        before = {k: v.copy() for k, v in net.params.items()}
        train(small_data, net, TrainConfig(iterations=3))
        for k in before:
            np.testing.assert_array_equal(net.params[k], before[k])

    def test_tdnn_has_no_illumination_or_seg_term(self, small_data):
        net = build_network(NetworkConfig(head_variant="TDNN", seg_variant="NONE"), seed=0)
        _, hist = train(small_data, net, TrainConfig(iterations=3))
        assert all(h.L_I == 0.0 and h.L_S == 0.0 for h in hist)

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train([], build_network(NetworkConfig(), seed=0), TrainConfig(iterations=1))

    def test_overfit_single_frame(self):
        frame = next(f for f in generate_synthetic_dataset(n_frames=10, seed=0) if len(f.annotations) >= 2)
        net = build_network(NetworkConfig(head_variant="TDNN", seg_variant="NONE"), seed=0)
        # memorization needs a livelier step than the 2000-iteration default (0.001 reaches ~0.4 here)
        tc = TrainConfig(iterations=300, seed=0, lr=0.01)
        net, _ = train([frame], net, tc)
        # classification term alone, averaged over fresh samples of the frame
        cache = FrameCache(anchors_for(net, frame.size), net.config.stride)
        raw = forward(net, frame)
        rng = np.random.default_rng(123)
        cls = [float(loss_detection(raw, sample_minibatch(cache.assignment(frame), 120, rng), lambda_bb=0.0)) for _ in range(10)]
        assert np.mean(cls) < 0.05
