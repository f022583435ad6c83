import csv
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colodistill import gradcheck
from colodistill import sam_distill as sd
from colodistill.adapter import AdapterSegmenter
from colodistill.eval import dice
from colodistill.imaging import read_mask
from colodistill.records import ImageSample
from colodistill.synth import Ellipse, SynthConfig, generate
from colodistill.wsss import BoxPrompt


def disc(side, cy, cx, r):
    return Ellipse(cy, cx, r, r, 0.0).mask(side)


def sample(iid, side=32):
    return ImageSample(iid, np.zeros((side, side, 3), np.uint8), "R")


def pixel_dice(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    return 2 * inter / (sum(a) + sum(b))


class Counting:
    deterministic = True

    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def segment(self, image, box):
        self.calls += 1
        return self.inner.segment(image, box)


class TestOracle:
    truth = {"a": disc(32, 15, 15, 6)}

    def test_noise_free_is_truth_and_box(self):
        box = BoxPrompt(0, 0, 14, 31)
        m = sd.oracle_segmenter(self.truth).segment(sample("a"), box)
        np.testing.assert_array_equal(m.values, self.truth["a"] & box.to_mask(32, 32))

    def test_dilation_superset(self):
        full = BoxPrompt(0, 0, 31, 31)
        m = sd.oracle_segmenter(self.truth, radius=1).segment(sample("a"), full).values
        assert np.all(m >= self.truth["a"]) and m.sum() > self.truth["a"].sum()

    def test_erosion_subset(self):
        m = sd.oracle_segmenter(self.truth, radius=1, mode="erode").segment(sample("a"), BoxPrompt(0, 0, 31, 31)).values
        assert np.all(m <= self.truth["a"]) and m.sum() < self.truth["a"].sum()

    def test_dice_decreases_with_radius(self):
        full = BoxPrompt(0, 0, 31, 31)
        scores = [
            pixel_dice(sd.oracle_segmenter(self.truth, radius=r).segment(sample("a"), full).values, self.truth["a"])
            for r in range(5)
        ]
        assert scores[0] == 1.0 and all(a > b for a, b in zip(scores, scores[1:]))

    def test_random_mode_deterministic(self):
        truth = {f"i{k}": disc(32, 15, 15, 6) for k in range(20)}
        seg = sd.oracle_segmenter(truth, radius=2, mode="random", seed=3)
        box = BoxPrompt(0, 0, 31, 31)
        first = [seg.segment(sample(i), box).values.sum() for i in sorted(truth)]
        again = [seg.segment(sample(i), box).values.sum() for i in sorted(truth)]
        assert first == again and len(set(first)) == 2

    def test_unknown_image(self):
        with pytest.raises(sd.SegmenterError):
            sd.oracle_segmenter({}).segment(sample("zz"), BoxPrompt(0, 0, 1, 1))


class TestPseudoMasks:
    def test_disjoint_box(self):
        truth = {"a": disc(32, 8, 8, 4)}
        pm = sd.generate_pseudo_masks(sd.oracle_segmenter(truth), {"a": sample("a")}, {"a": [BoxPrompt(20, 20, 31, 31)]})
        assert not pm.masks["a"].values.any()

    def test_union_of_two_boxes(self):
        a, b = disc(32, 7, 7, 4), disc(32, 23, 23, 5)
        truth = {"a": a | b}
        boxes = [BoxPrompt(0, 0, 15, 15), BoxPrompt(16, 16, 31, 31)]
        pm = sd.generate_pseudo_masks(sd.oracle_segmenter(truth), {"a": sample("a")}, {"a": boxes})
        assert int(pm.masks["a"].values.sum()) == int(a.sum()) + int(b.sum())

    def test_failure_recorded(self):
        truth = {"a": disc(32, 8, 8, 4)}
        imgs = {"a": sample("a"), "b": sample("b")}
        box = [BoxPrompt(0, 0, 31, 31)]
        pm = sd.generate_pseudo_masks(sd.oracle_segmenter(truth), imgs, {"a": box, "b": box})
        assert list(pm.masks) == ["a"] and "b" in pm.failures

    def test_missing_box(self):
        with pytest.raises(ValueError):
            sd.generate_pseudo_masks(sd.oracle_segmenter({}), {"a": sample("a")}, {"a": []})

    def test_concurrent_matches_serial(self):
        truth = {f"i{k}": disc(32, 10 + k % 8, 12, 5) for k in range(12)}
        imgs = {i: sample(i) for i in truth}
        boxes = {i: [BoxPrompt(0, 0, 20, 31)] for i in truth}
        seg = sd.oracle_segmenter(truth, radius=1)
        one = sd.generate_pseudo_masks(seg, imgs, boxes, max_workers=1)
        four = sd.generate_pseudo_masks(seg, imgs, boxes, max_workers=4)
        assert all(np.array_equal(one.masks[i].values, four.masks[i].values) for i in truth)


class TestMaskToBox:
    def test_single_pixel(self):
        m = np.zeros((8, 8), np.uint8)
        m[3, 5] = 1
        assert sd.mask_to_box(m).as_tuple() == (3, 5, 3, 5)

    def test_full_frame(self):
        assert sd.mask_to_box(np.ones((6, 9), np.uint8)).as_tuple() == (0, 0, 5, 8)

    def test_two_pixels(self):
        m = np.zeros((8, 8), np.uint8)
        m[2, 3] = m[4, 7] = 1
        assert sd.mask_to_box(sd.BinaryMask("x", m)).as_tuple() == (2, 3, 4, 7)

    def test_empty(self):
        with pytest.raises(sd.NoForeground):
            sd.mask_to_box(np.zeros((4, 4), np.uint8))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
    def test_minimal_box(self, m):
        if not m.any():
            return
        b = sd.mask_to_box(m)
        pts = [(r, c) for r in range(m.shape[0]) for c in range(m.shape[1]) if m[r, c]]
        assert b.as_tuple() == (
            min(p[0] for p in pts),
            min(p[1] for p in pts),
            max(p[0] for p in pts),
            max(p[1] for p in pts),
        )
        assert not (m * (1 - b.to_mask(*m.shape))).any()


class TestMaskChange:
    def test_hand_value(self):
        a = {"x": sd.BinaryMask("x", np.zeros((2, 2), np.uint8))}
        b = {"x": sd.BinaryMask("x", np.array([[1, 0], [0, 0]], np.uint8))}
        assert sd.mean_mask_change(a, b) == 0.25

    def test_first_iteration_against_empty(self):
        b = {"x": sd.BinaryMask("x", np.ones((2, 2), np.uint8))}
        assert sd.mean_mask_change({}, b) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_range_and_identity(self, data):
        shape = (4, 5)
        a = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
        b = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
        ma, mb = {"i": sd.BinaryMask("i", a)}, {"i": sd.BinaryMask("i", b)}
        v = sd.mean_mask_change(ma, mb)
        assert 0.0 <= v <= 1.0
        assert (v == 0.0) == np.array_equal(a, b)

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError):
            sd.BinaryMask("x", np.full((2, 2), 2))


class TestSegModel:
    @pytest.mark.parametrize("hw", [(64, 64), (37, 45), (8, 8)])
    def test_output_shape(self, hw):
        m = sd.SegmentationModel()
        assert m(torch.zeros(2, 3, *hw)).shape == (2, *hw)

    def test_zero_steps(self):
        torch.manual_seed(0)
        m = sd.SegmentationModel(sd.UNetConfig(base=4, depth=2))
        before = {k: v.clone() for k, v in m.state_dict().items()}
        sd.train_seg_model(m, np.zeros((2, 16, 16, 3), np.uint8), np.zeros((2, 16, 16), np.uint8), sd.SegTrainConfig(steps=0))
        assert all(torch.equal(v, before[k]) for k, v in m.state_dict().items())

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            sd.train_seg_model(sd.SegmentationModel(), np.zeros((1, 8, 8, 3), np.uint8), np.full((1, 8, 8), 3))

    def test_loss_closed_form(self):
        z = torch.zeros(1, 2, 2, dtype=torch.float64)
        t = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
        want = np.log(2) + 1 - (2 * 0.5 + 1) / (2.0 + 1.0 + 1)
        assert sd.seg_loss(z, t).item() == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_logits(self, seed):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(2, 5, 4, generator=g, dtype=torch.float64).requires_grad_()
        t = (torch.rand(2, 5, 4, generator=g) < 0.4).double()
        assert gradcheck.check(lambda: sd.seg_loss(z, t), [z]) < 1e-4

    def test_gradient_params(self):
        torch.manual_seed(0)
        m = sd.SegmentationModel(sd.UNetConfig(base=2, depth=1)).double()
        x = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        t = (torch.rand(1, 6, 6) < 0.5).double()
        params = [m.out.weight, m.up[0][0].weight]
        assert gradcheck.check(lambda: sd.seg_loss(m(x), t), params) < 1e-4

    def test_checkpoint(self, tmp_path):
        m = sd.SegmentationModel(sd.UNetConfig(base=4, depth=2))
        sd.save_seg(tmp_path / "s.safetensors", m)
        m2, _ = sd.load_seg(tmp_path / "s.safetensors")
        assert all(torch.equal(v, m2.state_dict()[k]) for k, v in m.state_dict().items())

    @pytest.mark.slow
    def test_memorization(self):
        ds = generate(SynthConfig(n_records=6, seed=1))
        items = list(ds.frame_items(positive_only=True))[:4]
        x = np.stack([i[1] for i in items])
        y = np.stack([i[2] for i in items])
        torch.manual_seed(0)
        m, _ = sd.train_seg_model(sd.SegmentationModel(), x, y, sd.SegTrainConfig(steps=2000, batch=4))
        pred = sd.predict_masks(m, x)
        assert np.mean([dice(p, t) for p, t in zip(pred, y)]) >= 0.95


def _small_set(n=8, seed=0):
    ds = generate(SynthConfig(n_records=4, seed=seed))
    items = list(ds.frame_items(positive_only=True))[:n]
    images = {i[0]: ImageSample(i[0], i[1], i[4]) for i in items}
    truth = {i[0]: i[2] for i in items}
    return images, truth


class TestRefineLoop:
    def test_fixed_point(self):
        images, truth = _small_set()
        boxes = {i: [sd.mask_to_box(m)] for i, m in truth.items()}
        torch.manual_seed(0)
        cfg = sd.RefineConfig(max_iters=3, seg=sd.SegTrainConfig(steps=100))
        model = sd.SegmentationModel(sd.UNetConfig(base=8))
        final, hist = sd.refine_loop(sd.oracle_segmenter(truth), model, images, boxes, cfg, truth)
        assert len(hist) == 2 and hist[1].mean_mask_change == 0.0
        assert all(np.array_equal(final[i].values, truth[i]) for i in truth)

    def test_single_iteration(self):
        images, truth = _small_set(4)
        seg = Counting(sd.oracle_segmenter(truth))
        boxes = {i: [BoxPrompt(0, 0, 63, 63)] for i in images}
        cfg = sd.RefineConfig(max_iters=1, seg=sd.SegTrainConfig(steps=2))
        _, hist = sd.refine_loop(seg, sd.SegmentationModel(), images, boxes, cfg)
        assert len(hist) == 1 and seg.calls == len(images)

    def test_all_empty_aborts(self):
        images, _ = _small_set(2)
        empty = {i: np.zeros((64, 64), np.uint8) for i in images}
        with pytest.raises(sd.RefinementError):
            sd.refine_loop(sd.oracle_segmenter(empty), sd.SegmentationModel(), images,
                           {i: [BoxPrompt(0, 0, 63, 63)] for i in images})

    def test_max_iters_validated(self):
        with pytest.raises(ValueError):
            sd.RefineConfig(max_iters=0)

    def test_outputs(self, tmp_path):
        images, truth = _small_set(3)
        boxes = {i: [BoxPrompt(0, 0, 63, 63)] for i in images}
        cfg = sd.RefineConfig(max_iters=2, eps=-1, seg=sd.SegTrainConfig(steps=2))
        final, hist = sd.refine_loop(sd.oracle_segmenter(truth), sd.SegmentationModel(), images, boxes, cfg, truth)
        sd.write_masks(tmp_path / "m", final)
        sd.write_iteration_report(tmp_path / "it.csv", hist)
        for i in images:
            np.testing.assert_array_equal(read_mask(tmp_path / "m" / f"{i}.png"), final[i].values)
        rows = list(csv.DictReader(open(tmp_path / "it.csv")))
        assert [int(r["iteration"]) for r in rows] == [1, 2]
        assert float(rows[0]["mean_mask_change"]) == hist[0].mean_mask_change


class TestAdapter:
    def test_round_trip(self, tmp_path):
        ds = generate(SynthConfig(n_records=3, seed=2))
        ds.write(tmp_path)
        items = list(ds.frame_items(positive_only=True))[:3]
        local = sd.oracle_segmenter({i[0]: i[2] for i in items}, radius=1)
        cmd = [sys.executable, "-m", "colodistill.adapter", "--truth", str(tmp_path / "truth.json"), "--radius", "1"]
        box = BoxPrompt(4, 2, 50, 60)
        with AdapterSegmenter(cmd) as remote:
            for iid, px, _, _, rid in items:
                img = ImageSample(iid, px, rid)
                np.testing.assert_array_equal(remote.segment(img, box).values, local.segment(img, box).values)
            with pytest.raises(sd.SegmenterError):
                remote.segment(ImageSample("nope", items[0][1], ""), box)
            # the server survives a bad request
            img = ImageSample(items[0][0], items[0][1], "")
            assert remote.segment(img, box).values.any()
