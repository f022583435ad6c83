import math

import numpy as np
import pytest
import torch

from colodistill import gradcheck, mil
from colodistill.nets import EncoderConfig, NumericFailure
from colodistill.records import Bag, ImageSample


def tiny_model(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cfg = mil.MILConfig(EncoderConfig(channels=(2, 3), out_dim=4), attn_hidden=3, q_dim=3)
    return mil.MILModel(cfg).to(dtype)


def set_linear(lin, w, b=None):
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(w, dtype=lin.weight.dtype))
        lin.bias.copy_(torch.zeros_like(lin.bias) if b is None else torch.as_tensor(b, dtype=lin.bias.dtype))


class TestABMIL:
    def test_equal_scores(self):
        head = mil.ABMILHead(2, 3).double()
        with torch.no_grad():
            head.fc2.weight.zero_()
        a, f = mil.abmil_pool(torch.eye(2, dtype=torch.float64), head)
        assert torch.allclose(f, torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_single_instance(self):
        head = mil.ABMILHead(3).double()
        h = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
        a, f = mil.abmil_pool(h, head)
        assert a.item() == 1.0
        assert torch.equal(f, h[0])

    def test_hand_softmax(self):
        head = mil.ABMILHead(2, 1).double()
        # fc1 = identity-ish onto 1 hidden unit; make scores exactly [ln 3, 0] via fc2 on atanh
        h = torch.eye(2, dtype=torch.float64)
        scores = torch.tensor([math.log(3), 0.0], dtype=torch.float64)
        a = torch.softmax(scores, 0)
        assert torch.allclose(a, torch.tensor([0.75, 0.25], dtype=torch.float64))
        t = torch.tanh(torch.tensor(0.5, dtype=torch.float64)).item()
        set_linear(head.fc1, [[0.5, 0.0]])
        set_linear(head.fc2, [[math.log(3) / t]])
        a2, f = mil.abmil_pool(h, head)
        assert torch.allclose(a2, torch.tensor([0.75, 0.25], dtype=torch.float64), atol=1e-12)
        assert torch.allclose(f, torch.tensor([0.75, 0.25], dtype=torch.float64), atol=1e-12)


class TestDSMIL:
    def test_critical_argmax(self):
        head = mil.DSMILHead(1, 1).double()
        set_linear(head.g, [[1.0]])
        _, _, crit, logit = mil.dsmil_pool(torch.tensor([[0.2], [0.9]], dtype=torch.float64), head)
        assert crit == 1
        assert logit.item() == pytest.approx(0.9)

    def test_identical_embeddings(self):
        head = mil.DSMILHead(3, 2).double()
        h = torch.tensor([[0.1, 0.2, 0.3]] * 4, dtype=torch.float64)
        a, f, _, _ = mil.dsmil_pool(h, head)
        assert torch.allclose(a, torch.full((4,), 0.25, dtype=torch.float64))
        assert torch.allclose(f, head.f_v(h[0]))

    def test_three_instance_hand_case(self):
        head = mil.DSMILHead(2, 2).double()
        set_linear(head.g, [[1.0, 0.0]])
        set_linear(head.f_q, [[1.0, 0.0], [0.0, 1.0]])
        set_linear(head.f_v, [[2.0, 0.0], [0.0, 1.0]], [1.0, 0.0])
        h = torch.tensor([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]], dtype=torch.float64)
        a, f, crit, _ = mil.dsmil_pool(h, head)
        # critical = instance 0; <q_i, q_0> = [1, 0.5, 0]
        e = np.exp([1.0, 0.5, 0.0])
        want_a = e / e.sum()
        v = np.array([[3.0, 0.0], [2.0, 0.5], [1.0, 1.0]])
        assert crit == 0
        np.testing.assert_allclose(a.detach().numpy(), want_a, atol=1e-12)
        np.testing.assert_allclose(f.detach().numpy(), want_a @ v, atol=1e-12)


class TestMerge:
    def test_arithmetic(self):
        got = mil.merge_pseudo_labels([1.0, 0.2, 0.0], [0.6, 1.0, 0.0], 1)
        np.testing.assert_allclose(got, [0.8, 0.6, 0.0])

    def test_rescales_softmax(self):
        got = mil.merge_pseudo_labels([0.5, 0.25, 0.25], [0.2, 0.4, 0.4], 1)
        np.testing.assert_allclose(got, [0.75, 0.75, 0.75])

    def test_negative_bag(self):
        assert not mil.merge_pseudo_labels([0.7, 0.3], [0.1, 0.9], 0).any()

    def test_idempotent(self):
        a = np.array([0.1, 1.0, 0.4])
        np.testing.assert_allclose(mil.merge_pseudo_labels(a, a, 1), a)

    def test_zero_max(self):
        np.testing.assert_array_equal(mil.merge_pseudo_labels([0, 0], [0, 0], 1), [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mil.merge_pseudo_labels([1, 0], [1], 1)


class TestLosses:
    def test_teacher_half_probability(self):
        m = tiny_model()
        with torch.no_grad():
            for head in (m.bag_head1, m.bag_head2):
                head.weight.zero_()
                head.bias.zero_()
        x = torch.randn(3, 3, 8, 8, dtype=torch.float64)
        t = mil.teacher_losses(m, x, 1)
        assert t["abmil"].item() == pytest.approx(math.log(2), abs=1e-12)
        assert t["dsmil"].item() == pytest.approx(math.log(2), abs=1e-12)

    def test_teacher_perfect_limit(self):
        m = tiny_model()
        with torch.no_grad():
            for head in (m.bag_head1, m.bag_head2):
                head.weight.zero_()
                head.bias.fill_(40.0)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        t = mil.teacher_losses(m, x, 1)
        assert t["abmil"].item() < 1e-15 and t["dsmil"].item() < 1e-15

    def test_student_half(self):
        m = tiny_model()
        with torch.no_grad():
            m.instance_head.weight.zero_()
            m.instance_head.bias.zero_()
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        assert mil.student_step(m, x, [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_student_perfect_limit(self):
        m = tiny_model()
        with torch.no_grad():
            m.instance_head.weight.zero_()
            m.instance_head.bias.fill_(-40.0)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        assert mil.student_step(m, x, [0.0, 0.0]).item() < 1e-15

    def test_student_length_check(self):
        with pytest.raises(ValueError):
            mil.student_step(tiny_model(), torch.randn(2, 3, 8, 8, dtype=torch.float64), [1.0])

    @pytest.mark.parametrize("seed", range(3))
    def test_teacher_gradient(self, seed):
        m = tiny_model(seed)
        x = torch.randn(4, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        params = list(m.parameters())
        assert gradcheck.check(lambda: mil.teacher_step(m, x, seed % 2), params) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_student_gradient(self, seed):
        m = tiny_model(seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(3, 3, 8, 8, dtype=torch.float64, generator=g)
        y = torch.rand(3, dtype=torch.float64, generator=g).numpy()
        assert gradcheck.check(lambda: mil.student_step(m, x, y), list(m.parameters())) < 1e-4


class TestPredict:
    def test_zero_head(self):
        m = tiny_model(dtype=torch.float32)
        with torch.no_grad():
            m.instance_head.weight.zero_()
            m.instance_head.bias.zero_()
        img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
        assert mil.predict_instance(m, img) == 0.5

    def test_monotone_in_logit(self):
        m = tiny_model(1, dtype=torch.float32)
        imgs = np.random.default_rng(1).integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
        from colodistill.nets import to_input

        logits = m.instance_logits(to_input(imgs)).detach().numpy()
        p = mil.predict_instance(m, imgs)
        assert np.sign(p[0] - p[1]) == np.sign(logits[0] - logits[1])

    def test_report_max(self):
        assert mil.predict_report([0.1, 0.9, 0.3]) == 0.9
        assert mil.predict_report([0.42]) == 0.42
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s = rng.random(int(rng.integers(1, 30))).tolist()
            best = s[0]
            for v in s:
                if v > best:
                    best = v
            assert mil.predict_report(s) == best

    def test_report_empty(self):
        with pytest.raises(ValueError):
            mil.predict_report([])


class TestInvariants:
    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariance(self, seed):
        m = tiny_model(seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(6, 3, 8, 8, dtype=torch.float64, generator=g)
        perm = torch.randperm(6, generator=g)
        h = m.embed(x)
        a1, f1 = mil.abmil_pool(h, m.abmil_head)
        a1p, f1p = mil.abmil_pool(h[perm], m.abmil_head)
        assert (f1 - f1p).abs().max() <= 1e-9
        assert (a1[perm] - a1p).abs().max() <= 1e-9
        a2, f2, c, _ = mil.dsmil_pool(h, m.dsmil_head)
        a2p, f2p, cp, _ = mil.dsmil_pool(h[perm], m.dsmil_head)
        assert (f2 - f2p).abs().max() <= 1e-9
        assert (a2[perm] - a2p).abs().max() <= 1e-9
        assert int(perm[cp]) == c
        for a in (a1, a2):
            assert abs(a.sum().item() - 1.0) <= 1e-9


def _bags(n_bags=4, n=3, side=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for b in range(n_bags):
        inst = tuple(
            ImageSample(f"b{b}_{j}", rng.integers(0, 256, (side, side, 3), dtype=np.uint8), f"b{b}") for j in range(n)
        )
        out.append(Bag(f"b{b}", inst, b % 2))
    return out


class TestTraining:
    def test_zero_epochs_unchanged(self):
        m = tiny_model(dtype=torch.float32)
        before = {k: v.clone() for k, v in m.state_dict().items()}
        m, log = mil.train_alternating(m, _bags(), 0)
        assert log == []
        for k, v in m.state_dict().items():
            assert torch.equal(v, before[k])

    def test_bit_identical_log(self):
        runs = []
        for _ in range(2):
            m = tiny_model(dtype=torch.float32)
            m, log = mil.train_alternating(m, _bags(), 2, mil.MILTrainConfig(seed=3, student_batch=4))
            runs.append((log, {k: v.clone() for k, v in m.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert torch.equal(runs[0][1][k], runs[1][1][k])
        assert [(r.round, r.branch) for r in runs[0][0]] == [(1, "teacher"), (1, "student"), (2, "teacher"), (2, "student")]

    def test_non_finite_aborts(self):
        m = tiny_model(dtype=torch.float32)
        with torch.no_grad():
            m.bag_head1.bias.fill_(float("nan"))
        with pytest.raises(NumericFailure):
            mil.train_alternating(m, _bags(), 1)

    def test_empty_bags(self):
        with pytest.raises(ValueError):
            mil.train_alternating(tiny_model(dtype=torch.float32), [], 1)

    def test_checkpoint_round_trip(self, tmp_path):
        m = tiny_model(dtype=torch.float32)
        mil.save_mil(tmp_path / "m.safetensors", m, mil.MILTrainConfig(), seed=1)
        m2, meta = mil.load_mil(tmp_path / "m.safetensors")
        assert meta["C"] == 4 and meta["seed"] == 1
        for k, v in m.state_dict().items():
            assert torch.equal(v, m2.state_dict()[k])
        mil.save_mil(tmp_path / "m2.safetensors", m, mil.MILTrainConfig(), seed=1)
        assert (tmp_path / "m.safetensors").read_bytes() == (tmp_path / "m2.safetensors").read_bytes()
