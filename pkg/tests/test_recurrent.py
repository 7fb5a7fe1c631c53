import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rstn import tensor as tc
from rstn.model import TINY_ARCH, init_bundle
from rstn.recurrent import (
    TrainConfig,
    TrainLog,
    crop,
    crop_box,
    foreground_slices,
    loss_weights,
    sample_schedule,
    soft_dsc_loss,
    train_view,
    unrolled_loss,
    unrolled_step,
)
from rstn.tensor import Tensor, check_gradients
from rstn.volume import LabelMask, Volume


def scan_box(ref, k):
    """Brute-force oracle: loop over every pixel tracking extreme activated coordinates."""
    h, w = ref.shape
    rmin = cmin = None
    rmax = cmax = -1
    for i in range(h):
        for j in range(w):
            if ref[i, j] >= 0.5:
                rmin = i if rmin is None else min(rmin, i)
                cmin = j if cmin is None else min(cmin, j)
                rmax, cmax = max(rmax, i), max(cmax, j)
    if rmin is None:
        return (0, 0, h - 1, w - 1)
    return (max(rmin - k, 0), max(cmin - k, 0), min(rmax + k, h - 1), min(cmax + k, w - 1))


class TestCrop:
    def test_single_pixel_clamped(self):
        ref = np.zeros((64, 64))
        ref[10, 10] = 1
        assert crop_box(ref, 20).as_tuple() == (0, 0, 30, 30)
        assert scan_box(ref, 20) == (0, 0, 30, 30)

    def test_empty_reference_whole_image(self):
        box = crop_box(np.zeros((12, 9)), 20)
        assert box.as_tuple() == (0, 0, 11, 8) and box.fallback

    def test_zero_margin(self):
        ref = np.zeros((16, 16))
        ref[5, 5] = ref[7, 9] = 1
        assert crop_box(ref, 0).as_tuple() == (5, 5, 7, 9)

    def test_threshold_inclusive(self):
        ref = np.zeros((8, 8))
        ref[3, 4] = 0.5
        ref[6, 6] = 0.4999
        assert crop_box(ref, 0).as_tuple() == (3, 4, 3, 4)

    def test_random_references_match_oracle(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            ref = r.random((16, 16)) * (r.random((16, 16)) < r.random() * 0.2)
            k = int(r.integers(0, 6))
            assert crop_box(ref, k).as_tuple() == scan_box(ref, k)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), k=st.integers(0, 8))
    def test_box_covers_activation(self, seed, k):
        r = np.random.default_rng(seed)
        ref = (r.random((12, 15)) < 0.05).astype(float)
        b = crop_box(ref, k)
        assert 0 <= b.r0 <= b.r1 < 12 and 0 <= b.c0 <= b.c1 < 15
        rows, cols = np.nonzero(ref >= 0.5)
        if rows.size:
            assert rows.min() >= b.r0 and rows.max() <= b.r1 and cols.min() >= b.c0 and cols.max() <= b.c1

    def test_min_size_widening(self):
        ref = np.zeros((9, 9))
        ref[0, 8] = 1
        b = crop_box(ref, 0, min_size=4)
        assert b.shape == (4, 4) and b.as_tuple() == (0, 5, 3, 8)

    def test_crop_tensor(self):
        img = Tensor(np.arange(3 * 6 * 6, dtype=float).reshape(3, 6, 6))
        ref = np.zeros((6, 6))
        ref[2, 3] = 1
        out, box = crop(img, ref, 1)
        np.testing.assert_array_equal(out.data, img.data[:, 1:4, 2:5])

    def test_negative_margin(self):
        with pytest.raises(ValueError):
            crop_box(np.zeros((4, 4)), -1)


class TestSoftDSC:
    def test_perfect(self):
        y = np.zeros((1, 8, 8))
        y[0, 2:5, 3:6] = 1
        assert soft_dsc_loss(y, Tensor(y)).item() <= 1e-6

    def test_zero_prediction(self):
        y = np.zeros((1, 8, 8))
        y[0, 2:5, 3:6] = 1
        assert abs(soft_dsc_loss(y, Tensor(np.zeros((1, 8, 8)))).item() - 1) <= 1e-6

    def test_range(self):
        r = np.random.default_rng(0)
        for _ in range(20):
            y = (r.random((1, 6, 6)) < 0.3).astype(float)
            v = soft_dsc_loss(y, Tensor(r.random((1, 6, 6)))).item()
            assert 0 <= v <= 1

    def test_gradient(self):
        r = np.random.default_rng(1)
        y = (r.random((1, 7, 7)) < 0.3).astype(float)
        p = Tensor(r.uniform(0.05, 0.95, (1, 7, 7)), requires_grad=True)
        assert check_gradients(lambda: soft_dsc_loss(y, p), [p]).max_rel_error <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(tc.ShapeError):
            soft_dsc_loss(np.zeros((1, 4, 4)), Tensor(np.zeros((1, 4, 5))))


class TestLossWeights:
    def test_t2(self):
        assert loss_weights(2) == pytest.approx((0.2, 0.4, 0.4), abs=1e-15)

    def test_t1(self):
        assert loss_weights(1) == pytest.approx((1 / 3, 2 / 3), abs=1e-15)

    @pytest.mark.parametrize("T", range(1, 6))
    def test_identities(self, T):
        lam = loss_weights(T)
        assert len(lam) == T + 1
        assert abs(sum(lam) - 1) <= 1e-12
        assert all(abs(2 * lam[0] - x) <= 1e-12 for x in lam[1:])

    def test_invalid(self):
        with pytest.raises(ValueError):
            loss_weights(0)


def _fixture(seed=0, size=9):
    r = np.random.default_rng(seed)
    stack = r.random((3, size, size))
    y = np.zeros((size, size))
    y[3:6, 4:7] = 1
    return stack, y


def _random_fixture(seed, size=9):
    r = np.random.default_rng(seed)
    stack = r.random((3, size, size))
    y = np.zeros((size, size))
    y[3:6, 4:7] = 1
    b = init_bundle("axial", seed, TINY_ARCH, saliency_kernel=3, saliency_layers=2)
    for _, t in b.named_tensors():
        t.data[...] = r.uniform(-0.6, 0.6, t.shape)
    return b, stack, y


class TestUnrolled:
    def test_identity_weighting_reduces_to_crop(self):
        b = init_bundle("axial", 0, TINY_ARCH)
        stack, y = _fixture()
        cfg = TrainConfig(T=1, margin=1, phase2_steps=0, arch=TINY_ARCH)
        _, state = unrolled_loss(b, stack, y, cfg, phase=1)
        box = crop_box(y, 1, TINY_ARCH.min_extent)
        assert np.array_equal(state.inputs[1], box.window(stack))
        assert state.boxes[1] == box

    @pytest.mark.parametrize("T", [1, 2])
    @pytest.mark.parametrize("phase", [1, 2])
    @pytest.mark.parametrize("seed", [2, 7])
    def test_full_gradient(self, T, phase, seed):
        b, stack, y = _random_fixture(seed)
        cfg = TrainConfig(T=T, margin=2, phase2_steps=0, arch=TINY_ARCH)
        _, state = unrolled_loss(b, stack, y, cfg, phase)
        # the crop is piecewise constant in P; keep every probe away from the 0.5 switch
        if phase == 2:
            assert min(np.min(np.abs(p - 0.5)) for p in state.probs[:-1]) > 5e-3
        res = check_gradients(lambda: unrolled_loss(b, stack, y, cfg, phase)[0], b.parameters())
        assert res.max_rel_error <= 1e-4, res

    def test_terms_weighted(self):
        b = init_bundle("axial", 3, TINY_ARCH)
        stack, y = _fixture(2)
        cfg = TrainConfig(T=2, margin=2, phase2_steps=0, arch=TINY_ARCH)
        total, state = unrolled_loss(b, stack, y, cfg, 1)
        assert len(state.terms) == 3 and total.item() == pytest.approx(sum(state.terms), abs=1e-12)

    def test_iteration_zero_uses_coarse_only(self):
        b = init_bundle("axial", 3, TINY_ARCH)
        stack, y = _fixture(2)
        cfg = TrainConfig(T=1, margin=2, phase2_steps=0, arch=TINY_ARCH)
        unrolled_step(b, stack, y, cfg, 1)
        # perturbing the fine net leaves P^(0) unchanged
        _, s1 = unrolled_loss(b, stack, y, cfg, 1)
        b.fine.kernels[0].data += 0.3
        _, s2 = unrolled_loss(b, stack, y, cfg, 1)
        assert np.array_equal(s1.probs[0], s2.probs[0])
        assert not np.array_equal(s1.probs[1], s2.probs[1])

    def test_phase_validation(self):
        b = init_bundle("axial", 3, TINY_ARCH)
        stack, y = _fixture()
        with pytest.raises(ValueError):
            unrolled_loss(b, stack, y, TrainConfig(arch=TINY_ARCH, phase2_steps=0), 3)


class TestConfig:
    def test_lr_order(self):
        with pytest.raises(ValueError, match="smaller"):
            TrainConfig(lr1=1e-4, lr2=1e-4)
        TrainConfig(lr1=1e-4, lr2=1e-6)

    def test_T_cap(self):
        with pytest.raises(ValueError):
            TrainConfig(T=6)


def _tiny_corpus():
    r = np.random.default_rng(0)
    vols, masks = [], []
    for i in range(2):
        v = r.random((10, 10, 10)).astype(np.float32) * 0.5
        m = np.zeros((10, 10, 10), np.uint8)
        m[3 + i:7, 3:7, 4:7] = 1
        v[m == 1] += 0.4
        vols.append(Volume(v))
        masks.append(LabelMask(m))
    return vols, masks


class TestTraining:
    cfg = TrainConfig(T=1, phase1_steps=12, phase2_steps=6, lr1=0.01, lr2=0.001, margin=2, arch=TINY_ARCH)

    def test_schedule_foreground_only(self):
        vols, masks = _tiny_corpus()
        pairs = foreground_slices(masks, "axial")
        assert set(s for _, s in pairs) == {4, 5, 6}
        sched = sample_schedule(masks, "axial", 50, 1)
        assert set(int(s) for s in sched[:, 1]) <= {4, 5, 6}
        assert np.array_equal(sched, sample_schedule(masks, "axial", 50, 1))

    def test_deterministic(self):
        vols, masks = _tiny_corpus()
        a = train_view(vols, masks, "axial", self.cfg, seed=4)
        b = train_view(vols, masks, "axial", self.cfg, seed=4)
        for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_log_records(self):
        vols, masks = _tiny_corpus()
        log = TrainLog()
        train_view(vols, masks, "sagittal", self.cfg, seed=4, log=log)
        assert len(log.records) == 18
        assert [r["phase"] for r in log.records] == [1] * 12 + [2] * 6
        assert all(len(r["terms"]) == 2 for r in log.records)
        assert log.to_jsonl().count("\n") == 18

    def test_saliency_gradient_live(self):
        vols, masks = _tiny_corpus()
        b = train_view(vols, masks, "axial", self.cfg, seed=4)
        stack = np.stack([vols[0].data[:, :, k] for k in (4, 5, 6)]).astype(float)
        unrolled_step(b, stack, masks[0].data[:, :, 5], self.cfg, 2)
        norm = sum(float(np.sum(t.grad ** 2)) for t in b.saliency.parameters())
        assert norm > 0

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train_view([], [], "axial", self.cfg, 0)
