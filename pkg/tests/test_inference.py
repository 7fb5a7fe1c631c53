import numpy as np
import pytest

from rstn.inference import (
    InferenceConfig,
    coarse_probs,
    fine_probs,
    inter_iteration_dsc,
    segment_volume,
    segment_with_oracle_boxes,
)
from rstn.model import TINY_ARCH, VIEWPOINTS
from rstn.recurrent import crop_box
from rstn.volume import AXES, Volume, dsc, fuse_and_binarize

from helpers import blob_case, constant_bundle, flipping_bundle, random_bundles


@pytest.fixture(scope="module")
def case():
    return blob_case(0)


@pytest.fixture(scope="module")
def bundles():
    return random_bundles(1)


def test_identical_predictions_stop_by_threshold():
    bundles = {v: constant_bundle(v, 6.0, 6.0) for v in VIEWPOINTS}
    x = Volume(np.full((8, 8, 8), 0.5, np.float32))
    z, trace = segment_volume(bundles, x, InferenceConfig(T=10, thr=1.0))
    assert trace.termination == "threshold" and trace.iterations == 1
    assert trace.d == [1.0] and z.data.all()


def test_never_identical_runs_to_cap():
    bundles = {v: flipping_bundle(v) for v in VIEWPOINTS}
    x = Volume(np.ones((8, 8, 8), np.float32))
    _, trace = segment_volume(bundles, x, InferenceConfig(T=5, thr=1.0, margin=0))
    assert trace.termination == "max-iterations" and trace.iterations == 5
    # all-foreground and empty alternate
    assert trace.voxel_counts == [512, 0, 512, 0, 512, 0]
    assert trace.d == [0.0] * 5


def test_empty_coarse_falls_back_to_whole_slices():
    bundles = {v: constant_bundle(v, -8.0, 6.0) for v in VIEWPOINTS}
    x = Volume(np.full((8, 9, 10), 0.5, np.float32))
    z, trace = segment_volume(bundles, x, InferenceConfig(T=3))
    assert trace.empty_coarse
    assert trace.boxes[1]["axial"][0] == (0, 0, 7, 8)
    assert len(trace.fallback_slices) == 8
    assert z.data.all()


def test_iteration_zero_is_coarse_only(bundles, case):
    x, _ = case
    _, trace = segment_volume(bundles, x, InferenceConfig(T=2), keep_probs=True)
    p = [coarse_probs(bundles[v], x.data, v) for v in VIEWPOINTS]
    _, z0 = fuse_and_binarize(*p)
    assert np.array_equal(trace.masks[0], z0)
    assert trace.boxes[0] == {}


def test_returned_mask_is_final(bundles, case):
    x, _ = case
    z, trace = segment_volume(bundles, x, InferenceConfig(T=3, thr=0.5))
    assert np.array_equal(z.data, trace.masks[-1])
    assert len(trace.d) == trace.iterations and 1 <= trace.iterations <= 3
    assert all(0 <= d <= 1 for d in trace.d)


def test_deterministic(bundles, case):
    x, _ = case
    cfg = InferenceConfig(T=3, thr=0.999)
    _, a = segment_volume(bundles, x, cfg)
    _, b = segment_volume(bundles, x, cfg)
    assert a.to_json() == b.to_json() and a.boxes == b.boxes
    assert all(np.array_equal(m1, m2) for m1, m2 in zip(a.masks, b.masks))


def test_substituted_reference_reproduces_iteration(bundles, case):
    x, _ = case
    cfg = InferenceConfig(T=3, thr=1.0, margin=2)
    _, trace = segment_volume(bundles, x, cfg, keep_probs=True)
    for t in range(1, trace.iterations + 1):
        new = [fine_probs(bundles[v], x.data, v, trace.probs[t - 1][v].copy(), cfg.margin)[0] for v in VIEWPOINTS]
        _, z = fuse_and_binarize(*new)
        assert np.array_equal(z, trace.masks[t])


def test_fine_probs_zero_outside_box(bundles, case):
    x, y = case
    ref = y.data.astype(float)
    p, boxes = fine_probs(bundles["axial"], x.data, "axial", ref, 1)
    for i, b in enumerate(boxes):
        sl = np.take(p, i, axis=AXES["axial"]).copy()
        sl[b.r0:b.r1 + 1, b.c0:b.c1 + 1] = 0
        assert not sl.any()


def test_fused_reference_option(bundles, case):
    x, _ = case
    z, trace = segment_volume(bundles, x, InferenceConfig(T=2, reference="fused"))
    assert z.shape == x.shape and trace.iterations >= 1


def test_missing_view(bundles, case):
    with pytest.raises(ValueError, match="missing"):
        segment_volume({"axial": bundles["axial"]}, case[0])


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(thr=0.0)
    with pytest.raises(ValueError):
        InferenceConfig(T=0)
    with pytest.raises(ValueError):
        InferenceConfig(reference="mean")


class TestOracle:
    def test_boxes_follow_ground_truth(self, bundles, case):
        x, y = case
        cfg = InferenceConfig(T=2, thr=1.0, margin=1)
        _, trace = segment_with_oracle_boxes(bundles, x, y, cfg)
        assert trace.oracle
        ax = AXES["coronal"]
        for t in (1, 2):
            for i, box in enumerate(trace.boxes[t]["coronal"]):
                sl = np.take(y.data, i, axis=ax)
                assert box == crop_box(sl, 1, TINY_ARCH.min_extent).as_tuple()

    def test_empty_slice_whole_image(self, bundles, case):
        x, y = case
        _, trace = segment_with_oracle_boxes(bundles, x, y, InferenceConfig(T=1))
        assert trace.boxes[1]["axial"][0] == (0, 0, 11, 11)
        assert 0 in trace.fallback_slices

    def test_plain_trace_not_oracle(self, bundles, case):
        assert not segment_volume(bundles, case[0], InferenceConfig(T=1))[1].oracle


def test_inter_iteration_dsc_matches_dsc():
    r = np.random.default_rng(3)
    assert inter_iteration_dsc(np.ones((3, 3, 3)), np.ones((3, 3, 3))) == 1.0
    a = np.zeros((3, 3, 3))
    b = a.copy()
    a[0, 0, 0] = b[1, 1, 1] = 1
    assert inter_iteration_dsc(a, b) == 0.0
    for _ in range(100):
        a, b = r.random((6, 7, 8)) < r.random(), r.random((6, 7, 8)) < r.random()
        assert inter_iteration_dsc(a, b) == dsc(a, b)


def test_trace_json(bundles, case):
    _, trace = segment_volume(bundles, case[0], InferenceConfig(T=2, thr=1.0))
    js = trace.to_json()
    assert set(js) >= {"iterations", "d", "termination", "voxel_counts"}
    assert len(js["voxel_counts"]) == js["iterations"] + 1
