"""Iterative three-view testing: coarse pass, then saliency-weighted fine passes until stable."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .model import VIEWPOINTS, ModelBundle, predict_array, saliency_array
from .recurrent import CropBox, crop_box
from .volume import AXES, LabelMask, Volume, all_stacks, dsc, fuse_and_binarize


@dataclass
class InferenceConfig:
    T: int = 10
    thr: float = 0.99
    margin: int = 20
    oracle_boxes: bool = False
    # "view": each view crops and weights by its own previous map; "fused": by the fused volume
    reference: str = "view"
    chunk: int = 16

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.thr <= 1:
            raise ValueError("thr must lie in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.reference not in ("view", "fused"):
            raise ValueError("reference must be 'view' or 'fused'")


@dataclass
class IterationTrace:
    """Per-iteration fused masks, crop boxes and inter-iteration DSC.

    ``masks[0]`` is the coarse result; ``d[t-1]`` is DSC(Z^(t-1), Z^(t)).
    ``iterations`` counts fine iterations only.
    """

    masks: list[np.ndarray] = field(default_factory=list)
    probs: list[dict[str, np.ndarray]] = field(default_factory=list)
    boxes: list[dict[str, list[tuple[int, int, int, int]]]] = field(default_factory=list)
    d: list[float] = field(default_factory=list)
    termination: str = ""
    oracle: bool = False
    empty_coarse: bool = False
    fallback_slices: list[int] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.masks) - 1

    @property
    def voxel_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "d": list(self.d),
            "termination": self.termination,
            "voxel_counts": self.voxel_counts,
            "oracle": self.oracle,
            "empty_coarse": self.empty_coarse,
        }


def _vol_array(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, LabelMask)) else np.asarray(x)


def coarse_probs(bundle: ModelBundle, vol: np.ndarray, view: str, chunk: int = 16) -> np.ndarray:
    """Coarse probability volume for one view."""
    ax = AXES[view]
    stacks = all_stacks(vol, ax)
    p = predict_array(bundle.coarse, stacks, chunk)[:, 0]
    return np.moveaxis(p, 0, ax)


def fine_probs(bundle: ModelBundle, vol: np.ndarray, view: str, reference: np.ndarray, margin: int,
               box_source: np.ndarray | None = None, chunk: int = 16):
    """One fine iteration for one view.

    ``reference`` is the previous probability volume fed to the saliency
    transform and, unless ``box_source`` is given, used for cropping.
    Returns the new probability volume (zero outside each crop) and the boxes.
    """
    ax = AXES[view]
    stacks = all_stacks(vol, ax)  # (n, 3, h, w)
    ref = np.moveaxis(reference, ax, 0)[:, None]  # (n, 1, h, w)
    if bundle.saliency is not None:
        stacks = stacks * saliency_array(bundle.saliency, ref)
    boxsrc = ref[:, 0] if box_source is None else np.moveaxis(box_source, ax, 0)
    min_size = bundle.fine.arch.min_extent
    boxes = [crop_box(boxsrc[i], margin, min_size) for i in range(len(stacks))]

    out = np.zeros(ref.shape[:1] + ref.shape[2:])
    by_shape: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, b in enumerate(boxes):
        by_shape[b.shape].append(i)
    for shape in sorted(by_shape):
        idx = by_shape[shape]
        batch = np.stack([boxes[i].window(stacks[i]) for i in idx])
        pred = predict_array(bundle.fine, batch, chunk)[:, 0]
        for j, i in enumerate(idx):
            b = boxes[i]
            out[i, b.r0:b.r1 + 1, b.c0:b.c1 + 1] = pred[j]
    return np.moveaxis(out, 0, ax), boxes


def _run(bundles: dict[str, ModelBundle], x, cfg: InferenceConfig, y=None, keep_probs: bool = False):
    missing = [v for v in VIEWPOINTS if v not in bundles]
    if missing:
        raise ValueError(f"missing viewpoint bundles: {missing}")
    vol = _vol_array(x)
    gt = None if y is None else _vol_array(y)
    trace = IterationTrace(oracle=gt is not None)

    probs = {v: coarse_probs(bundles[v], vol, v, cfg.chunk) for v in VIEWPOINTS}
    fused, z = fuse_and_binarize(probs["coronal"], probs["sagittal"], probs["axial"])
    trace.masks.append(z)
    trace.boxes.append({})
    if keep_probs:
        trace.probs.append(dict(probs, fused=fused))
    trace.empty_coarse = not z.any()

    t = 0
    while True:
        t += 1
        new = {}
        boxes = {}
        for v in VIEWPOINTS:
            ref = fused if cfg.reference == "fused" else probs[v]
            new[v], bx = fine_probs(bundles[v], vol, v, ref, cfg.margin, gt, cfg.chunk)
            boxes[v] = [b.as_tuple() for b in bx]
            if t == 1 and v == VIEWPOINTS[0]:
                trace.fallback_slices = [i for i, b in enumerate(bx) if b.fallback]
        probs = new
        fused, z_new = fuse_and_binarize(probs["coronal"], probs["sagittal"], probs["axial"])
        d = dsc(trace.masks[-1], z_new)
        trace.masks.append(z_new)
        trace.boxes.append(boxes)
        if keep_probs:
            trace.probs.append(dict(probs, fused=fused))
        trace.d.append(d)
        if d >= cfg.thr:
            trace.termination = "threshold"
            break
        if t >= cfg.T:
            trace.termination = "max-iterations"
            break
    return LabelMask(trace.masks[-1]), trace


def segment_volume(bundles: dict[str, ModelBundle], x, cfg: InferenceConfig | None = None,
                   keep_probs: bool = False) -> tuple[LabelMask, IterationTrace]:
    """Coarse pass on full slices, then fine iterations until DSC(Z^(t-1), Z^(t)) >= thr or t = T."""
    return _run(bundles, x, cfg or InferenceConfig(), None, keep_probs)


def segment_with_oracle_boxes(bundles: dict[str, ModelBundle], x, y, cfg: InferenceConfig | None = None,
                              keep_probs: bool = False) -> tuple[LabelMask, IterationTrace]:
    """As :func:`segment_volume`, but every crop box comes from the ground-truth slice (plus margin)."""
    return _run(bundles, x, cfg or InferenceConfig(), y, keep_probs)


def inter_iteration_dsc(z_prev, z_cur) -> float:
    return dsc(z_prev, z_cur)
