"""scikit-learn style wrappers around training and iterative inference.

``X`` is a sequence of 3-D intensity arrays (or :class:`Volume`), ``y`` a
sequence of matching binary masks.  ``predict`` returns a list of uint8
masks; ``score`` is the mean per-volume DSC.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .baseline import stagewise_infer, stagewise_train
from .inference import InferenceConfig, segment_volume
from .model import DEFAULT_ARCH, TINY_ARCH
from .recurrent import TrainConfig, TrainLog, train
from .volume import LabelMask, Volume, dsc

ARCHS = {"default": DEFAULT_ARCH, "tiny": TINY_ARCH}


def check_volumes(X) -> list[Volume]:
    """Coerce ``X`` to a non-empty list of :class:`Volume`."""
    if isinstance(X, (Volume, np.ndarray)) and np.ndim(getattr(X, "data", X)) == 3:
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError("X must be a sequence of 3-D volumes") from None
    if not items:
        raise ValueError("X is empty")
    out = []
    for i, v in enumerate(items):
        if isinstance(v, Volume):
            out.append(v)
            continue
        a = np.asarray(v)
        if a.ndim != 3:
            raise ValueError(f"X[{i}] has {a.ndim} dimensions, expected 3")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"X[{i}] contains non-finite values")
        out.append(Volume(a.astype(np.float32)))
    return out


def check_masks(y, volumes: list[Volume]) -> list[LabelMask]:
    """Coerce ``y`` to label masks matching ``volumes`` one-to-one in shape."""
    if isinstance(y, (LabelMask, np.ndarray)) and np.ndim(getattr(y, "data", y)) == 3:
        y = [y]
    items = list(y)
    if len(items) != len(volumes):
        raise ValueError(f"{len(items)} masks for {len(volumes)} volumes")
    out = []
    for i, (m, v) in enumerate(zip(items, volumes)):
        m = m if isinstance(m, LabelMask) else LabelMask(np.asarray(m).astype(np.uint8))
        if m.shape != v.shape:
            raise ValueError(f"y[{i}] shape {m.shape} differs from X[{i}] shape {v.shape}")
        out.append(m)
    if not any(m.data.any() for m in out):
        raise ValueError("y holds no foreground voxels")
    return out


class _Segmenter(BaseEstimator):
    _method = "rstn"

    def __init__(self, T=1, phase1_steps=3000, phase2_steps=1500, lr1=0.01, lr2=0.001, margin=20,
                 saliency_kernel=3, saliency_layers=2, arch="default", thr=0.99, max_iter=10, seed=0):
        self.T = T
        self.phase1_steps = phase1_steps
        self.phase2_steps = phase2_steps
        self.lr1 = lr1
        self.lr2 = lr2
        self.margin = margin
        self.saliency_kernel = saliency_kernel
        self.saliency_layers = saliency_layers
        self.arch = arch
        self.thr = thr
        self.max_iter = max_iter
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {sorted(ARCHS)}")
        return TrainConfig(T=self.T, phase1_steps=self.phase1_steps, phase2_steps=self.phase2_steps,
                           lr1=self.lr1, lr2=self.lr2, margin=self.margin, saliency_kernel=self.saliency_kernel,
                           saliency_layers=self.saliency_layers, arch=ARCHS[self.arch])

    def _infer_config(self) -> InferenceConfig:
        return InferenceConfig(T=self.max_iter, thr=self.thr, margin=self.margin)

    def fit(self, X, y):
        volumes = check_volumes(X)
        masks = check_masks(y, volumes)
        cfg = self._train_config()
        self._infer_config()
        fit = train if self._method == "rstn" else stagewise_train
        self.train_log_ = TrainLog()
        self.bundles_ = fit(volumes, masks, cfg, self.seed, self.train_log_)
        self.n_volumes_ = len(volumes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "bundles_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def segment(self, X):
        """Masks and iteration traces for every volume."""
        self._check_fitted()
        cfg = self._infer_config()
        run = segment_volume if self._method == "rstn" else stagewise_infer
        return [run(self.bundles_, v, cfg) for v in check_volumes(X)]

    def predict(self, X) -> list[np.ndarray]:
        return [z.data for z, _ in self.segment(X)]

    def score(self, X, y) -> float:
        volumes = check_volumes(X)
        masks = check_masks(y, volumes)
        return float(np.mean([dsc(z, m) for z, m in zip(self.predict(volumes), masks)]))


class RSTNSegmenter(_Segmenter):
    """Jointly trained coarse/fine networks with a saliency transform between iterations."""

    _method = "rstn"


class StagewiseSegmenter(_Segmenter):
    """Independently trained coarse and fine networks; the fine stage sees only the cropped box.

    ``saliency_kernel`` and ``saliency_layers`` are accepted for a shared
    parameter set but have no effect.
    """

    _method = "stagewise"
