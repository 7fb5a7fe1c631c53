"""Unrolled recurrent saliency training.

One training step on a slice stack ``X`` with ground truth ``Y``::

    P0 = f(X; coarse)
    for t in 1..T:
        I_t = X * g(P_{t-1}; eta)          # on the full grid
        box = Crop(reference)              # Y in phase 1, P_{t-1} in phase 2
        P_t = f(I_t[box]; fine)            # embedded back with zeros outside
    loss = sum_t lambda_t * (1 - softDSC(Y[box_t], P_t))

and everything is differentiated jointly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .model import VIEWPOINTS, ModelBundle, init_bundle, saliency_forward, seg_forward, DEFAULT_ARCH, Architecture
from .tensor import SGD, Tensor
from .volume import AXES, slice_stack

logger = logging.getLogger(__name__)

SMOOTH = 1e-6


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""


@dataclass(frozen=True)
class CropBox:
    """Inclusive rectangle ``[r0..r1] x [c0..c1]``; ``fallback`` marks the empty-reference case."""

    r0: int
    c0: int
    r1: int
    c1: int
    fallback: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return (self.r1 - self.r0 + 1, self.c1 - self.c0 + 1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.r0, self.c0, self.r1, self.c1)

    def window(self, arr: np.ndarray) -> np.ndarray:
        return arr[..., self.r0:self.r1 + 1, self.c0:self.c1 + 1]


def crop_box(reference: np.ndarray, margin: int = 20, min_size: int = 1) -> CropBox:
    """Minimal rectangle covering ``reference >= 0.5``, grown by ``margin`` and clamped.

    With no activated pixel the whole image is returned.  Boxes smaller than
    ``min_size`` are widened symmetrically (within bounds) to that size.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    ref = np.asarray(reference)
    ref = ref.reshape(ref.shape[-2:])
    h, w = ref.shape
    rows = np.flatnonzero((ref >= 0.5).any(axis=1))
    if rows.size == 0:
        return CropBox(0, 0, h - 1, w - 1, fallback=True)
    cols = np.flatnonzero((ref >= 0.5).any(axis=0))
    r0, r1 = max(rows[0] - margin, 0), min(rows[-1] + margin, h - 1)
    c0, c1 = max(cols[0] - margin, 0), min(cols[-1] + margin, w - 1)
    r0, r1 = _widen(r0, r1, min_size, h)
    c0, c1 = _widen(c0, c1, min_size, w)
    return CropBox(int(r0), int(c0), int(r1), int(c1))


def _widen(lo: int, hi: int, size: int, n: int) -> tuple[int, int]:
    size = min(size, n)
    while hi - lo + 1 < size:
        if lo > 0:
            lo -= 1
        if hi - lo + 1 < size and hi < n - 1:
            hi += 1
    return lo, hi


def crop(image: Tensor, reference: np.ndarray, margin: int = 20, min_size: int = 1) -> tuple[Tensor, CropBox]:
    box = crop_box(reference, margin, min_size)
    return tc.crop2d(image, *box.as_tuple()), box


def soft_dsc_loss(y, p: Tensor, smooth: float = SMOOTH) -> Tensor:
    """``1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s)``."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape != p.shape:
        raise tc.ShapeError(f"soft_dsc_loss: shapes differ, {y.shape} vs {p.shape}")
    num = tc.scale(tc.tsum(tc.mul(y, p)), 2.0) + smooth
    den = tc.tsum(p) + (float(y.data.sum()) + smooth)
    return 1.0 - num / den


def loss_weights(T: int) -> tuple[float, ...]:
    """``lambda_0 = 1/(2T+1)``, ``lambda_t = 2/(2T+1)`` for ``t >= 1``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return (1.0 / (2 * T + 1),) + (2.0 / (2 * T + 1),) * T


@dataclass
class TrainConfig:
    T: int = 1
    phase1_steps: int = 3000
    phase2_steps: int = 1500
    lr1: float = 0.01
    lr2: float = 0.001
    momentum: float = 0.9
    clip_norm: float | None = 0.1
    margin: int = 20
    saliency_kernel: int = 3
    saliency_layers: int = 2
    arch: Architecture = DEFAULT_ARCH
    # restrict sampling to slices whose centre slice contains the target
    foreground_only: bool = False

    def __post_init__(self):
        if not 1 <= self.T <= 5:
            raise ValueError("training T must lie in [1, 5]")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.phase2_steps > 0 and not self.lr2 < self.lr1:
            raise ValueError("phase-2 learning rate must be smaller than phase-1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if isinstance(self.arch, dict):
            self.arch = Architecture.from_json(self.arch)

    @property
    def weights(self) -> tuple[float, ...]:
        return loss_weights(self.T)

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_json()
        return d


@dataclass
class UnrollState:
    probs: list[np.ndarray] = field(default_factory=list)  # full-grid P^(t)
    inputs: list[np.ndarray] = field(default_factory=list)  # network input at iteration t
    boxes: list[CropBox | None] = field(default_factory=list)
    terms: list[float] = field(default_factory=list)  # lambda_t * L_t
    total: float = float("nan")


def unrolled_loss(bundle: ModelBundle, stack: np.ndarray, y: np.ndarray, cfg: TrainConfig, phase: int):
    """Build the unrolled graph and return ``(total_loss_tensor, UnrollState)``."""
    if phase not in (1, 2):
        raise ValueError("phase must be 1 (ground-truth reference) or 2 (predicted reference)")
    x = Tensor(stack)
    h, w = stack.shape[-2:]
    y2 = np.asarray(y, dtype=np.float64).reshape(1, h, w)
    lam = cfg.weights
    state = UnrollState()

    p = seg_forward(bundle.coarse, x)
    term = tc.scale(soft_dsc_loss(y2, p), lam[0])
    total = term
    state.probs.append(p.data[0])
    state.inputs.append(stack)
    state.boxes.append(None)
    state.terms.append(term.item())

    for t in range(1, cfg.T + 1):
        if bundle.saliency is None:
            img = x
        else:
            img = tc.mul(x, saliency_forward(bundle.saliency, p))
        reference = y2 if phase == 1 else p.data
        img_c, box = crop(img, reference, cfg.margin, bundle.fine.arch.min_extent)
        p_c = seg_forward(bundle.fine, img_c)
        term = tc.scale(soft_dsc_loss(box.window(y2), p_c), lam[t])
        total = total + term
        p = tc.embed2d(p_c, (h, w), box.r0, box.c0)
        state.probs.append(p.data[0])
        state.inputs.append(img_c.data)
        state.boxes.append(box)
        state.terms.append(term.item())
    state.total = total.item()
    return total, state


def unrolled_step(bundle: ModelBundle, stack: np.ndarray, y: np.ndarray, cfg: TrainConfig, phase: int) -> UnrollState:
    """Forward and backward through all iterations; gradients land on every bundle parameter."""
    for prm in bundle.parameters():
        prm.grad = None
    total, state = unrolled_loss(bundle, stack, y, cfg, phase)
    if not math.isfinite(state.total):
        raise TrainingDiverged(f"non-finite loss {state.total}")
    total.backward()
    return state


# -- training loops -------------------------------------------------------

def foreground_slices(masks, axis) -> list[tuple[int, int]]:
    """``(case, slice)`` pairs whose centre slice along ``axis`` holds target voxels."""
    ax = AXES[axis] if isinstance(axis, str) else axis
    pairs = []
    for ci, m in enumerate(masks):
        d = m.data if hasattr(m, "data") else m
        other = tuple(a for a in range(3) if a != ax)
        present = np.flatnonzero(d.any(axis=other))
        pairs.extend((ci, int(s)) for s in present)
    return pairs


def all_slices(masks, axis) -> list[tuple[int, int]]:
    ax = AXES[axis] if isinstance(axis, str) else axis
    return [(ci, s) for ci, m in enumerate(masks) for s in range(m.shape[ax])]


def sample_schedule(masks, axis, n_steps: int, seed: int, foreground_only: bool = True) -> np.ndarray:
    """Deterministic ``(n_steps, 2)`` array of ``(case, slice)`` draws."""
    pool = foreground_slices(masks, axis) if foreground_only else all_slices(masks, axis)
    if not pool:
        raise ValueError("no training slices available")
    rng = np.random.Generator(np.random.Philox(seed))
    idx = rng.integers(0, len(pool), n_steps)
    return np.asarray(pool, dtype=np.int64)[idx]


def view_seed(seed: int, view: str, salt: int = 0) -> int:
    return (int(seed) * 1_000_003 + VIEWPOINTS.index(view) * 7919 + salt) % (2**63)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def losses(self, viewpoint: str | None = None, phase: int | None = None, key: str = "total") -> np.ndarray:
        return np.array(
            [r[key] for r in self.records
             if (viewpoint is None or r["viewpoint"] == viewpoint) and (phase is None or r["phase"] == phase)]
        )


def train_view(volumes, masks, view: str, cfg: TrainConfig, seed: int, log: TrainLog | None = None,
               bundle: ModelBundle | None = None) -> ModelBundle:
    """Two-phase joint training of one viewpoint's bundle."""
    if not volumes:
        raise ValueError("empty training corpus")
    if bundle is None:
        bundle = init_bundle(view, view_seed(seed, view), cfg.arch, cfg.saliency_kernel, cfg.saliency_layers)
    n_steps = cfg.phase1_steps + cfg.phase2_steps
    schedule = sample_schedule(masks, view, n_steps, view_seed(seed, view, 1), cfg.foreground_only)
    groups = [bundle.coarse.parameters(), bundle.fine.parameters()]
    if bundle.saliency is not None:
        groups.append(bundle.saliency.parameters())
    opt = SGD(lr=cfg.lr1, momentum=cfg.momentum, clip_norm=cfg.clip_norm)
    vols = [v.data for v in volumes]
    labs = [m.data for m in masks]
    ax = AXES[view]
    for step, (ci, si) in enumerate(schedule):
        phase = 1 if step < cfg.phase1_steps else 2
        opt.lr = cfg.lr1 if phase == 1 else cfg.lr2
        stack = slice_stack(vols[ci], ax, int(si))
        y = np.take(labs[ci], int(si), axis=ax)
        try:
            state = unrolled_step(bundle, stack, y, cfg, phase)
        except TrainingDiverged:
            logger.error("training diverged at step %d (%s)", step, view)
            raise
        norms = []
        for group in groups:
            opt.step(group)
            norms.append(opt.last_norm)
        if log is not None:
            log.add(step=step, phase=phase, viewpoint=view, case=int(ci), slice=int(si),
                    terms=state.terms, total=state.total, grad_norm=norms)
    bundle.meta.update({"method": "rstn", "seed": int(seed), "steps": n_steps})
    return bundle


def train(volumes, masks, cfg: TrainConfig, seed: int, log: TrainLog | None = None) -> dict[str, ModelBundle]:
    """One bundle per viewpoint, trained in the fixed order coronal, sagittal, axial."""
    return {v: train_view(volumes, masks, v, cfg, seed, log) for v in VIEWPOINTS}
