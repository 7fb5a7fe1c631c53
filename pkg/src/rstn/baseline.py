"""Stage-wise coarse-to-fine baseline: two independently trained nets, box-only hand-off.

Testing reuses :mod:`rstn.inference` with bundles that carry no saliency
transform, so the two methods differ only in the saliency product and in
joint versus separate training.
"""

from __future__ import annotations

import math

import numpy as np

from .inference import InferenceConfig, segment_volume
from .model import VIEWPOINTS, ModelBundle, init_bundle, seg_forward
from .recurrent import TrainConfig, TrainingDiverged, TrainLog, crop, sample_schedule, soft_dsc_loss, view_seed
from .tensor import SGD, Tensor
from .volume import AXES, dsc, slice_stack


def stagewise_train_view(volumes, masks, view: str, cfg: TrainConfig, seed: int,
                         log: TrainLog | None = None) -> ModelBundle:
    """Coarse net on full slices, fine net on ground-truth crops, each with its own loss.

    Uses the same initial weights, slice schedule, learning rates and step
    budget as :func:`rstn.recurrent.train_view` for the same seed.
    """
    if not volumes:
        raise ValueError("empty training corpus")
    bundle = init_bundle(view, view_seed(seed, view), cfg.arch, cfg.saliency_kernel, cfg.saliency_layers)
    bundle.saliency = None
    n_steps = cfg.phase1_steps + cfg.phase2_steps
    schedule = sample_schedule(masks, view, n_steps, view_seed(seed, view, 1), cfg.foreground_only)
    opt = SGD(lr=cfg.lr1, momentum=cfg.momentum, clip_norm=cfg.clip_norm)
    coarse_p, fine_p = bundle.coarse.parameters(), bundle.fine.parameters()
    ax = AXES[view]
    min_size = bundle.fine.arch.min_extent
    for step, (ci, si) in enumerate(schedule):
        phase = 1 if step < cfg.phase1_steps else 2
        opt.lr = cfg.lr1 if phase == 1 else cfg.lr2
        stack = slice_stack(volumes[ci].data, ax, int(si))
        y = np.take(masks[ci].data, int(si), axis=ax).astype(np.float64)[None]
        x = Tensor(stack)

        for p in coarse_p + fine_p:
            p.grad = None
        lc = soft_dsc_loss(y, seg_forward(bundle.coarse, x))
        xc, box = crop(x, y, cfg.margin, min_size)
        lf = soft_dsc_loss(box.window(y), seg_forward(bundle.fine, xc))
        if not (math.isfinite(lc.item()) and math.isfinite(lf.item())):
            raise TrainingDiverged(f"non-finite stage-wise loss at step {step} ({view})")
        lc.backward()
        lf.backward()
        opt.step(coarse_p)
        nc = opt.last_norm
        opt.step(fine_p)
        if log is not None:
            log.add(step=step, phase=phase, viewpoint=view, case=int(ci), slice=int(si),
                    terms=[lc.item(), lf.item()], total=lc.item() + lf.item(), grad_norm=[nc, opt.last_norm],
                    box=list(box.as_tuple()))
    bundle.meta.update({"method": "stagewise", "seed": int(seed), "steps": n_steps})
    return bundle


def stagewise_train(volumes, masks, cfg: TrainConfig, seed: int, log: TrainLog | None = None) -> dict[str, ModelBundle]:
    return {v: stagewise_train_view(volumes, masks, v, cfg, seed, log) for v in VIEWPOINTS}


def stagewise_infer(bundles: dict[str, ModelBundle], x, cfg: InferenceConfig | None = None, keep_probs: bool = False):
    """Iterative cropping with no saliency weighting."""
    plain = {}
    for v, b in bundles.items():
        plain[v] = b if b.saliency is None else ModelBundle(b.viewpoint, b.coarse, b.fine, None, b.meta)
    return segment_volume(plain, x, cfg, keep_probs)


def combine(coarse_from: dict[str, ModelBundle], fine_from: dict[str, ModelBundle]) -> dict[str, ModelBundle]:
    """Coarse nets of one model with fine nets (and saliency, if any) of another."""
    return {
        v: ModelBundle(v, coarse_from[v].coarse, fine_from[v].fine, fine_from[v].saliency,
                       {"coarse": coarse_from[v].meta.get("method"), "fine": fine_from[v].meta.get("method")})
        for v in VIEWPOINTS
    }


def mix_and_match(stagewise: dict[str, ModelBundle], joint: dict[str, ModelBundle], volumes, masks,
                  cfg: InferenceConfig | None = None) -> dict[str, dict]:
    """Evaluate all four coarse x fine pairings; keys are ``"<coarse>/<fine>"``."""
    fold_s = {b.meta.get("fold") for b in stagewise.values()}
    fold_j = {b.meta.get("fold") for b in joint.values()}
    if fold_s != fold_j:
        raise ValueError(f"bundles come from different folds: {fold_s} vs {fold_j}")
    sources = {"stagewise": stagewise, "joint": joint}
    report = {}
    for cname, cb in sources.items():
        for fname, fb in sources.items():
            bundles = combine(cb, fb)
            scores = [dsc(segment_volume(bundles, v, cfg)[0], m) for v, m in zip(volumes, masks)]
            report[f"{cname}/{fname}"] = {
                "dsc": scores,
                "mean": float(np.mean(scores)),
                "std": float(np.std(scores)),
            }
    return report
