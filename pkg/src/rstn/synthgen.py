"""Seeded phantom volumes: one small irregular target inside a cluttered body.

All randomness comes from numpy's Philox 4x64 counter-based generator
seeded with the case seed, so a corpus is a pure function of its spec.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import LabelMask, Volume, save_mask, save_volume


class InfeasibleSpecError(ValueError):
    """The requested target cannot be realised inside the given extents."""


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (64, 64, 64)
    target_fraction: tuple[float, float] = (0.008, 0.015)
    target_lobes: tuple[int, int] = (2, 4)
    clutter_count: tuple[int, int] = (8, 14)
    clutter_axes: tuple[float, float] = (2.0, 6.0)
    noise_sigma: float = 0.05
    target_band: tuple[float, float] = (0.55, 0.65)
    clutter_band: tuple[float, float] = (0.45, 0.80)
    background_band: tuple[float, float] = (0.25, 0.35)
    air: float = 0.02
    # target centre jitter, as a fraction of each extent
    position_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.target_fraction
        if not (0 < lo <= hi <= 0.05):
            raise ValueError(f"target_fraction {self.target_fraction} must lie within (0, 0.05]")
        if len(self.extents) != 3 or min(self.extents) < 32:
            raise ValueError(f"extents must be three values >= 32, got {self.extents}")
        if not (1 <= self.target_lobes[0] <= self.target_lobes[1]):
            raise ValueError("target_lobes must be an increasing pair >= 1")
        if self.clutter_count[0] < 0 or self.clutter_count[0] > self.clutter_count[1]:
            raise ValueError("clutter_count must be an increasing non-negative pair")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("extents", "target_fraction", "target_lobes", "clutter_count", "clutter_axes",
                    "target_band", "clutter_band", "background_band"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _rotation(rng: np.random.Generator) -> np.ndarray:
    # QR of a Gaussian matrix, sign-fixed, gives a uniform rotation
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def ellipsoid_mask(shape, center, semi_axes, rotation: np.ndarray | None = None) -> np.ndarray:
    """Voxels whose centre satisfies ``sum((R^T (x - c))_i / a_i)^2 <= 1``."""
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    d = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    if rotation is not None:
        d = d @ rotation
    q = sum((d[..., i] / semi_axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _ellipsoid_in_box(shape, center, semi_axes, rotation) -> tuple[tuple[slice, ...], np.ndarray]:
    """Same test as :func:`ellipsoid_mask`, evaluated on the bounding box only."""
    r = float(max(semi_axes)) + 1.0
    lo = [max(0, int(np.floor(c - r))) for c in center]
    hi = [min(n, int(np.ceil(c + r)) + 1) for c, n in zip(center, shape)]
    if any(h <= l for l, h in zip(lo, hi)):
        return tuple(slice(0, 0) for _ in shape), np.zeros((0, 0, 0), bool)
    sub = tuple(h - l for l, h in zip(lo, hi))
    local = ellipsoid_mask(sub, [c - l for c, l in zip(center, lo)], semi_axes, rotation)
    return tuple(slice(l, h) for l, h in zip(lo, hi)), local


def _paint(canvas: np.ndarray, value, center, axes, rot) -> np.ndarray:
    sl, local = _ellipsoid_in_box(canvas.shape, center, axes, rot)
    if local.size:
        region = canvas[sl]
        region[local] = value
    return canvas


def _target_mask(shape, lobes, scale: float) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for center, offset, axes, rot in lobes:
        _paint(mask, True, center + scale * offset, scale * axes, rot)
    return mask


def generate(spec: PhantomSpec) -> tuple[Volume, LabelMask]:
    """One phantom case; bit-identical for identical specs."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    shape = tuple(int(e) for e in spec.extents)
    ext = np.array(shape, dtype=np.float64)
    n_vox = float(np.prod(ext))

    vol = np.full(shape, spec.air)
    body_axes = ext * rng.uniform(0.42, 0.48, 3)
    _paint(vol, rng.uniform(*spec.background_band), (ext - 1) / 2, body_axes, None)

    n_clutter = int(rng.integers(spec.clutter_count[0], spec.clutter_count[1] + 1))
    for _ in range(n_clutter):
        center = (ext - 1) / 2 + rng.uniform(-0.35, 0.35, 3) * ext
        axes = rng.uniform(*spec.clutter_axes, 3)
        _paint(vol, rng.uniform(*spec.clutter_band), center, axes, _rotation(rng))

    target_center = (ext - 1) / 2 + rng.normal(0.0, spec.position_jitter, 3) * ext
    n_lobes = int(rng.integers(spec.target_lobes[0], spec.target_lobes[1] + 1))
    lobes = []
    for _ in range(n_lobes):
        offset = np.clip(rng.normal(0.0, 0.45, 3), -0.9, 0.9)
        axes = rng.uniform(0.6, 1.4, 3)
        lobes.append((target_center, offset, axes, _rotation(rng)))

    lo_frac, hi_frac = spec.target_fraction
    want = rng.uniform(lo_frac, hi_frac) * n_vox
    # voxel count grows monotonically with the homothetic scale
    s_lo, s_hi = 0.0, float(min(ext)) / 2
    if _target_mask(shape, lobes, s_hi).sum() < lo_frac * n_vox:
        raise InfeasibleSpecError("target cannot reach the requested fraction inside the extents")
    mask = None
    for _ in range(60):
        s = 0.5 * (s_lo + s_hi)
        m = _target_mask(shape, lobes, s)
        c = m.sum()
        if lo_frac * n_vox <= c <= hi_frac * n_vox and abs(c - want) <= 0.02 * want:
            mask = m
            break
        if c < want:
            s_lo = s
        else:
            s_hi = s
    if mask is None:
        m = _target_mask(shape, lobes, 0.5 * (s_lo + s_hi))
        if not (lo_frac * n_vox <= m.sum() <= hi_frac * n_vox):
            raise InfeasibleSpecError("could not hit the requested target fraction")
        mask = m

    vol[mask] = rng.uniform(*spec.target_band)
    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0.0, spec.noise_sigma, shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Volume(vol), LabelMask(mask.astype(np.uint8))


@dataclass
class Corpus:
    """Ordered phantom cases with their ids and seeds."""

    spec: PhantomSpec
    seed_base: int
    volumes: list[Volume] = field(default_factory=list)
    masks: list[LabelMask] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [f"case{self.seed_base + i:05d}" for i in range(len(self.volumes))]

    @property
    def seeds(self) -> list[int]:
        return [self.seed_base + i for i in range(len(self.volumes))]

    def __len__(self) -> int:
        return len(self.volumes)

    def subset(self, indices) -> tuple[list[Volume], list[LabelMask]]:
        return [self.volumes[i] for i in indices], [self.masks[i] for i in indices]


def generate_corpus(spec: PhantomSpec, n: int, seed_base: int) -> Corpus:
    """``n`` cases, case ``i`` generated with seed ``seed_base + i``."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    corpus = Corpus(spec, seed_base)
    for i in range(n):
        v, m = generate(replace(spec, seed=seed_base + i))
        corpus.volumes.append(v)
        corpus.masks.append(m)
    return corpus


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> Path:
    """Write every case as RVOL v1 plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for cid, seed, v, m in zip(corpus.ids, corpus.seeds, corpus.volumes, corpus.masks):
        vp = save_volume(v, out / f"{cid}_image")
        mp = save_mask(m, out / f"{cid}_label")
        cases.append({"id": cid, "seed": seed, "image": vp.name, "label": mp.name})
    manifest = {"spec": corpus.spec.to_json(), "seed_base": corpus.seed_base, "cases": cases}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_corpus(manifest_path: str | os.PathLike) -> Corpus:
    """Load a corpus written by :func:`write_corpus`; all files are checked before loading."""
    from .volume import load_rvol

    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    missing = [c[k] for c in manifest["cases"] for k in ("image", "label") if not (path.parent / c[k]).exists()]
    if missing:
        raise FileNotFoundError(f"corpus files missing: {missing[:5]}")
    corpus = Corpus(PhantomSpec.from_json(manifest["spec"]), int(manifest["seed_base"]))
    for c in manifest["cases"]:
        corpus.volumes.append(load_rvol(path.parent / c["image"]))
        corpus.masks.append(load_rvol(path.parent / c["label"]))
    return corpus
