"""Volumes, masks, three-axis slicing, fusion, DSC, and the RVOL v1 container."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AXES = {"coronal": 0, "sagittal": 1, "axial": 2}
RVOL_FORMAT = "RVOL"
RVOL_VERSION = 1


class VolumeFormatError(ValueError):
    """An RVOL header or payload is malformed."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Intensity grid of shape ``(W, H, L)`` with values in [0, 1], stored as float32."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or min(d.shape) < 3:
            raise ValueError(f"volume must be 3D with every extent >= 3, got {d.shape}")
        if not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > 1:
            raise ValueError("volume intensities must be finite and within [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_raw(cls, raw: np.ndarray, window: tuple[float, float], spacing=(1.0, 1.0, 1.0)) -> "Volume":
        """Map ``raw`` affinely so ``window`` becomes [0, 1], then clamp."""
        lo, hi = window
        if not hi > lo:
            raise ValueError("window must satisfy max > min")
        scaled = (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo)
        return cls(np.clip(scaled, 0.0, 1.0).astype(np.float32), spacing)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary grid aligned with a :class:`Volume`."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {d.shape}")
        if d.dtype != np.uint8:
            if not np.all((d == 0) | (d == 1)):
                raise ValueError("mask values must be 0 or 1")
            d = d.astype(np.uint8)
        elif d.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


def _axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return axis


def slice_plane(arr: np.ndarray, axis, index: int) -> np.ndarray:
    return np.take(arr, index, axis=_axis(axis))


def slice_stack(v: Volume | np.ndarray, axis, index: int) -> np.ndarray:
    """Three neighbouring slices ``(index-1, index, index+1)`` as a ``(3, h, w)`` image.

    Border indices replicate the edge slice.
    """
    arr = v.data if isinstance(v, Volume) else v
    ax = _axis(axis)
    n = arr.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n})")
    idx = [max(index - 1, 0), index, min(index + 1, n - 1)]
    return np.moveaxis(np.take(arr, idx, axis=ax), ax, 0).astype(np.float64)


def all_stacks(v: Volume | np.ndarray, axis) -> np.ndarray:
    """Every slice stack along ``axis`` as ``(n, 3, h, w)``."""
    arr = v.data if isinstance(v, Volume) else v
    ax = _axis(axis)
    moved = np.moveaxis(arr, ax, 0).astype(np.float64)
    prev = np.concatenate([moved[:1], moved[:-1]])
    nxt = np.concatenate([moved[1:], moved[-1:]])
    return np.stack([prev, moved, nxt], axis=1)


def reassemble(maps, axis, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Stack per-slice 2D maps back into a volume; map ``i`` becomes slice ``i`` along ``axis``.

    ``maps`` is a sequence (or dict keyed by index) of ``(h, w)`` or ``(1, h, w)`` arrays.
    """
    ax = _axis(axis)
    if isinstance(maps, dict):
        n = (shape[ax] if shape is not None else max(maps) + 1) if maps else 0
        missing = [i for i in range(n) if i not in maps]
        if missing or not maps:
            raise ValueError(f"reassemble: missing slice indices {missing[:5]}")
        maps = [maps[i] for i in range(n)]
    planes = [np.asarray(m, dtype=np.float64).reshape(np.shape(m)[-2:]) for m in maps]
    if not planes:
        raise ValueError("reassemble: no maps given")
    if any(p.shape != planes[0].shape for p in planes):
        raise ValueError("reassemble: inconsistent slice shapes")
    out = np.moveaxis(np.stack(planes, axis=0), 0, ax)
    if shape is not None and out.shape != tuple(shape):
        raise ValueError(f"reassemble: produced {out.shape}, expected {tuple(shape)}")
    return out


def dsc(a, b) -> float:
    """Dice-Sørensen coefficient ``2|A∩B| / (|A|+|B|)``; two empty masks score 1."""
    a = a.data if isinstance(a, LabelMask) else np.asarray(a)
    b = b.data if isinstance(b, LabelMask) else np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dsc: extents differ, {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def fuse_and_binarize(pc: np.ndarray, ps: np.ndarray, pa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of three probability volumes and its ``>= 0.5`` mask."""
    pc, ps, pa = (np.asarray(p, dtype=np.float64) for p in (pc, ps, pa))
    if not (pc.shape == ps.shape == pa.shape):
        raise ValueError("fuse_and_binarize: extents differ")
    fused = (pc + ps + pa) / 3.0
    return fused, (fused >= 0.5).astype(np.uint8)


# -- RVOL v1 --------------------------------------------------------------

def _write_rvol(path: Path, arr: np.ndarray, spacing, dtype: str) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    data_file = path.name + ".raw"
    # x-fastest order == Fortran order over (W, H, L)
    payload = np.asarray(arr, dtype="<f4" if dtype == "f32" else "u1").tobytes(order="F")
    header = {
        "format": RVOL_FORMAT,
        "version": RVOL_VERSION,
        "extents": list(arr.shape),
        "spacing": list(spacing),
        "dtype": dtype,
        "byte-order": "little",
        "data-file": data_file,
    }
    (path.parent / data_file).write_bytes(payload)
    out = path.with_suffix(".json")
    out.write_text(json.dumps(header, indent=1))
    return out


def save_volume(v: Volume, path: str | os.PathLike) -> Path:
    return _write_rvol(Path(path), v.data, v.spacing, "f32")


def save_mask(m: LabelMask, path: str | os.PathLike) -> Path:
    return _write_rvol(Path(path), m.data, m.spacing, "u8")


def load_rvol(path: str | os.PathLike) -> Volume | LabelMask:
    """Read an RVOL v1 header and payload; dtype ``f32`` yields a Volume, ``u8`` a LabelMask."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format", RVOL_FORMAT) != RVOL_FORMAT or header.get("version", RVOL_VERSION) != RVOL_VERSION:
        raise VolumeFormatError(f"{path}: not an RVOL v1 header")
    if header.get("byte-order") != "little":
        raise VolumeFormatError(f"{path}: unsupported byte order {header.get('byte-order')!r}")
    dtype = {"f32": "<f4", "u8": "u1"}.get(header.get("dtype"))
    if dtype is None:
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    extents = tuple(int(e) for e in header["extents"])
    raw = (path.parent / header["data-file"]).read_bytes()
    expected = int(np.prod(extents)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(extents, order="F")
    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    if header["dtype"] == "f32":
        return Volume(np.ascontiguousarray(arr, dtype=np.float32), spacing)
    return LabelMask(np.ascontiguousarray(arr, dtype=np.uint8), spacing)
