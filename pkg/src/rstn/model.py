"""Segmentation backbone, saliency transformation, and the weight file format.

The backbone is a small fully-convolutional net described by a list of
layer specs; the saliency module maps a one-channel probability map to a
three-channel weight map in (0, 2) that multiplies the input slice stack.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .tensor import Tensor

WEIGHT_FORMAT = "RSTN-W"
WEIGHT_VERSION = 1
VIEWPOINTS = ("coronal", "sagittal", "axial")


class WeightFileError(ValueError):
    """A weight file is corrupt, truncated, or of an unsupported version."""


@dataclass(frozen=True)
class Architecture:
    """Layer list for a fully-convolutional backbone.

    Each entry is either ``("conv", out_channels)`` or one of ``("down",)``
    / ``("up",)``.  Every conv except the last is followed by ReLU; the last
    must output one channel and is followed by a sigmoid.
    """

    layers: tuple[tuple, ...]
    in_channels: int = 3
    kernel: int = 3

    @property
    def n_down(self) -> int:
        return sum(1 for layer in self.layers if layer[0] == "down")

    @property
    def min_extent(self) -> int:
        return 2 ** (self.n_down + 1)

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes, c = [], self.in_channels
        depth = 0
        for layer in self.layers:
            if layer[0] == "conv":
                shapes.append((layer[1], c, self.kernel, self.kernel))
                c = layer[1]
            elif layer[0] == "down":
                depth += 1
            elif layer[0] == "up":
                depth -= 1
                if depth < 0:
                    raise ValueError("architecture upsamples more often than it downsamples")
            else:
                raise ValueError(f"unknown layer kind {layer[0]!r}")
        if depth != 0:
            raise ValueError("architecture must upsample back to the input resolution")
        if not shapes or shapes[-1][0] != 1:
            raise ValueError("final conv must output exactly one channel")
        return shapes

    def to_json(self) -> dict:
        return {"layers": [list(layer) for layer in self.layers], "in_channels": self.in_channels, "kernel": self.kernel}

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        return cls(tuple(tuple(layer) for layer in d["layers"]), int(d["in_channels"]), int(d["kernel"]))


DEFAULT_ARCH = Architecture(
    (("conv", 16), ("conv", 16), ("down",), ("conv", 32), ("conv", 32), ("up",), ("conv", 16), ("conv", 16), ("conv", 1))
)
TINY_ARCH = Architecture((("conv", 4), ("down",), ("conv", 4), ("up",), ("conv", 1)))


@dataclass
class BackboneParams:
    arch: Architecture
    kernels: list[Tensor]
    biases: list[Tensor]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.arch,
            [Tensor(k.data.copy(), requires_grad=True) for k in self.kernels],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )


@dataclass
class SaliencyParams:
    kernel_size: int
    kernels: list[Tensor]
    biases: list[Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.kernels)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def copy(self) -> "SaliencyParams":
        return SaliencyParams(
            self.kernel_size,
            [Tensor(k.data.copy(), requires_grad=True) for k in self.kernels],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )


@dataclass
class ModelBundle:
    """Coarse net, fine net and saliency transform for one viewpoint.

    ``saliency`` is ``None`` for a stage-wise bundle, whose fine stage sees
    the cropped slice with no weighting.
    """

    viewpoint: str
    coarse: BackboneParams
    fine: BackboneParams
    saliency: SaliencyParams | None = None
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        params = self.coarse.parameters() + self.fine.parameters()
        if self.saliency is not None:
            params += self.saliency.parameters()
        return params

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for stage, net in (("coarse", self.coarse), ("fine", self.fine)):
            for i, (k, b) in enumerate(zip(net.kernels, net.biases)):
                out += [(f"{stage}.{i}.kernel", k), (f"{stage}.{i}.bias", b)]
        if self.saliency is not None:
            for i, (k, b) in enumerate(zip(self.saliency.kernels, self.saliency.biases)):
                out += [(f"saliency.{i}.kernel", k), (f"saliency.{i}.bias", b)]
        return out

    def copy(self) -> "ModelBundle":
        sal = None if self.saliency is None else self.saliency.copy()
        return ModelBundle(self.viewpoint, self.coarse.copy(), self.fine.copy(), sal, dict(self.meta))


# -- initialisation -------------------------------------------------------

def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_backbone(arch: Architecture, rng: np.random.Generator) -> BackboneParams:
    """He-scaled normal kernels, zero biases."""
    kernels, biases = [], []
    for shape in arch.conv_shapes():
        kernels.append(Tensor(_he(rng, shape), requires_grad=True))
        biases.append(Tensor(np.zeros(shape[0]), requires_grad=True))
    return BackboneParams(arch, kernels, biases)


def init_saliency(kernel_size: int, n_layers: int, rng: np.random.Generator, out_channels: int = 3) -> SaliencyParams:
    """Saliency transform whose last layer starts at zero, i.e. at the identity weighting.

    In the two-layer variant the hidden layer is He-initialised so the zero
    output layer still receives gradient.
    """
    if kernel_size not in (1, 3, 5, 7) or n_layers not in (1, 2):
        raise ValueError(f"unsupported saliency config k={kernel_size}, layers={n_layers}")
    kernels, biases = [], []
    if n_layers == 2:
        shape = (out_channels, 1, kernel_size, kernel_size)
        kernels.append(Tensor(_he(rng, shape), requires_grad=True))
        biases.append(Tensor(np.zeros(out_channels), requires_grad=True))
    cin = 1 if n_layers == 1 else out_channels
    kernels.append(Tensor(np.zeros((out_channels, cin, kernel_size, kernel_size)), requires_grad=True))
    biases.append(Tensor(np.zeros(out_channels), requires_grad=True))
    return SaliencyParams(kernel_size, kernels, biases)


def init_bundle(
    viewpoint: str,
    seed: int | np.random.Generator,
    arch: Architecture = DEFAULT_ARCH,
    saliency_kernel: int | None = 3,
    saliency_layers: int = 2,
) -> ModelBundle:
    """Fresh bundle; pass ``saliency_kernel=None`` for a stage-wise bundle."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    coarse = init_backbone(arch, rng)
    fine = init_backbone(arch, rng)
    sal = None if saliency_kernel is None else init_saliency(saliency_kernel, saliency_layers, rng)
    return ModelBundle(viewpoint, coarse, fine, sal)


# -- forward passes -------------------------------------------------------

def seg_forward(params: BackboneParams, image: Tensor) -> Tensor:
    """Probability map ``(1, H, W)`` (or ``(N, 1, H, W)``) for a 3-channel input."""
    h, w = image.shape[-2:]
    m = params.arch.min_extent
    if h < m or w < m:
        raise tc.ShapeError(f"input extent {(h, w)} below architecture minimum {m}")
    x = image
    sizes = []
    convs = list(zip(params.kernels, params.biases))
    ci = 0
    for layer in params.arch.layers:
        if layer[0] == "conv":
            k, b = convs[ci]
            ci += 1
            x = tc.conv2d_same(x, k, b)
            x = tc.sigmoid(x) if ci == len(convs) else tc.relu(x)
        elif layer[0] == "down":
            sizes.append(x.shape[-2:])
            x = tc.avg_pool2(x)
        else:
            x = tc.upsample2(x, sizes.pop())
    return x


def saliency_forward(params: SaliencyParams, prob: Tensor) -> Tensor:
    """Weight map ``2 * sigmoid(conv(prob))`` with three channels and values in (0, 2)."""
    x = prob
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        x = tc.conv2d_same(x, k, b)
        if i < len(params.kernels) - 1:
            x = tc.relu(x)
    return tc.scale(tc.sigmoid(x), 2.0)


def predict_array(params: BackboneParams, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Graph-free batched forward of ``seg_forward`` over ``(N, 3, H, W)``."""
    frozen = BackboneParams(params.arch, [Tensor(k.data) for k in params.kernels], [Tensor(b.data) for b in params.biases])
    outs = [seg_forward(frozen, Tensor(images[i:i + chunk])).data for i in range(0, len(images), chunk)]
    return np.concatenate(outs, axis=0)


def saliency_array(params: SaliencyParams, probs: np.ndarray) -> np.ndarray:
    frozen = SaliencyParams(params.kernel_size, [Tensor(k.data) for k in params.kernels], [Tensor(b.data) for b in params.biases])
    return saliency_forward(frozen, Tensor(probs)).data


# -- RSTN-W v1 ------------------------------------------------------------

def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 payload)."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in bundle.named_tensors():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": WEIGHT_FORMAT,
        "version": WEIGHT_VERSION,
        "viewpoint": bundle.viewpoint,
        "architecture": bundle.coarse.arch.to_json(),
        "saliency": None
        if bundle.saliency is None
        else {"kernel_size": bundle.saliency.kernel_size, "layers": bundle.saliency.n_layers},
        "dtype": "f64",
        "byte_order": "little",
        "data_file": path.name + ".bin",
        "tensors": entries,
        "meta": bundle.meta,
    }
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".json")


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != WEIGHT_FORMAT or manifest.get("version") != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: expected {WEIGHT_FORMAT} v{WEIGHT_VERSION}, got "
                              f"{manifest.get('format')} v{manifest.get('version')}")
    payload = (path.parent / manifest["data_file"]).read_bytes()
    arch = Architecture.from_json(manifest["architecture"])
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) * 8
        if e["nbytes"] != n or e["offset"] + n > len(payload):
            raise WeightFileError(f"{path}: tensor {e['name']} truncated or mis-sized")
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    if sum(e["nbytes"] for e in manifest["tensors"]) != len(payload):
        raise WeightFileError(f"{path}: payload size does not match manifest")

    def net(stage):
        n = len(arch.conv_shapes())
        try:
            ks = [tensors[f"{stage}.{i}.kernel"] for i in range(n)]
            bs = [tensors[f"{stage}.{i}.bias"] for i in range(n)]
        except KeyError as exc:
            raise WeightFileError(f"{path}: missing tensor {exc}") from exc
        for k, shape in zip(ks, arch.conv_shapes()):
            if k.shape != shape:
                raise WeightFileError(f"{path}: {stage} kernel shape {k.shape} != {shape}")
        return BackboneParams(arch, ks, bs)

    sal = None
    if manifest["saliency"] is not None:
        n = manifest["saliency"]["layers"]
        sal = SaliencyParams(
            manifest["saliency"]["kernel_size"],
            [tensors[f"saliency.{i}.kernel"] for i in range(n)],
            [tensors[f"saliency.{i}.bias"] for i in range(n)],
        )
    return ModelBundle(manifest["viewpoint"], net("coarse"), net("fine"), sal, manifest.get("meta", {}))
