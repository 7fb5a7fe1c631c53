"""Small hand-built bundles and volumes shared by the inference and baseline tests."""

import numpy as np

from rstn.model import TINY_ARCH, VIEWPOINTS, init_bundle
from rstn.volume import LabelMask, Volume


def random_bundles(seed=0, saliency_kernel=3):
    out = {}
    for i, v in enumerate(VIEWPOINTS):
        out[v] = init_bundle(v, seed * 10 + i, TINY_ARCH, saliency_kernel=saliency_kernel)
    return out


def constant_bundle(view, coarse_bias, fine_bias, saliency_kernel=None):
    """Bundle whose nets ignore the image and emit sigmoid(bias) everywhere."""
    b = init_bundle(view, 0, TINY_ARCH, saliency_kernel=saliency_kernel, saliency_layers=1)
    for net, bias in ((b.coarse, coarse_bias), (b.fine, fine_bias)):
        for t in net.kernels + net.biases:
            t.data[...] = 0
        net.biases[-1].data[...] = bias
    return b


def flipping_bundle(view, k=12.0):
    """Fine stage outputs roughly 1 - P^(t-1) on a constant unit image.

    The saliency map is ~0 where P is 0 and ~2 where P is 1; the fine net
    passes channel 0 through two ReLU layers and ends with sigmoid(k - k*x).
    """
    b = constant_bundle(view, 8.0, 0.0, saliency_kernel=1)
    sk, sb = b.saliency.kernels[0], b.saliency.biases[0]
    sk.data[...] = 40.0
    sb.data[...] = -20.0
    f = b.fine
    c = f.kernels[0].shape[-1] // 2
    f.kernels[0].data[0, 0, c, c] = 1.0
    f.kernels[1].data[0, 0, c, c] = 1.0
    f.kernels[2].data[0, 0, c, c] = -k
    f.biases[2].data[...] = k
    return b


def blob_case(seed=0, n=12):
    r = np.random.default_rng(seed)
    m = np.zeros((n, n, n), np.uint8)
    lo = r.integers(2, 5, 3)
    m[lo[0]:lo[0] + 4, lo[1]:lo[1] + 5, lo[2]:lo[2] + 3] = 1
    v = np.clip(0.3 + 0.3 * m + r.normal(0, 0.05, m.shape), 0, 1).astype(np.float32)
    return Volume(v), LabelMask(m)
