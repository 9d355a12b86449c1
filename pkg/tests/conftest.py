import numpy as np
import pytest

from netrecon.autodiff import Tensor
from netrecon.data import NetworkAtlas, SegmentSpec


def fd_grad(fn, arrays, which, h=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. arrays[which].

    Independent of the reverse-mode path: perturbs one element at a time.
    """
    x = arrays[which]
    out = np.zeros_like(x)
    flat = x.ravel()
    grad = out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = fn(*arrays)
        flat[i] = orig - step
        lo = fn(*arrays)
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return out


def rel_err(a, b):
    """Max elementwise relative error with a guard for tiny gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def tensor64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


@pytest.fixture
def tiny_atlas():
    """3 networks of 4/8/4 parcels, spatial patch 4 (no padding)."""
    return NetworkAtlas(np.repeat([0, 1, 2], [4, 8, 4]), spatial_patch=4)


@pytest.fixture
def tiny_spec():
    return SegmentSpec(T=8, P_t=4, P_c=4, segments_per_recording=3)
