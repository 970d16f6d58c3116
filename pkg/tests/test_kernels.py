"""Backend equivalence: the compiled kernels must match the numpy reference."""

import numpy as np
import pytest

from conftest import random_array
from stag import kernels
from stag.kernels import reference
from stag.rng import make_rng

try:
    from stag.kernels import _fast
except ImportError:
    _fast = None

needs_compiled = pytest.mark.skipif(_fast is None, reason="compiled kernels not built")


def _random_case(trial):
    rng = make_rng(77, "kernel", trial)
    c = int(rng.integers(1, 5))
    h = int(rng.integers(1, 14))
    w = int(rng.integers(1, 14))
    fmap = random_array(rng, (c, h, w))
    k = int(rng.integers(1, 8))
    boxes = np.empty((k, 4))
    for i in range(k):
        x1 = rng.uniform(0, max(w - 0.5, 0.1))
        y1 = rng.uniform(0, max(h - 0.5, 0.1))
        boxes[i] = (x1, y1, min(x1 + rng.uniform(0.2, 5.0), w), min(y1 + rng.uniform(0.2, 5.0), h))
    samples = int(rng.integers(1, 4))
    return fmap, boxes, samples, rng


@needs_compiled
class TestCompiledMatchesReference:
    def test_roi_forward(self):
        for trial in range(60):
            fmap, boxes, samples, _ = _random_case(trial)
            a = reference.roi_align_forward(fmap, boxes, 7, 7, samples)
            b = _fast.roi_align_forward(fmap, boxes, 7, 7, samples)
            assert np.max(np.abs(a - b)) < 1e-12, f"trial {trial}"

    def test_roi_backward(self):
        for trial in range(60):
            fmap, boxes, samples, rng = _random_case(trial)
            c, h, w = fmap.shape
            grad_out = random_array(rng, (boxes.shape[0], c, 7, 7))
            a = reference.roi_align_backward(boxes, grad_out, h, w, samples)
            b = _fast.roi_align_backward(boxes, grad_out, h, w, samples)
            assert np.max(np.abs(a - b)) < 1e-12, f"trial {trial}"

    def test_render_blobs(self):
        for trial in range(40):
            rng = make_rng(78, "blob", trial)
            h, w = int(rng.integers(4, 40)), int(rng.integers(4, 40))
            channels = int(rng.integers(1, 5))
            k = int(rng.integers(0, 7))
            blobs = np.column_stack(
                [
                    rng.uniform(-4, w + 4, k),  # centers may hang off the canvas
                    rng.uniform(-4, h + 4, k),
                    rng.uniform(0.5, 4.0, k),
                    rng.uniform(0.5, 4.0, k),
                    rng.uniform(0.1, 2.0, k),
                    rng.integers(0, channels, k).astype(np.float64),
                ]
            ) if k else np.zeros((0, 6))
            a = reference.render_blobs(h, w, channels, blobs)
            b = _fast.render_blobs(h, w, channels, blobs)
            assert np.max(np.abs(a - b)) < 1e-12, f"trial {trial}"


class TestBackwardIsTransposeOfForward:
    def test_vjp_identity(self):
        # <g, forward(f)> == <backward(g), f> for a linear operator
        for trial in range(25):
            fmap, boxes, samples, rng = _random_case(trial + 1000)
            c, h, w = fmap.shape
            g = random_array(rng, (boxes.shape[0], c, 7, 7))
            fwd = kernels.roi_align_forward(fmap, boxes, 7, 7, samples)
            bwd = kernels.roi_align_backward(boxes, g, h, w, samples)
            lhs = float(np.sum(g * fwd))
            rhs = float(np.sum(bwd * fmap))
            assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs)), f"trial {trial}"


class TestBlobRender:
    def test_peak_at_center_pixel(self):
        out = reference.render_blobs(11, 11, 1, [[5.5, 5.5, 1.5, 1.5, 2.0, 0]])
        assert out[0, 5, 5] == out.max()
        # pixel center (5.5, 5.5) coincides with the blob center: amplitude exact
        assert abs(out[0, 5, 5] - 2.0) < 1e-15

    def test_zero_outside_window(self):
        out = reference.render_blobs(64, 64, 1, [[8.0, 8.0, 1.0, 1.0, 1.0, 0]])
        assert out[0, 40:, 40:].max() == 0.0

    def test_channel_routing(self):
        out = reference.render_blobs(8, 8, 3, [[4.0, 4.0, 1.0, 1.0, 1.0, 2]])
        assert out[0].max() == 0.0 and out[1].max() == 0.0 and out[2].max() > 0.0

    def test_backend_dispatch_names_backend(self):
        assert kernels.BACKEND in ("python", "compiled")
