"""Compare the compiled kernel backend against the numpy reference.

Times roi_align forward/backward and render_blobs at benchmark-sized inputs,
then one full training step through each backend, and checks the backends
agree numerically while it is at it. Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from stag.data import WorldSpec, generate_segment
from stag.kernels import reference
from stag.model import ROI_SIZE, StagParams, VariantConfig, forward
from stag.optim import OptimState, bce_with_logits, sgd_step
from stag.rng import make_rng

try:
    from stag.kernels import _fast
except ImportError:
    _fast = None


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_roi(impl, fmap, boxes, grad_out):
    fwd = time_call(lambda: impl.roi_align_forward(fmap, boxes, ROI_SIZE, ROI_SIZE, 2), 30)
    bwd = time_call(
        lambda: impl.roi_align_backward(boxes, grad_out, fmap.shape[1], fmap.shape[2], 2), 30
    )
    return fwd, bwd


def bench_blobs(impl, blobs):
    return time_call(lambda: impl.render_blobs(64, 64, 4, blobs), 30)


def bench_step(segment):
    params = StagParams.init(3, d_in=4 * ROI_SIZE * ROI_SIZE, d=32, d_k=16)
    state = OptimState(lr=0.01)
    variant = VariantConfig()

    def step():
        loss = bce_with_logits(forward(segment, params, variant)[0], segment.labels)
        loss.backward()
        sgd_step(params.named_params(), state)
        params.zero_grads()

    return time_call(step, 10)


def main():
    rng = make_rng(1, "bench")
    fmap = rng.normal(size=(4, 64, 64))
    sides = rng.uniform(6.0, 14.0, size=(42, 2))
    corners = rng.uniform(0.0, 50.0, size=(42, 2))
    boxes = np.concatenate([corners, corners + sides], axis=1)
    grad_out = rng.normal(size=(42, 4, ROI_SIZE, ROI_SIZE))
    blobs = np.column_stack([
        rng.uniform(5, 59, size=12), rng.uniform(5, 59, size=12),
        rng.uniform(0.7, 2.0, size=12), rng.uniform(0.7, 2.0, size=12),
        np.full(12, 3.0), rng.integers(0, 4, size=12).astype(float),
    ])

    if _fast is None:
        print("compiled backend unavailable; showing reference only")
        impls = [("python", reference)]
    else:
        agree = np.allclose(
            _fast.roi_align_forward(fmap, boxes, ROI_SIZE, ROI_SIZE, 2),
            reference.roi_align_forward(fmap, boxes, ROI_SIZE, ROI_SIZE, 2),
            atol=1e-12, rtol=0.0,
        ) and np.allclose(
            _fast.roi_align_backward(boxes, grad_out, 64, 64, 2),
            reference.roi_align_backward(boxes, grad_out, 64, 64, 2),
            atol=1e-12, rtol=0.0,
        ) and np.allclose(
            _fast.render_blobs(64, 64, 4, blobs),
            reference.render_blobs(64, 64, 4, blobs),
            atol=1e-12, rtol=0.0,
        )
        print(f"backend agreement within 1e-12: {'yes' if agree else 'NO'}")
        impls = [("python", reference), ("compiled", _fast)]

    rows = []
    for name, impl in impls:
        fwd, bwd = bench_roi(impl, fmap, boxes, grad_out)
        blob_t = bench_blobs(impl, blobs)
        rows.append((name, fwd, bwd, blob_t))

    print(f"\n{'backend':10s} {'roi fwd':>10s} {'roi bwd':>10s} {'render':>10s}")
    for name, fwd, bwd, blob_t in rows:
        print(f"{name:10s} {fwd * 1e3:9.3f}ms {bwd * 1e3:9.3f}ms {blob_t * 1e3:9.3f}ms")
    if len(rows) == 2:
        print(
            f"{'speedup':10s} "
            f"{rows[0][1] / rows[1][1]:9.1f}x {rows[0][2] / rows[1][2]:9.1f}x "
            f"{rows[0][3] / rows[1][3]:9.1f}x"
        )

    segment = generate_segment(WorldSpec(), True, 5)
    print(f"\nfull training step (T=8, N=6, d=32), active backend: "
          f"{bench_step(segment) * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
