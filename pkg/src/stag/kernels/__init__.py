"""Hot-kernel backend selection.

The compiled extension (_fast, Cython) is used when importable; otherwise the
vectorized numpy reference. STAG_KERNELS=python or =compiled forces a choice,
with a hard error if the forced backend is unavailable.
"""

import os

from . import reference

_forced = os.environ.get("STAG_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = reference
    BACKEND = "python"
elif _forced == "compiled":
    from . import _fast as _impl  # noqa: F401  (raises if the extension is absent)

    BACKEND = "compiled"
elif _forced:
    raise RuntimeError(f"STAG_KERNELS={_forced!r}: expected 'python' or 'compiled'")
else:
    try:
        from . import _fast as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "python"

roi_align_forward = _impl.roi_align_forward
roi_align_backward = _impl.roi_align_backward
render_blobs = _impl.render_blobs

__all__ = ["BACKEND", "roi_align_forward", "roi_align_backward", "render_blobs", "reference"]
