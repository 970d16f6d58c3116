"""Spatio-temporal action graphs over per-frame object detections.

Builds per-frame object graphs from pooled box features, attends over pair
relations within each frame and over frames within a clip, and classifies the
clip. Includes a synthetic interaction world for end-to-end benchmarks, a
reverse-mode autodiff core, and a small CLI.
"""

from .errors import StagError

__version__ = "0.1.0"

__all__ = ["StagError", "__version__"]
