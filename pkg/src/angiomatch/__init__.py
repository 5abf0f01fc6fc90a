"""Guided keypoint matching for synthetic coronary angiography pairs.

Modules: ``geometry`` (C-arm cameras, epipolar geometry, RANSAC pose),
``vesselgen`` (vessel trees and view pairs), ``imagesynth`` (diffusion
schedule and renderers), ``descriptors``, ``matcher``, ``evaluation`` and
``cli``.
"""

__version__ = "0.1.0"

from .exceptions import AngiomatchError  # noqa: E402

__all__ = ["__version__", "AngiomatchError"]
