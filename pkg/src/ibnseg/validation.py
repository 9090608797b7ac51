"""Input checks shared by the estimator, the CLI and the training loop."""

from __future__ import annotations

import numpy as np


def check_images(x, in_channels: int | None = None) -> np.ndarray:
    """Return ``x`` as a float64 (N, C, H, W) array of finite values.

    A single CHW image is promoted to a batch of one. ``in_channels`` also
    accepts one-channel input, which the network duplicates.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("no images given")
    if min(x.shape[2:]) < 2:
        raise ValueError(f"images must be at least 2x2, got {x.shape[2:]}")
    if in_channels is not None and x.shape[1] not in (1, in_channels):
        raise ValueError(f"expected 1 or {in_channels} image channels, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("images contain non-finite values")
    return x


def check_masks(y, images: np.ndarray | None = None, num_classes: int | None = None) -> np.ndarray:
    """Return ``y`` as a binary float64 (N, m, H, W) array consistent with ``images``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ValueError(f"masks must be (N, m, H, W), got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary (0/1)")
    if num_classes is not None and y.shape[1] != num_classes:
        raise ValueError(f"expected {num_classes} mask channels, got {y.shape[1]}")
    if images is not None:
        if y.shape[0] != images.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {y.shape[0]} masks")
        if y.shape[2:] != images.shape[2:]:
            raise ValueError(f"mask size {y.shape[2:]} differs from image size {images.shape[2:]}")
    return y
