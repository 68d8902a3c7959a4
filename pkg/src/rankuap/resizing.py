"""Multi-scale random resizing: random input resize, matching perturbation
resize, and perturbed-image composition with range clamping.

A draw is deterministic given (policy seed, draw index), so clean and
perturbed branches of one iteration can share the same size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ShapeError

MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class ResizePolicy:
    min_side: int = 32
    max_side: int = 96
    aspect_distortion_bound: float = 0.15
    seed: int = 0
    fixed_size: tuple | None = None  # (h, w) disables random draws

    def __post_init__(self):
        if self.min_side > self.max_side:
            raise ConfigurationError(
                f"min_side {self.min_side} exceeds max_side {self.max_side}"
            )
        if self.aspect_distortion_bound < 0:
            raise ConfigurationError("aspect distortion bound must be >= 0")

    @staticmethod
    def fixed(size):
        size = (size, size) if np.isscalar(size) else tuple(size)
        return ResizePolicy(min_side=min(size), max_side=max(size), fixed_size=size)

    def draw_size(self, h, w, draw_index):
        """Target (H', W') for an HxW image at the given draw index."""
        if self.fixed_size is not None:
            return tuple(self.fixed_size)
        rng = np.random.default_rng([self.seed, 0xD12A, int(draw_index)])
        # Integer rounding makes an exact aspect match unreachable, so the
        # tolerance is floored at one pixel of ratio resolution.
        tol = max(self.aspect_distortion_bound, 1.0 / min(h, w))
        for _ in range(MAX_REJECTIONS):
            hh = int(rng.integers(self.min_side, self.max_side + 1))
            ww = int(rng.integers(self.min_side, self.max_side + 1))
            if abs(ww / w - hh / h) <= tol:
                return hh, ww
        raise ConfigurationError(
            f"no ({self.min_side}..{self.max_side}) size satisfies the aspect "
            f"bound {self.aspect_distortion_bound} for a {h}x{w} image"
        )


def random_input_resize(policy, image, draw_index=0):
    """Resize a CHW image (tensor or ndarray) to a randomly drawn size."""
    arr = image.data if isinstance(image, ad.Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.size == 0:
        raise ShapeError(f"expected a non-empty CHW image, got shape {arr.shape}")
    hh, ww = policy.draw_size(arr.shape[1], arr.shape[2], draw_index)
    t = image if isinstance(image, ad.Tensor) else ad.constant(arr)
    resized = ad.reshape(
        ad.bilinear_resize(ad.reshape(t, (1,) + t.data.shape), hh, ww),
        (t.data.shape[0], hh, ww),
    )
    return resized, (hh, ww)


def perturbation_resize(delta, target_h, target_w):
    """Bilinear resize of the base-resolution perturbation, differentiable."""
    if delta.data.ndim != 3:
        raise ShapeError(f"expected CHW perturbation, got shape {delta.data.shape}")
    return ad.reshape(
        ad.bilinear_resize(ad.reshape(delta, (1,) + delta.data.shape), target_h, target_w),
        (delta.data.shape[0], int(target_h), int(target_w)),
    )


def apply_perturbation(image_resized, delta_resized):
    """clamp(image + delta, 0, 255); pass-through subgradient inside the range."""
    if image_resized.data.shape != delta_resized.data.shape:
        raise ShapeError(
            f"image {image_resized.data.shape} vs perturbation {delta_resized.data.shape}"
        )
    return ad.clamp(ad.add(image_resized, delta_resized), 0.0, 255.0)
