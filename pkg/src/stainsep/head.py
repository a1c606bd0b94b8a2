"""Projection of density maps to fixed 3-channel images.

A 1x1 linear head maps each pixel's r density values to 3 output channels
so downstream consumers see a stain-invariant image of fixed depth.  The
output is deliberately not clamped (it feeds a classifier, not a display);
normalize_render produces a viewable image instead, by re-rendering the
densities under a reference color basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .imagery import RawImage, render_beer_lambert

if TYPE_CHECKING:
    from .unroll import StainModel


@dataclass(frozen=True)
class HeadWeights:
    """3 x r weights of the per-pixel projection."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 3:
            raise ValueError(f"head weights must be 3 x r, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("head weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def rank(self) -> int:
        return self.weights.shape[1]


def identity_pattern_weights(rank: int) -> np.ndarray:
    """Default init: component j feeds channel j mod 3 at weight 0.5."""
    rows = np.arange(3)[:, None]
    cols = np.arange(rank)[None, :]
    return 0.5 * (cols % 3 == rows).astype(np.float64)


def default_head_weights(rank: int) -> HeadWeights:
    return HeadWeights(identity_pattern_weights(rank))


def project_density(
    model: "StainModel", head: HeadWeights, width: int, height: int
) -> np.ndarray:
    """Per-pixel linear map of densities: column j of the output is W @ D[j].

    Returns a raw 3 x p matrix (linear in both W and D, unclamped).
    """
    if head.rank != model.rank:
        raise ValueError(f"head rank {head.rank} does not match model rank {model.rank}")
    if model.pixels != width * height:
        raise ValueError(f"model has {model.pixels} pixels, geometry says {width * height}")
    return head.weights @ model.D.T


def normalize_render(
    model: "StainModel", s_ref: np.ndarray, width: int, height: int
) -> RawImage:
    """Re-render the recovered densities under a reference stain basis.

    Uses the forward model with a white background (x0 = 0), so images
    decomposed under different acquisition conditions come out in one
    common color scheme.
    """
    s_ref = np.asarray(s_ref, dtype=np.float64)
    if s_ref.ndim != 2 or s_ref.shape[1] != model.rank:
        raise ValueError(f"reference basis {s_ref.shape} does not match rank {model.rank}")
    return render_beer_lambert(
        np.zeros(s_ref.shape[0]), s_ref, model.D, width, height
    )
