"""Classical stain normalization baselines.

Three comparison methods: Reinhard statistics matching in LAB space,
Macenko PCA-based stain estimation/normalization, and an alternating
sparse-NMF decomposition with unit-norm color columns.  The sRGB <-> LAB
conversion is implemented here directly (not via an imaging library) with
pinned constants so outputs are bit-stable across platforms:

    D65 white point (0.95047, 1.0, 1.08883)
    sRGB gamma thresholds 0.04045 / 0.0031308, exponent 2.4
    CIE f-function cutoff (6/29)^3
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import EPS_LOG, OpticalDensityImage, RawImage
from .matsum import column_order, low_rank_product, ordered_column_sum
from .proxcore import step_from_norm_sq

D65_WHITE = np.array([0.95047, 1.0, 1.08883])

#: Linear sRGB -> XYZ (IEC 61966-2-1); the inverse is computed, not typed,
#: so the round trip closes to machine precision.
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)

_F_CUTOFF = (6.0 / 29.0) ** 3
_F_SLOPE = (29.0 / 6.0) ** 2 / 3.0


class ForegroundError(ValueError):
    """Too few tissue pixels for stain estimation."""


@dataclass
class StainBasis:
    """Unit-norm nonnegative stain colors plus robust density scales."""

    S: np.ndarray
    max_densities: np.ndarray

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        self.max_densities = np.asarray(self.max_densities, dtype=np.float64)
        if self.S.ndim != 2 or self.max_densities.shape != (self.S.shape[1],):
            raise ValueError("basis needs one max density per stain column")
        if self.S.min(initial=0.0) < 0.0:
            raise ValueError("stain colors must be nonnegative")
        norms = np.linalg.norm(self.S, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("stain columns must have unit l2 norm")

    @property
    def rank(self) -> int:
        return self.S.shape[1]


# ---------------------------------------------------------------------------
# sRGB <-> LAB


def _srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.maximum(v, 0.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1.0 / 2.4) - 0.055)


def _f_forward(t: np.ndarray) -> np.ndarray:
    return np.where(t > _F_CUTOFF, np.cbrt(t), _F_SLOPE * t + 4.0 / 29.0)


def _f_inverse(u: np.ndarray) -> np.ndarray:
    return np.where(u > 6.0 / 29.0, u**3, (u - 4.0 / 29.0) / _F_SLOPE)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert a 3 x p matrix of sRGB values in [0, 1] to CIE LAB."""
    xyz = SRGB_TO_XYZ @ _srgb_to_linear(rgb)
    fx, fy, fz = _f_forward(xyz / D65_WHITE[:, None])
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_lab; output is unclamped and may leave [0, 1]."""
    fy = (lab[0] + 16.0) / 116.0
    fx = fy + lab[1] / 500.0
    fz = fy - lab[2] / 200.0
    xyz = np.stack([_f_inverse(fx), _f_inverse(fy), _f_inverse(fz)]) * D65_WHITE[:, None]
    return _linear_to_srgb(XYZ_TO_SRGB @ xyz)


# ---------------------------------------------------------------------------
# Reinhard


def match_lab_stats(src_lab: np.ndarray, template_lab: np.ndarray) -> np.ndarray:
    """Shift and scale each LAB channel of src to the template's mean/std.

    A zero-variance source channel cannot be rescaled; its pixels are set to
    the template channel mean.  Variances below 1e-8 LAB units count as zero
    (constant channels produce harmless rounding noise around 1e-14 that a
    literal division would amplify).
    """
    src_mean = src_lab.mean(axis=1, keepdims=True)
    src_std = src_lab.std(axis=1, keepdims=True)
    tpl_mean = template_lab.mean(axis=1, keepdims=True)
    tpl_std = template_lab.std(axis=1, keepdims=True)
    scale = np.zeros_like(src_std)
    np.divide(tpl_std, src_std, out=scale, where=src_std > 1e-8)
    return (src_lab - src_mean) * scale + tpl_mean


def reinhard_normalize(src: RawImage, template: RawImage) -> RawImage:
    """Match the per-channel LAB statistics of src to the template."""
    if src.channels != 3 or template.channels != 3:
        raise ValueError("Reinhard normalization expects RGB images")
    out_lab = match_lab_stats(rgb_to_lab(src.data), rgb_to_lab(template.data))
    rgb = np.clip(lab_to_rgb(out_lab), EPS_LOG, 1.0)
    return RawImage(3, src.width, src.height, rgb)


# ---------------------------------------------------------------------------
# Macenko

MACENKO_ALPHA = 1.0
MACENKO_BETA = 0.15
MACENKO_MIN_FOREGROUND = 100
MACENKO_DENSITY_PERCENTILE = 99.0


def _nonneg_od(img: RawImage) -> np.ndarray:
    """Positive optical densities, p x c (one row per pixel)."""
    return -np.log(np.maximum(img.data, EPS_LOG)).T


def nnls_two_stain(S: np.ndarray, od: np.ndarray) -> np.ndarray:
    """Per-pixel nonnegative least squares against a 2-column basis.

    Enumerates the active sets of the 2-variable problem in closed form
    (exact, vectorized over pixels).  od is p x c; the result is p x 2.
    """
    if S.shape[1] != 2:
        raise ValueError("closed-form NNLS is specific to two stains")
    g11 = float(S[:, 0] @ S[:, 0])
    g22 = float(S[:, 1] @ S[:, 1])
    g12 = float(S[:, 0] @ S[:, 1])
    b1 = od @ S[:, 0]
    b2 = od @ S[:, 1]
    det = g11 * g22 - g12 * g12

    candidates = np.zeros((od.shape[0], 3, 2))
    if det > 0.0:
        candidates[:, 0, 0] = (g22 * b1 - g12 * b2) / det
        candidates[:, 0, 1] = (g11 * b2 - g12 * b1) / det
    candidates[:, 1, 0] = np.maximum(b1 / g11, 0.0)
    candidates[:, 2, 1] = np.maximum(b2 / g22, 0.0)
    candidates = np.maximum(candidates, 0.0)

    # residual^2 = ||od||^2 - 2 d.b + d.G d, compare without the constant
    scores = np.empty((od.shape[0], 3))
    for k in range(3):
        d1, d2 = candidates[:, k, 0], candidates[:, k, 1]
        scores[:, k] = (
            g11 * d1 * d1 + g22 * d2 * d2 + 2.0 * g12 * d1 * d2 - 2.0 * (d1 * b1 + d2 * b2)
        )
    best = np.argmin(scores, axis=1)
    return candidates[np.arange(od.shape[0]), best]


def macenko_estimate(
    src: RawImage,
    alpha: float = MACENKO_ALPHA,
    beta: float = MACENKO_BETA,
    min_foreground: int = MACENKO_MIN_FOREGROUND,
) -> StainBasis:
    """Estimate a 2-stain basis from the image by PCA of foreground densities.

    Pixels whose optical-density norm falls below beta count as background.
    The two stain directions are the alpha and (100 - alpha) percentiles of
    the angular distribution in the dominant PCA plane; eigenvector signs
    are fixed by requiring a positive mean projection.
    """
    if src.channels != 3:
        raise ValueError("Macenko estimation expects RGB images")
    od = _nonneg_od(src)
    foreground = od[np.linalg.norm(od, axis=1) >= beta]
    if foreground.shape[0] < min_foreground:
        raise ForegroundError(
            f"only {foreground.shape[0]} foreground pixels (need {min_foreground})"
        )
    centered = foreground - foreground.mean(axis=0)
    cov = centered.T @ centered / foreground.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    plane = eigvecs[:, [2, 1]]
    for k in range(2):
        if float(np.mean(foreground @ plane[:, k])) < 0.0:
            plane[:, k] = -plane[:, k]

    proj = foreground @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    extremes = []
    for angle in (lo, hi):
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        v = np.abs(v)
        extremes.append(v / np.linalg.norm(v))
    # deterministic column order: strongest red absorption first
    if extremes[0][0] < extremes[1][0]:
        extremes = extremes[::-1]
    S = np.stack(extremes, axis=1)
    densities = nnls_two_stain(S, od)
    max_densities = np.percentile(densities, MACENKO_DENSITY_PERCENTILE, axis=0)
    return StainBasis(S, max_densities)


def macenko_normalize(src: RawImage, template: RawImage) -> RawImage:
    """Re-render src under the template's stain basis and density scale."""
    src_basis = macenko_estimate(src)
    tpl_basis = macenko_estimate(template)
    densities = nnls_two_stain(src_basis.S, _nonneg_od(src))
    ratio = np.ones(2)
    np.divide(
        tpl_basis.max_densities, src_basis.max_densities,
        out=ratio, where=src_basis.max_densities > 0.0,
    )
    densities = densities * ratio[None, :]
    intensities = np.exp(-(tpl_basis.S @ densities.T))
    return RawImage(3, src.width, src.height, np.clip(intensities, EPS_LOG, 1.0))


# ---------------------------------------------------------------------------
# Sparse NMF (unit-norm color columns, entrywise l1 on densities)


@dataclass
class SparseNmfResult:
    x0: np.ndarray
    basis: StainBasis
    densities: np.ndarray
    objective_trace: list[float]


def _sparse_nmf_objective(x0, S, D, data, lam, order) -> float:
    residual = x0[:, None] - data - low_rank_product(S, D, order)
    return 0.5 * float(np.einsum("ij,ij->", residual, residual)) + lam * float(
        np.sum(np.abs(D))
    )


def sparse_nmf_decompose(
    X: OpticalDensityImage, r: int, lam: float, iters: int, seed: int = 0
) -> SparseNmfResult:
    """Alternating scheme for the unit-norm sparse factorization.

    Each iteration updates the background in closed form, takes one
    shrinkage-thresholded gradient step on the densities and one projected
    gradient step on the colors, then re-normalizes each color column to
    unit norm while folding its scale into the matching density column
    (which leaves the product S D^T unchanged).  The color step also
    shrinks each column norm by its density mass, which is the exact prox
    of the scale-transferred penalty; without it the re-normalization could
    grow the l1 term and break the per-iteration descent.
    """
    if r < 1 or lam < 0 or iters < 1:
        raise ValueError("need r >= 1, lam >= 0, iters >= 1")
    data = X.data
    c, p = data.shape
    rng = np.random.default_rng(seed)
    S = rng.uniform(size=(c, r))
    S /= np.linalg.norm(S, axis=0, keepdims=True)
    D = np.zeros((p, r))
    x0 = np.zeros(c)

    order = column_order(S, D)
    trace = [_sparse_nmf_objective(x0, S, D, data, lam, order)]
    for _ in range(iters):
        sd = low_rank_product(S, D, order)
        x0 = np.mean(data + sd, axis=1)

        tau_d = step_from_norm_sq(ordered_column_sum(np.einsum("ij,ij->j", S, S), order))
        residual = x0[:, None] - data - sd
        D = np.maximum(D + tau_d * (residual.T @ S) - tau_d * lam, 0.0)

        order2 = column_order(S, D)
        tau_s = step_from_norm_sq(ordered_column_sum(np.einsum("ij,ij->j", D, D), order2))
        residual2 = x0[:, None] - data - low_rank_product(S, D, order2)
        S = np.maximum(S + tau_s * (residual2 @ D), 0.0)
        norms = np.linalg.norm(S, axis=0)
        shrink = np.zeros(r)
        np.divide(
            np.minimum(norms, lam * tau_s * np.einsum("ij->j", D)), norms,
            out=shrink, where=norms > 0.0,
        )
        S = S * (1.0 - shrink)[None, :]

        norms = np.linalg.norm(S, axis=0)
        alive = norms > 0.0
        D = np.where(alive[None, :], D * norms[None, :], D)
        S = np.where(alive[None, :], S / np.where(alive, norms, 1.0)[None, :], S)
        # a column zeroed entirely restarts at a fresh direction with no mass
        if not np.all(alive):
            refill = rng.uniform(size=(c, int(np.sum(~alive))))
            refill /= np.linalg.norm(refill, axis=0, keepdims=True)
            S[:, ~alive] = refill
            D[:, ~alive] = 0.0

        order = column_order(S, D)
        trace.append(_sparse_nmf_objective(x0, S, D, data, lam, order))

    max_densities = np.percentile(D, MACENKO_DENSITY_PERCENTILE, axis=0)
    return SparseNmfResult(x0, StainBasis(S, max_densities), D, trace)
