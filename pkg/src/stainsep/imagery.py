"""Image containers, PNG I/O and Beer-Lambert transforms.

Images are carried as ``channels x pixels`` float64 matrices with intensities
in (0, 1], pixels in row-major order.  The optical-density representation is
the element-wise natural log of intensity, in which colored components
combine additively.  All functions here are pure; nothing mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .matsum import low_rank_product

#: Intensity floor applied when loading 8-bit files, so saturated black
#: pixels stay strictly positive and the log transform stays finite.
EPS_LOG = 1.0 / 255.0

#: Lower bound for optical-density entries, ln(EPS_LOG).
LOG_FLOOR = float(np.log(EPS_LOG))

MEDIAN_KERNEL = 11
GAUSSIAN_KERNEL = 21
GAUSSIAN_SIGMA = 1.0

_TINY = float(np.finfo(np.float64).tiny)
_OD_SLACK = 1e-9


class ImageDecodeError(ValueError):
    """Input file is unreadable or not an 8-bit RGB/grayscale image."""


@dataclass
class RawImage:
    """Intensity image: ``data[c, j]`` is channel c of pixel j, in (0, 1].

    Pixel j sits at (x, y) = (j % width, j // width).
    """

    channels: int
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.width <= 0 or self.height <= 0 or self.channels <= 0:
            raise ValueError("image geometry must be positive")
        if self.data.shape != (self.channels, self.width * self.height):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{self.channels} x {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("intensities must be finite")
        if self.data.min(initial=1.0) <= 0.0 or self.data.max(initial=0.0) > 1.0:
            raise ValueError("intensities must lie in (0, 1]")

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def planes(self) -> np.ndarray:
        """View the data as a (channels, height, width) stack."""
        return self.data.reshape(self.channels, self.height, self.width)


@dataclass
class OpticalDensityImage:
    """Log-intensity image: entries in [ln(EPS_LOG), 0]."""

    channels: int
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.channels, self.width * self.height):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{self.channels} x {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("optical densities must be finite")
        if self.data.max(initial=0.0) > _OD_SLACK or self.data.min(initial=0.0) < LOG_FLOOR - _OD_SLACK:
            raise ValueError(f"optical densities must lie in [{LOG_FLOOR:.4f}, 0]")

    @property
    def pixels(self) -> int:
        return self.width * self.height


def load_image(path) -> RawImage:
    """Load an 8-bit RGB or grayscale PNG as a RawImage.

    Intensities are mapped v -> max(v / 255, EPS_LOG); anything else
    (palettes, alpha, 16-bit) raises ImageDecodeError.
    """
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in ("RGB", "L"):
                raise ImageDecodeError(
                    f"{path}: unsupported mode {mode!r}; expected 8-bit RGB or grayscale"
                )
            arr = np.asarray(im, dtype=np.float64)
    except ImageDecodeError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    height, width, channels = arr.shape
    data = np.maximum(arr / 255.0, EPS_LOG)
    return RawImage(channels, width, height, data.transpose(2, 0, 1).reshape(channels, -1))


def save_image(img: RawImage, path) -> None:
    """Write a RawImage as an 8-bit PNG (RGB for 3 channels, grayscale for 1)."""
    if img.channels not in (1, 3):
        raise ValueError(f"cannot save {img.channels}-channel image as PNG")
    quantized = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    planes = quantized.reshape(img.channels, img.height, img.width).transpose(1, 2, 0)
    if img.channels == 1:
        pil = Image.fromarray(planes[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(planes, mode="RGB")
    pil.save(Path(path), format="PNG")


def to_optical_density(img: RawImage) -> OpticalDensityImage:
    """Element-wise natural log of intensity.

    Intensities are floored at EPS_LOG first, so the output invariant holds
    for any valid RawImage; images that came through load_image are already
    at or above the floor and round-trip through exp exactly.
    """
    data = np.log(np.maximum(img.data, EPS_LOG))
    return OpticalDensityImage(img.channels, img.width, img.height, data)


def from_optical_density(od: OpticalDensityImage) -> RawImage:
    """Inverse of to_optical_density (element-wise exp)."""
    return RawImage(od.channels, od.width, od.height, np.exp(od.data))


def render_beer_lambert(
    x0_log: np.ndarray, S: np.ndarray, D: np.ndarray, width: int, height: int
) -> RawImage:
    """Forward imaging model: intensities = exp(x0) 1^T * exp(-S D^T).

    Args:
        x0_log: per-channel log background, shape (c,).
        S: color appearance matrix, (c, r), entrywise >= 0.
        D: optical density map, (p, r), entrywise >= 0, p = width * height.
        width, height: pixel geometry.

    Returns:
        RawImage with intensities clamped to (0, 1].
    """
    x0_log = np.asarray(x0_log, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if x0_log.ndim != 1 or S.ndim != 2 or D.ndim != 2:
        raise ValueError("x0 must be a vector; S and D must be matrices")
    c = x0_log.shape[0]
    if S.shape[0] != c or S.shape[1] != D.shape[1]:
        raise ValueError(f"shape mismatch: x0 {x0_log.shape}, S {S.shape}, D {D.shape}")
    if D.shape[0] != width * height:
        raise ValueError(f"D has {D.shape[0]} rows for {width}x{height} geometry")
    if S.min(initial=0.0) < 0.0 or D.min(initial=0.0) < 0.0:
        raise ValueError("S and D must be entrywise nonnegative")
    absorbance = low_rank_product(S, D)
    intensities = np.exp(x0_log[:, None] - absorbance)
    intensities = np.clip(intensities, _TINY, 1.0)
    return RawImage(c, width, height, intensities)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    radius = size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def denoise(img: RawImage) -> RawImage:
    """Two-stage smoothing: median filter then Gaussian blur, per channel.

    The median stage uses an 11x11 window and the Gaussian stage a
    normalized 21-tap kernel with sigma 1, both with reflect (edge-repeating)
    padding.  Constant images pass through unchanged up to rounding.
    """
    if min(img.width, img.height) < MEDIAN_KERNEL:
        raise ValueError(
            f"image {img.width}x{img.height} is smaller than the "
            f"{MEDIAN_KERNEL}x{MEDIAN_KERNEL} median window"
        )
    kernel = _gaussian_kernel(GAUSSIAN_KERNEL, GAUSSIAN_SIGMA)
    out = np.empty_like(img.data)
    for ch in range(img.channels):
        plane = img.data[ch].reshape(img.height, img.width)
        plane = ndimage.median_filter(plane, size=MEDIAN_KERNEL, mode="reflect")
        plane = ndimage.correlate1d(plane, kernel, axis=0, mode="reflect")
        plane = ndimage.correlate1d(plane, kernel, axis=1, mode="reflect")
        out[ch] = np.clip(plane, _TINY, 1.0).ravel()
    return RawImage(img.channels, img.width, img.height, out)


def tile(img: RawImage, tile_size: int) -> list[RawImage]:
    """Partition an image into row-major tiles of at most tile_size squared.

    Edge tiles keep their ragged extent; tile(img, s) followed by untile
    restores the image exactly.
    """
    if tile_size <= 0:
        raise ValueError("tile size must be positive")
    planes = img.planes()
    tiles = []
    for y in range(0, img.height, tile_size):
        for x in range(0, img.width, tile_size):
            block = planes[:, y : y + tile_size, x : x + tile_size]
            h, w = block.shape[1], block.shape[2]
            tiles.append(RawImage(img.channels, w, h, block.reshape(img.channels, -1).copy()))
    return tiles


def untile(tiles: list[RawImage], width: int, height: int) -> RawImage:
    """Reassemble tiles produced by tile() into a width x height image."""
    if not tiles:
        raise ValueError("no tiles to assemble")
    channels = tiles[0].channels
    canvas = np.full((channels, height, width), np.nan)
    x = y = 0
    row_height = None
    for t in tiles:
        if t.channels != channels:
            raise ValueError("tiles disagree on channel count")
        if x >= width or y >= height:
            raise ValueError("tiles overflow the target geometry")
        if y + t.height > height or x + t.width > width:
            raise ValueError(f"tile {t.width}x{t.height} at ({x},{y}) exceeds {width}x{height}")
        if row_height is None:
            row_height = t.height
        elif t.height != row_height:
            raise ValueError("tiles in one row disagree on height")
        canvas[:, y : y + t.height, x : x + t.width] = t.planes()
        x += t.width
        if x == width:
            x = 0
            y += row_height
            row_height = None
    if np.isnan(canvas).any():
        raise ValueError("tiles do not cover the target geometry")
    return RawImage(channels, width, height, canvas.reshape(channels, -1))
