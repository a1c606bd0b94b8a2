"""Shared synthetic-scene helpers for the test suite."""

import numpy as np

from stainsep import imagery, unroll


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def blob_field(width, height, rng, n_blobs, amp, sigma_range, x_lo=0.0, x_hi=1.0):
    """Sum of random Gaussian bumps, truncated to keep the field sparse."""
    yy, xx = np.mgrid[0:height, 0:width]
    field = np.zeros((height, width))
    for _ in range(n_blobs):
        cx = rng.uniform(x_lo * width, x_hi * width)
        cy = rng.uniform(0, height)
        sig = rng.uniform(*sigma_range)
        field += rng.uniform(0.6, 1.0) * amp * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig**2)
        )
    field[field < 0.05 * amp] = 0.0
    return field.ravel()


def two_stain_scene(seed, amp=1.4, width=32, height=32):
    """Render a two-stain image from known factors (white background).

    The stains sit near the red and green corners of the color cone and the
    two density fields occupy overlapping halves of the image.
    """
    rng = np.random.default_rng(seed)
    s1 = unit(np.abs(np.array([0.99, 0.07, 0.07]) + rng.uniform(-0.02, 0.02, 3)))
    s2 = unit(np.abs(np.array([0.07, 0.99, 0.07]) + rng.uniform(-0.02, 0.02, 3)))
    stains = np.stack([s1, s2], axis=1)
    densities = np.stack(
        [
            blob_field(width, height, rng, 4, amp, (2, 4), 0.0, 0.55),
            blob_field(width, height, rng, 4, amp, (2, 4), 0.45, 1.0),
        ],
        axis=1,
    )
    raw = imagery.render_beer_lambert(np.zeros(3), stains, densities, width, height)
    return raw, stains, densities


#: Informative solver start for recovery tests: loose matches for the two
#: true stains plus two off-cone distractor columns the regularizer kills.
RECOVERY_INIT = np.stack(
    [
        unit([0.95, 0.20, 0.12]),
        unit([0.20, 0.95, 0.12]),
        unit([0.07, 0.07, 0.99]),
        unit([0.10, 0.06, 0.99]),
    ],
    axis=1,
)


def recovery_params():
    return unroll.LearnableParams(RECOVERY_INIT.copy(), 0.0, 0.4, np.zeros((3, 4)))


def recovery_config():
    return unroll.SolverConfig(rank=4, iterations=200)


def random_raw_image(seed, width, height, lo=1.0 / 255.0, hi=1.0, channels=3):
    rng = np.random.default_rng(seed)
    return imagery.RawImage(
        channels, width, height, rng.uniform(lo, hi, size=(channels, width * height))
    )
