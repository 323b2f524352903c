"""Common-corruption transforms at severities 0..5 (0 is the identity)."""

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
from scipy import ndimage
from scipy.stats import poisson

from langneck.data import ImageSample
from langneck.errors import ArgumentError

MAX_SEVERITY = 5

GAUSSIAN_SIGMA = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26]
IMPULSE_FRACTION = [0.0, 0.01, 0.03, 0.06, 0.10, 0.17]
SHOT_RATE = [np.inf, 500.0, 250.0, 125.0, 60.0, 25.0]
DEFOCUS_RADIUS = [0, 1, 2, 3, 5, 7]


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ArgumentError(f"Unknown corruption '{self.kind}'. Use: {', '.join(CORRUPTIONS)}")
        if not 0 <= self.severity <= MAX_SEVERITY:
            raise ArgumentError(f"Severity must lie in 0..{MAX_SEVERITY}, got {self.severity}")


def gaussian_noise(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, GAUSSIAN_SIGMA[severity], size=x.shape)


def impulse_noise(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(x.shape) < IMPULSE_FRACTION[severity]
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), x)


def shot_noise(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    rate = SHOT_RATE[severity]
    mu = x * rate
    # inverse-transform sampling keeps the draw on the seeded generator
    counts = poisson.ppf(rng.random(x.shape), np.maximum(mu, 1e-12))
    counts = np.where(mu > 0, np.maximum(counts, 0.0), 0.0)
    return counts / rate


def disk_kernel(radius: int) -> np.ndarray:
    """Normalized disk of the given pixel radius."""
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    disk = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return disk / disk.sum()


def defocus_blur(x: np.ndarray, severity: int, rng: np.random.Generator) -> np.ndarray:
    kernel = disk_kernel(DEFOCUS_RADIUS[severity])
    channels = [ndimage.convolve(x[..., c], kernel, mode="reflect") for c in range(x.shape[-1])]
    return np.stack(channels, axis=-1)


CORRUPTIONS: Dict[str, Callable[[np.ndarray, int, np.random.Generator], np.ndarray]] = {
    "gaussian_noise": gaussian_noise,
    "impulse_noise": impulse_noise,
    "shot_noise": shot_noise,
    "defocus_blur": defocus_blur,
}

CORRUPTION_KINDS: List[str] = list(CORRUPTIONS)


def apply_corruption(img: ImageSample, c: Corruption, seed: int) -> ImageSample:
    """Corrupt a copy of `img`; outputs are clamped to [0, 1]."""
    if c.severity == 0:
        return ImageSample(pixels=img.pixels.copy(), label=img.label, spec=img.spec)
    rng = np.random.default_rng(seed)
    pixels = CORRUPTIONS[c.kind](img.pixels, c.severity, rng)
    return ImageSample(pixels=np.clip(pixels, 0.0, 1.0), label=img.label, spec=img.spec)


def corruption_grid() -> List[Corruption]:
    """Every kind at severities 1..5, in report order."""
    return [Corruption(kind, s) for kind in CORRUPTION_KINDS for s in range(1, MAX_SEVERITY + 1)]
