"""Frequency-adaptive input enhancement and DFT spectrum analysis.

The summed area of a teacher's candidate boxes decides the augmentation
branch: images dominated by large objects get a crop-and-resize (boosting
low-frequency content), images dominated by small objects get Gaussian
noise (boosting high-frequency content). The spectrum analyzer verifies
those frequency effects directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import BoxSet

BIG_OBJECT_CROP = "big_object_crop"
SMALL_OBJECT_NOISE = "small_object_noise"

# grayscale conversion weights (luminance)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class Spectrum:
    """DC-centered magnitude spectrum with radial band energies.

    ``total_energy`` equals the spatial-domain sum of squared pixel values
    (Parseval); the named band energies partition it.
    """

    magnitude: np.ndarray  # H×W, DC-centered |DFT|
    total_energy: float
    band_energies: dict[str, float]

    def __post_init__(self):
        band_sum = sum(self.band_energies.values())
        if self.total_energy > 0 and abs(band_sum - self.total_energy) > 1e-6 * self.total_energy:
            raise ValueError("band energies do not sum to total energy")

    def band_fraction(self, name: str) -> float:
        if self.total_energy <= 0:
            return 0.0
        return self.band_energies[name] / self.total_energy


@dataclass(frozen=True)
class AugmentDecision:
    """Which augmentation branch was selected and the area statistic behind it."""

    branch: str
    area_fraction: float


def area_of_boxes(boxes: BoxSet, score_floor: float) -> float:
    """Summed normalized area of candidate boxes with score >= score_floor.

    Overlaps count multiply (a plain sum, not a union), so the result may
    exceed 1.
    """
    if not (0.0 <= score_floor <= 1.0):
        raise ValueError(f"score_floor must be in [0,1], got {score_floor}")
    return float(
        sum(boxes.area(i) for i in range(len(boxes)) if boxes.scores[i] >= score_floor)
    )


def select_augmentation(area_fraction: float, lambda_thresh: float) -> AugmentDecision:
    """Pick the crop branch when area_fraction >= lambda_thresh (inclusive),
    the noise branch otherwise."""
    if lambda_thresh <= 0:
        raise ValueError(f"lambda_thresh must be positive, got {lambda_thresh}")
    branch = BIG_OBJECT_CROP if area_fraction >= lambda_thresh else SMALL_OBJECT_NOISE
    return AugmentDecision(branch=branch, area_fraction=float(area_fraction))


def apply_gaussian_noise(image: np.ndarray, sigma: float, prob: float, seed: int) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise with probability ``prob``, clipped to [0,1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if not (0.0 <= prob <= 1.0):
        raise ValueError(f"prob must be in [0,1], got {prob}")
    if sigma == 0.0 or prob == 0.0:
        return image.copy()
    rng = np.random.default_rng(seed)
    if rng.random() >= prob:
        return image.copy()
    noise = rng.normal(0.0, sigma, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)


def apply_random_crop(image: np.ndarray, min_keep: float, max_keep: float, seed: int) -> np.ndarray:
    """Crop a proportional window with a uniformly drawn keep fraction and
    uniformly drawn anchor, then resize back to the original size."""
    if not (0.0 < min_keep <= max_keep <= 1.0):
        raise ValueError(f"need 0 < min_keep <= max_keep <= 1, got ({min_keep}, {max_keep})")
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    keep = float(rng.uniform(min_keep, max_keep))
    h_keep = max(1, round(h * keep))
    w_keep = max(1, round(w * keep))
    top = int(rng.integers(0, h - h_keep + 1))
    left = int(rng.integers(0, w - w_keep + 1))
    if h_keep == h and w_keep == w:
        return image.copy()
    window = image[top : top + h_keep, left : left + w_keep]
    flat = window.ndim == 2
    if flat:
        window = window[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(window.transpose(2, 0, 1))).unsqueeze(0)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out_np = out.squeeze(0).numpy().transpose(1, 2, 0)
    if flat:
        out_np = out_np[:, :, 0]
    return np.clip(out_np, 0.0, 1.0)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminance-weighted grayscale; 2-D input passes through."""
    if image.ndim == 2:
        return image.astype(np.float64)
    return image.astype(np.float64) @ _LUMA


def dft_spectrum(
    image: np.ndarray, low_cut: float = 0.125, high_cut: float = 0.5
) -> Spectrum:
    """DC-centered magnitude spectrum with low/mid/high radial band energies.

    Band radii are fractions of the Nyquist frequency: low is r < low_cut,
    mid is [low_cut, high_cut), high is >= high_cut. Energies use the
    1/(H*W)-scaled squared magnitudes so they satisfy Parseval against the
    spatial domain.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"need a grayscale H×W image with H,W >= 2, got {img.shape}")
    h, w = img.shape
    spec = np.fft.fftshift(np.fft.fft2(img))
    magnitude = np.abs(spec)
    power = magnitude**2 / (h * w)
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    radius = np.hypot(fy[:, None], fx[None, :]) / 0.5  # fraction of Nyquist
    low = radius < low_cut
    high = radius >= high_cut
    mid = ~low & ~high
    bands = {
        "low": float(power[low].sum()),
        "mid": float(power[mid].sum()),
        "high": float(power[high].sum()),
    }
    return Spectrum(magnitude=magnitude, total_energy=float(power.sum()), band_energies=bands)


def enhance_input(
    image: np.ndarray, boxes: BoxSet, cfg, seed: int
) -> tuple[np.ndarray, AugmentDecision]:
    """Area statistic -> branch selection -> chosen augmentation.

    ``boxes`` are the candidate detections of the previous stage's teacher;
    ``cfg`` supplies the threshold and the per-branch knobs.
    """
    area = area_of_boxes(boxes, cfg.score_floor)
    decision = select_augmentation(area, cfg.lambda_thresh)
    if decision.branch == BIG_OBJECT_CROP:
        enhanced = apply_random_crop(image, cfg.crop_min_keep, cfg.crop_max_keep, seed)
    else:
        enhanced = apply_gaussian_noise(image, cfg.sigma, cfg.noise_prob, seed)
    return enhanced, decision
