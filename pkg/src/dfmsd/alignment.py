"""Semantic feature alignment: standardization and Pearson-based level losses.

Teacher and student features are standardized to zero mean and unit variance
per pyramid level, then pulled together with a mean-squared error. For
standardized vectors that MSE equals 2*(1 - Pearson correlation), which the
tests use as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import FeatureMap, FeaturePyramid

# variance floor: keeps constant features finite without bending non-degenerate ones
_VAR_EPS = 1e-24


@dataclass(frozen=True, eq=False)
class StandardizedFeature:
    """Standardized C×H×W data plus the removed global mean and std."""

    data: torch.Tensor
    mu: float
    sd: float


def standardize(feat: FeatureMap, per_channel: bool = False) -> StandardizedFeature:
    """Subtract the mean and divide by the std of a feature map.

    Scope is global over all C*H*W entries by default; ``per_channel``
    standardizes each channel separately (the recorded mu/sd stay global).
    Constant inputs map to all zeros with sd reported as 0.
    """
    x = feat.data
    mu_g = x.mean()
    sd_g = torch.sqrt(((x - mu_g) ** 2).mean())
    if per_channel:
        mu = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mu) ** 2).mean(dim=(1, 2), keepdim=True)
        data = (x - mu) / torch.sqrt(var + _VAR_EPS)
    else:
        var = ((x - mu_g) ** 2).mean()
        data = (x - mu_g) / torch.sqrt(var + _VAR_EPS)
    sd_val = float(sd_g)
    return StandardizedFeature(data=data, mu=float(mu_g), sd=0.0 if sd_val < 1e-12 else sd_val)


def pearson(s, t) -> float:
    """Pearson correlation of two flattened vectors, in [-1, 1].

    Degenerate (constant) inputs yield 0 rather than an error so that
    early-training features never abort a run.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if s.size != t.size:
        raise ValueError(f"length mismatch: {s.size} vs {t.size}")
    if s.size < 2:
        raise ValueError("need at least 2 elements")
    sc = s - s.mean()
    tc = t - t.mean()
    denom = max(np.sqrt((sc * sc).sum()), 1e-12) * max(np.sqrt((tc * tc).sum()), 1e-12)
    return float(np.clip((sc * tc).sum() / denom, -1.0, 1.0))


def sfa_loss(
    teacher: FeaturePyramid,
    student: FeaturePyramid,
    levels: set[int] | None = None,
    per_channel: bool = False,
) -> torch.Tensor:
    """Mean over selected levels of the MSE between standardized features.

    Student levels must already be channel-aligned to the teacher. ``levels``
    defaults to all pyramid levels; an empty or out-of-range selection is an
    error.
    """
    if len(teacher) != len(student):
        raise ValueError(f"pyramid length mismatch: {len(teacher)} vs {len(student)}")
    if levels is None:
        levels = set(range(len(teacher)))
    levels = set(int(l) for l in levels)
    if not levels:
        raise ValueError("level set is empty")
    bad = [l for l in levels if l < 0 or l >= len(teacher)]
    if bad:
        raise ValueError(f"level ids out of range: {sorted(bad)}")

    total = None
    for l in sorted(levels):
        t_map, s_map = teacher[l], student[l]
        if t_map.data.shape != s_map.data.shape:
            raise ValueError(
                f"level {l} shape mismatch: teacher {tuple(t_map.data.shape)} "
                f"vs student {tuple(s_map.data.shape)}"
            )
        t_std = standardize(t_map, per_channel=per_channel).data
        s_std = standardize(s_map, per_channel=per_channel).data
        mse = ((t_std - s_std) ** 2).mean()
        total = mse if total is None else total + mse
    return total / len(levels)
