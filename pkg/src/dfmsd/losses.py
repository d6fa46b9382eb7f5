"""Scalar training objectives and their composition.

Every distillation term normalizes by the per-level element count, so
gradients stay comparable across pyramid levels of different sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import FeaturePyramid


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Per-step loss decomposition: total = gt + alpha * distill.

    ``distill`` already contains beta * me internally; ``me`` is kept
    separately for logging. Fields may be python floats or 0-dim tensors.
    """

    gt: object
    distill: object
    me: object
    total: object


def feature_distill_loss(teacher: FeaturePyramid, student: FeaturePyramid) -> torch.Tensor:
    """Sum over levels of the element-mean squared teacher/student difference.

    The student pyramid must already be channel-aligned (projected) to the
    teacher.
    """
    if len(teacher) != len(student):
        raise ValueError(f"pyramid length mismatch: {len(teacher)} vs {len(student)}")
    total = None
    for t_map, s_map in zip(teacher, student):
        if t_map.data.shape != s_map.data.shape:
            raise ValueError(
                f"level {t_map.level_id} shape mismatch: "
                f"{tuple(t_map.data.shape)} vs {tuple(s_map.data.shape)}"
            )
        term = ((t_map.data - s_map.data) ** 2).mean()
        total = term if total is None else total + term
    return total


def me_loss(teacher_enh: FeaturePyramid, student_enh_masked: FeaturePyramid) -> torch.Tensor:
    """Masking-enhancement loss: the feature distillation kernel evaluated on
    pyramids computed from the same augmented input."""
    return feature_distill_loss(teacher_enh, student_enh_masked)


def masked_distill_loss(
    teacher: FeaturePyramid,
    reconstructed_student: FeaturePyramid,
    me_term=0.0,
    beta: float = 0.0,
) -> torch.Tensor:
    """Stage distillation loss: reconstruction error plus beta * me_term.

    ``reconstructed_student`` is the masked student pyramid after the
    generation block and channel projection.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return feature_distill_loss(teacher, reconstructed_student) + beta * me_term


def total_loss(gt, distill, alpha: float, me=0.0) -> LossBreakdown:
    """Compose the training objective: total = gt + alpha * distill."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return LossBreakdown(gt=gt, distill=distill, me=me, total=gt + alpha * distill)
