"""Shared domain types: pyramid features, box sets, and seed derivation.

All types here are immutable after construction and safe to share across
threads. Construction validates the structural invariants once so the rest
of the package can rely on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

TEACHER = "teacher"
STUDENT = "student"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One pyramid level holding a dense C×H×W activation tensor."""

    level_id: int
    data: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor) or self.data.ndim != 3:
            raise ValueError(
                f"feature map data must be a C×H×W tensor, got "
                f"{getattr(self.data, 'shape', type(self.data))}"
            )
        c, h, w = self.data.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"feature map dims must be >= 1, got {c}x{h}x{w}")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def num_elements(self) -> int:
        return self.data.numel()


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered multi-level feature maps from one network.

    Level ids run 0..L-1 and spatial sizes never grow with level_id.
    """

    levels: tuple[FeatureMap, ...]
    source: str  # TEACHER or STUDENT

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        if self.source not in (TEACHER, STUDENT):
            raise ValueError(f"source must be '{TEACHER}' or '{STUDENT}', got {self.source!r}")
        for i, lvl in enumerate(self.levels):
            if lvl.level_id != i:
                raise ValueError(f"level ids must be 0..L-1 in order, got {lvl.level_id} at {i}")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.height > prev.height or cur.width > prev.width:
                raise ValueError(
                    f"spatial sizes must not grow with level_id: "
                    f"level {cur.level_id} is {cur.height}x{cur.width}, "
                    f"previous is {prev.height}x{prev.width}"
                )

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.levels[i]


@dataclass(frozen=True)
class BoxSet:
    """Scored boxes in normalized [0,1] corner coordinates for one image.

    ``labels`` is optional; ground-truth sets carry class ids, teacher
    candidate boxes may omit them.
    """

    boxes: tuple[tuple[float, float, float, float], ...]
    scores: tuple[float, ...]
    image_size: tuple[int, int]  # (height, width) in pixels
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(float(v) for v in b) for b in self.boxes))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        if len(self.boxes) != len(self.scores):
            raise ValueError(
                f"boxes/scores length mismatch: {len(self.boxes)} vs {len(self.scores)}"
            )
        if self.labels is not None and len(self.labels) != len(self.boxes):
            raise ValueError("labels length must match boxes")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        for i, (x0, y0, x1, y1) in enumerate(self.boxes):
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"box {i} is degenerate: ({x0},{y0},{x1},{y1})")
            if x0 < 0.0 or y0 < 0.0 or x1 > 1.0 or y1 > 1.0:
                raise ValueError(f"box {i} outside normalized [0,1] bounds")
        for i, s in enumerate(self.scores):
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"score {i} outside [0,1]: {s}")

    def __len__(self) -> int:
        return len(self.boxes)

    def area(self, i: int) -> float:
        x0, y0, x1, y1 = self.boxes[i]
        return (x1 - x0) * (y1 - y0)

    @staticmethod
    def empty(image_size: tuple[int, int]) -> "BoxSet":
        return BoxSet(boxes=(), scores=(), image_size=image_size, labels=())


def derive_seed(*parts: int) -> int:
    """Deterministically fold integer parts into one 32-bit seed.

    Used to hand every stochastic consumer (mask tie-breaks, noise draws,
    crop geometry, batch order, weight init) its own stream derived from the
    single config seed, so resumed and parallel runs see identical draws.
    """
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
