"""Configuration schema, validation, and YAML round-tripping.

A config file is a single YAML document with nested sections; every unset
field falls back to the defaults below. ``load_config`` collects *all*
invariant violations into one error so a bad file is fixed in one pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import TinyDetectorSpec


class ConfigError(ValueError):
    """Raised on unparseable or invariant-violating configuration."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class StageSpec:
    """One stage of the weak-to-strong schedule."""

    teacher_id: str
    enable_masking_enhancement: bool = False
    enable_semantic_alignment: bool = False
    steps: int = 200


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    learning_rate: float = 0.02


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "coco"
    path: str | None = None  # annotation file for kind="coco"
    num_images: int = 64
    image_size: int = 64
    size_mix: float = 0.5


@dataclass(frozen=True)
class TeacherConfig:
    detector: TinyDetectorSpec = field(default_factory=TinyDetectorSpec)
    strength_rank: int = 1
    checkpoint: str | None = None
    pretrain_steps: int = 300


def _default_stages() -> tuple[StageSpec, ...]:
    return (
        StageSpec(teacher_id="weak", enable_masking_enhancement=False,
                  enable_semantic_alignment=True, steps=200),
        StageSpec(teacher_id="strong", enable_masking_enhancement=True,
                  enable_semantic_alignment=True, steps=200),
    )


def _default_teachers() -> dict[str, TeacherConfig]:
    return {
        "weak": TeacherConfig(
            detector=TinyDetectorSpec(width_multiplier=1.5, head_style="anchor"),
            strength_rank=1,
        ),
        "strong": TeacherConfig(
            detector=TinyDetectorSpec(width_multiplier=2.0, head_style="anchor"),
            strength_rank=2,
        ),
    }


@dataclass(frozen=True)
class DistillConfig:
    """All hyperparameters plus the per-stage teacher/toggle plan."""

    tau: float = 0.5  # attention temperature
    rho: float = 0.5  # masking ratio
    lambda_thresh: float = 0.5  # box-area threshold for the augment branch
    sigma: float = 0.1  # noise std-dev, pixel-intensity units
    alpha: float = 5.0e-7  # distillation weight in the total loss
    beta: float = 2.5e-7  # masking-enhancement weight inside the distill loss
    stages: tuple[StageSpec, ...] = field(default_factory=_default_stages)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    # masking-enhancement knobs
    noise_prob: float = 0.5
    score_floor: float = 0.3
    crop_min_keep: float = 0.5
    crop_max_keep: float = 0.9
    # semantic alignment knobs
    sfa_weight: float = 1.0
    sfa_per_channel: bool = False
    sfa_levels: tuple[int, ...] | None = None  # None = all levels
    # training plumbing
    batch_size: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    student: TinyDetectorSpec = field(default_factory=TinyDetectorSpec)
    teachers: dict[str, TeacherConfig] = field(default_factory=_default_teachers)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def validate(self) -> list[str]:
        """Return every violated invariant, naming the offending field."""
        problems = []
        if self.tau <= 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if not (0.0 < self.rho < 1.0):
            problems.append(f"rho out of (0,1): {self.rho}")
        if not (0.0 < self.lambda_thresh <= 1.0):
            problems.append(f"lambda_thresh out of (0,1]: {self.lambda_thresh}")
        if self.sigma < 0:
            problems.append(f"sigma must be >= 0, got {self.sigma}")
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if len(self.stages) < 1:
            problems.append("stages must contain at least one entry")
        for i, stage in enumerate(self.stages):
            if stage.steps < 1:
                problems.append(f"stages[{i}].steps must be >= 1, got {stage.steps}")
            if not stage.teacher_id:
                problems.append(f"stages[{i}].teacher_id is empty")
            elif stage.teacher_id not in self.teachers:
                problems.append(
                    f"stages[{i}].teacher_id {stage.teacher_id!r} not in teachers"
                )
        if not (0.0 <= self.noise_prob <= 1.0):
            problems.append(f"noise_prob out of [0,1]: {self.noise_prob}")
        if not (0.0 <= self.score_floor <= 1.0):
            problems.append(f"score_floor out of [0,1]: {self.score_floor}")
        if not (0.0 < self.crop_min_keep <= self.crop_max_keep <= 1.0):
            problems.append(
                f"crop keep range invalid: ({self.crop_min_keep}, {self.crop_max_keep})"
            )
        if self.sfa_weight < 0:
            problems.append(f"sfa_weight must be >= 0, got {self.sfa_weight}")
        if not (0.0 <= self.optimizer.momentum < 1.0):
            problems.append(f"optimizer.momentum out of [0,1): {self.optimizer.momentum}")
        if self.optimizer.learning_rate <= 0:
            problems.append(
                f"optimizer.learning_rate must be positive, got {self.optimizer.learning_rate}"
            )
        if self.optimizer.weight_decay < 0:
            problems.append(
                f"optimizer.weight_decay must be >= 0, got {self.optimizer.weight_decay}"
            )
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.data.kind not in ("synthetic", "coco"):
            problems.append(f"data.kind must be 'synthetic' or 'coco', got {self.data.kind!r}")
        if self.data.kind == "coco" and not self.data.path:
            problems.append("data.path is required when data.kind is 'coco'")
        if self.data.num_images < 1:
            problems.append(f"data.num_images must be >= 1, got {self.data.num_images}")
        if self.data.image_size < 8:
            problems.append(f"data.image_size must be >= 8, got {self.data.image_size}")
        if not (0.0 <= self.data.size_mix <= 1.0):
            problems.append(f"data.size_mix out of [0,1]: {self.data.size_mix}")
        for name, spec in [("student", self.student)] + [
            (f"teachers.{tid}", t.detector) for tid, t in self.teachers.items()
        ]:
            if spec.width_multiplier <= 0:
                problems.append(f"{name}.width_multiplier must be positive")
            if spec.fpn_levels < 1:
                problems.append(f"{name}.fpn_levels must be >= 1")
            if spec.depth < 1:
                problems.append(f"{name}.depth must be >= 1")
            if spec.num_classes < 1:
                problems.append(f"{name}.num_classes must be >= 1")
        for tid, t in self.teachers.items():
            if t.pretrain_steps < 0:
                problems.append(f"teachers.{tid}.pretrain_steps must be >= 0")
        if self.sfa_levels is not None:
            for l in self.sfa_levels:
                if l < 0 or l >= self.student.fpn_levels:
                    problems.append(f"sfa_levels entry {l} out of range")
        return problems


# --- (de)serialization --------------------------------------------------------


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: DistillConfig) -> dict:
    return _to_plain(cfg)


def _build(cls, raw: dict, path: str, problems: list[str]):
    """Construct a dataclass from a dict, flagging unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{path or 'document'} must be a mapping, got {type(raw).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"unknown field {path + key!r}")
            continue
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> DistillConfig:
    problems: list[str] = []
    raw = dict(raw or {})

    stages_raw = raw.pop("stages", None)
    optimizer_raw = raw.pop("optimizer", None)
    data_raw = raw.pop("data", None)
    student_raw = raw.pop("student", None)
    teachers_raw = raw.pop("teachers", None)
    sfa_levels = raw.pop("sfa_levels", "__unset__")

    base = _build(DistillConfig, raw, "", problems)
    kwargs = dataclasses.asdict(base)
    # asdict recursed into the defaults; rebuild the structured parts
    kwargs.pop("stages"), kwargs.pop("optimizer"), kwargs.pop("data")
    kwargs.pop("student"), kwargs.pop("teachers"), kwargs.pop("sfa_levels")

    if stages_raw is not None:
        if not isinstance(stages_raw, list):
            problems.append("stages must be a list")
            stages = _default_stages()
        else:
            stages = tuple(_build(StageSpec, s, f"stages[{i}].", problems)
                           for i, s in enumerate(stages_raw))
    else:
        stages = _default_stages()

    optimizer = _build(OptimizerConfig, optimizer_raw, "optimizer.", problems) \
        if optimizer_raw is not None else OptimizerConfig()
    data = _build(DataConfig, data_raw, "data.", problems) \
        if data_raw is not None else DataConfig()
    student = _build(TinyDetectorSpec, student_raw, "student.", problems) \
        if student_raw is not None else TinyDetectorSpec()

    if teachers_raw is not None:
        if not isinstance(teachers_raw, dict):
            problems.append("teachers must be a mapping of id -> teacher")
            teachers = _default_teachers()
        else:
            teachers = {}
            for tid, t_raw in teachers_raw.items():
                t_raw = dict(t_raw or {})
                det_raw = t_raw.pop("detector", None)
                entry = _build(TeacherConfig, t_raw, f"teachers.{tid}.", problems)
                det = _build(TinyDetectorSpec, det_raw, f"teachers.{tid}.detector.", problems) \
                    if det_raw is not None else TinyDetectorSpec()
                teachers[tid] = dataclasses.replace(entry, detector=det)
    else:
        teachers = _default_teachers()

    if sfa_levels in ("__unset__", None):
        levels = None
    else:
        levels = tuple(int(l) for l in sfa_levels)

    try:
        cfg = DistillConfig(
            stages=stages, optimizer=optimizer, data=data, student=student,
            teachers=teachers, sfa_levels=levels, **kwargs,
        )
        problems.extend(cfg.validate())
    except TypeError as exc:
        raise ConfigError(problems + [f"bad field type: {exc}"]) from exc
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> DistillConfig:
    """Parse and validate a YAML config file; unset fields get defaults."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(["config document must be a mapping"])
    return config_from_dict(raw)


def save_config(cfg: DistillConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
