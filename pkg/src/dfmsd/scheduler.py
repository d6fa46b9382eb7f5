"""Stage-wise adaptive training: teacher registry, stage loop, hand-off.

The student learns from a chain of teachers ordered weak to strong. Student
parameters persist across stage boundaries; the optimizer (momentum
buffers) and the trainable distillation blocks (reconstructor, channel
projector) are rebuilt per stage, since the next teacher may expose a
different channel width. Every stochastic choice draws from a stream
derived from (config seed, stage, step, ...), so interrupted runs resume
bit-exactly.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .alignment import sfa_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DistillConfig, StageSpec
from .core import STUDENT, TEACHER, BoxSet, FeatureMap, FeaturePyramid, derive_seed
from .data import DetectionSample
from .losses import masked_distill_loss, me_loss, total_loss
from .masking import (
    ChannelProjector,
    FeatureReconstructor,
    apply_mask,
    build_masks,
    compute_attention,
)
from .augment import enhance_input
from .metrics import MetricsLog, MetricsRecord
from .models import TinyDetector, TinyDetectorSpec, make_detector, pyramid_for_image

logger = logging.getLogger(__name__)

# seed stream tags
_STREAM_STUDENT_INIT = 11
_STREAM_AUX_INIT = 12
_STREAM_BATCH = 21
_STREAM_MASK = 22
_STREAM_MASK_ENH = 23
_STREAM_AUGMENT = 24
_STREAM_PRETRAIN = 31


class SchedulerError(RuntimeError):
    pass


class TrainingDivergence(RuntimeError):
    """Non-finite loss; carries the offending step and its breakdown."""

    def __init__(self, step: int, breakdown: dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass(frozen=True)
class TeacherEntry:
    factory: Callable[[], TinyDetector]
    checkpoint: str | None
    strength_rank: int


class TeacherRegistry:
    """Maps teacher ids to frozen detector instances, built lazily once."""

    def __init__(self):
        self._entries: dict[str, TeacherEntry] = {}
        self._models: dict[str, TinyDetector] = {}

    def register(
        self,
        teacher_id: str,
        factory: Callable[[], TinyDetector],
        strength_rank: int,
        checkpoint: str | None = None,
    ) -> None:
        self._entries[teacher_id] = TeacherEntry(factory, checkpoint, strength_rank)

    def register_model(self, teacher_id: str, model: TinyDetector, strength_rank: int) -> None:
        self.register(teacher_id, lambda: model, strength_rank)

    def __contains__(self, teacher_id: str) -> bool:
        return teacher_id in self._entries

    def strength_rank(self, teacher_id: str) -> int:
        return self._entry(teacher_id).strength_rank

    def _entry(self, teacher_id: str) -> TeacherEntry:
        if teacher_id not in self._entries:
            raise SchedulerError(f"unregistered teacher: {teacher_id!r}")
        return self._entries[teacher_id]

    def resolve(self, teacher_id: str) -> TinyDetector:
        if teacher_id not in self._models:
            entry = self._entry(teacher_id)
            model = entry.factory()
            if entry.checkpoint is not None:
                payload = load_checkpoint(entry.checkpoint)
                model.load_state_dict(payload["model_state"])
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            self._models[teacher_id] = model
        return self._models[teacher_id]

    def validate_order(self, stages: tuple[StageSpec, ...]) -> None:
        """Strength ranks must strictly increase along the stage order."""
        ranks = [self.strength_rank(s.teacher_id) for s in stages]
        for i in range(1, len(ranks)):
            if ranks[i] <= ranks[i - 1]:
                raise SchedulerError(
                    f"teacher strength must increase across stages, got ranks {ranks}"
                )


class TrainState:
    """Mutable training state: student, per-stage optimizer and aux blocks."""

    def __init__(self, student: TinyDetector):
        self.student = student
        self.global_step = 0
        self.stage_index = 0
        self.steps_done_in_stage = 0
        self.optimizer: torch.optim.SGD | None = None
        self.reconstructor: FeatureReconstructor | None = None
        self.projector: ChannelProjector | None = None

    def reset_stage_machinery(self) -> None:
        self.optimizer = None
        self.reconstructor = None
        self.projector = None
        self.steps_done_in_stage = 0


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters in state-dict order."""
    digest = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _stack_images(data: list[DetectionSample]) -> torch.Tensor:
    arr = np.stack([s.image for s in data]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _trainable_params(state: TrainState):
    params = list(state.student.parameters())
    if state.reconstructor is not None:
        params += list(state.reconstructor.parameters())
    if state.projector is not None:
        params += list(state.projector.parameters())
    return params


def _build_optimizer(state: TrainState, cfg: DistillConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        _trainable_params(state),
        lr=cfg.optimizer.learning_rate,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )


def snapshot_candidate_boxes(
    teacher: TinyDetector, data: list[DetectionSample], batch_size: int = 16
) -> list[BoxSet]:
    """Frozen-teacher candidate boxes for every dataset image."""
    images = _stack_images(data)
    out: list[BoxSet] = []
    for start in range(0, len(data), batch_size):
        out.extend(teacher.predict(images[start : start + batch_size]))
    return out


def _distill_terms(
    state: TrainState,
    stage: StageSpec,
    cfg: DistillConfig,
    teacher_feats: list[torch.Tensor],
    student_feats: list[torch.Tensor],
    enh_teacher_feats: list[torch.Tensor] | None,
    enh_student_feats: list[torch.Tensor] | None,
    step: int,
):
    """Per-batch reconstruction, masking-enhancement, and alignment terms."""
    batch = teacher_feats[0].shape[0]
    recon_me_sum = None
    me_sum = None
    sfa_sum = None
    sfa_levels = set(cfg.sfa_levels) if cfg.sfa_levels is not None else None

    for b in range(batch):
        t_pyr = pyramid_for_image(teacher_feats, b, TEACHER)
        s_pyr = pyramid_for_image(student_feats, b, STUDENT)

        recon_maps = []
        proj_maps = []
        for l in range(len(s_pyr)):
            att = compute_attention(
                t_pyr[l], cfg.tau, target_hw=tuple(s_pyr[l].data.shape[1:])
            )
            mask = build_masks(
                att, cfg.rho, derive_seed(cfg.seed, _STREAM_MASK, state.stage_index, step, b, l)
            )
            masked = apply_mask(s_pyr[l], mask)
            regenerated = state.projector(state.reconstructor(masked.data))
            recon_maps.append(FeatureMap(level_id=l, data=regenerated))
            proj_maps.append(FeatureMap(level_id=l, data=state.projector(s_pyr[l].data)))
        recon_pyr = FeaturePyramid(levels=tuple(recon_maps), source=STUDENT)

        me_b = torch.zeros((), dtype=teacher_feats[0].dtype)
        if enh_teacher_feats is not None:
            te_pyr = pyramid_for_image(enh_teacher_feats, b, TEACHER)
            se_pyr = pyramid_for_image(enh_student_feats, b, STUDENT)
            enh_maps = []
            for l in range(len(se_pyr)):
                att = compute_attention(
                    te_pyr[l], cfg.tau, target_hw=tuple(se_pyr[l].data.shape[1:])
                )
                mask = build_masks(
                    att,
                    cfg.rho,
                    derive_seed(cfg.seed, _STREAM_MASK_ENH, state.stage_index, step, b, l),
                )
                masked = apply_mask(se_pyr[l], mask)
                enh_maps.append(
                    FeatureMap(level_id=l, data=state.projector(state.reconstructor(masked.data)))
                )
            me_b = me_loss(te_pyr, FeaturePyramid(levels=tuple(enh_maps), source=STUDENT))

        md_b = masked_distill_loss(t_pyr, recon_pyr, me_term=me_b, beta=cfg.beta)
        recon_me_sum = md_b if recon_me_sum is None else recon_me_sum + md_b
        me_sum = me_b if me_sum is None else me_sum + me_b

        if stage.enable_semantic_alignment:
            proj_pyr = FeaturePyramid(levels=tuple(proj_maps), source=STUDENT)
            sfa_b = sfa_loss(t_pyr, proj_pyr, levels=sfa_levels, per_channel=cfg.sfa_per_channel)
            sfa_sum = sfa_b if sfa_sum is None else sfa_sum + sfa_b

    recon_me = recon_me_sum / batch
    me_term = me_sum / batch
    sfa_term = sfa_sum / batch if sfa_sum is not None else torch.zeros(())
    distill = recon_me + cfg.sfa_weight * sfa_term
    return distill, me_term, sfa_term


def run_stage(
    state: TrainState,
    stage: StageSpec,
    data: list[DetectionSample],
    cfg: DistillConfig,
    registry: TeacherRegistry,
    log: MetricsLog | None = None,
) -> TrainState:
    """Run one distillation stage: stage.steps optimizer steps of
    forward -> attention -> masks -> reconstruct -> losses -> SGD update."""
    teacher = registry.resolve(stage.teacher_id)
    log = log if log is not None else MetricsLog(None)

    if state.reconstructor is None:
        torch.manual_seed(derive_seed(cfg.seed, _STREAM_AUX_INIT, state.stage_index))
        state.reconstructor = FeatureReconstructor(state.student.fpn_channels)
        state.projector = ChannelProjector(state.student.fpn_channels, teacher.fpn_channels)
    if state.optimizer is None:
        state.optimizer = _build_optimizer(state, cfg)

    images = _stack_images(data)
    targets = [s.ground_truth for s in data]
    n = len(data)

    candidate_boxes: list[BoxSet] | None = None
    if stage.enable_masking_enhancement:
        provider_id = stage.teacher_id
        if state.stage_index >= 1:
            provider_id = cfg.stages[state.stage_index - 1].teacher_id
        candidate_boxes = snapshot_candidate_boxes(registry.resolve(provider_id), data)

    for t in range(state.steps_done_in_stage, stage.steps):
        rng = np.random.default_rng(derive_seed(cfg.seed, _STREAM_BATCH, state.stage_index, t))
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = images[idx]
        gts = [targets[i] for i in idx]

        with torch.no_grad():
            teacher_feats = teacher.features(batch)
        student_feats, student_preds = state.student(batch)
        gt_term = state.student.gt_loss(student_preds, gts)

        distill = me_term = sfa_term = torch.zeros(())
        if cfg.alpha > 0:
            enh_teacher_feats = enh_student_feats = None
            if stage.enable_masking_enhancement:
                enhanced = []
                for b, i in enumerate(idx.tolist()):
                    x_hat, _ = enhance_input(
                        data[i].image,
                        candidate_boxes[i],
                        cfg,
                        derive_seed(cfg.seed, _STREAM_AUGMENT, state.stage_index, t, i),
                    )
                    enhanced.append(x_hat)
                enh_batch = torch.from_numpy(
                    np.stack(enhanced).astype(np.float32)
                ).permute(0, 3, 1, 2).contiguous()
                with torch.no_grad():
                    enh_teacher_feats = teacher.features(enh_batch)
                enh_student_feats = state.student.features(enh_batch)
            distill, me_term, sfa_term = _distill_terms(
                state, stage, cfg, teacher_feats, student_feats,
                enh_teacher_feats, enh_student_feats, t,
            )

        breakdown = total_loss(gt_term, distill, cfg.alpha, me=me_term)
        record = MetricsRecord(
            step=state.global_step + 1,
            stage_index=state.stage_index,
            loss_total=float(breakdown.total),
            loss_gt=float(breakdown.gt),
            loss_distill=float(breakdown.distill),
            loss_me=float(breakdown.me),
            loss_sfa=float(sfa_term),
        )
        log.append(record)
        if not np.isfinite(record.loss_total):
            raise TrainingDivergence(
                record.step,
                {
                    "loss_total": record.loss_total,
                    "loss_gt": record.loss_gt,
                    "loss_distill": record.loss_distill,
                    "loss_me": record.loss_me,
                },
            )

        state.optimizer.zero_grad()
        breakdown.total.backward()
        state.optimizer.step()
        state.global_step += 1
        state.steps_done_in_stage = t + 1

    return state


def run_schedule(
    cfg: DistillConfig,
    registry: TeacherRegistry,
    data: list[DetectionSample],
    log: MetricsLog | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Fold run_stage over the configured stages, handing the student forward.

    Student parameters cross stage boundaries unchanged; optimizer state and
    the trainable distillation blocks reset. Stage boundaries are logged
    with a parameter checksum.
    """
    for stage in cfg.stages:
        if stage.teacher_id not in registry:
            raise SchedulerError(f"unregistered teacher: {stage.teacher_id!r}")
    registry.validate_order(cfg.stages)
    log = log if log is not None else MetricsLog(None)

    if state is None:
        state = TrainState(make_detector(cfg.student, derive_seed(cfg.seed, _STREAM_STUDENT_INIT)))

    for si in range(state.stage_index, len(cfg.stages)):
        stage = cfg.stages[si]
        resuming_mid_stage = si == state.stage_index and state.steps_done_in_stage > 0
        state.stage_index = si
        if not resuming_mid_stage:
            state.reset_stage_machinery()
        log.event(
            "stage_start",
            stage_index=si,
            teacher=stage.teacher_id,
            step=state.global_step,
            student_checksum=param_checksum(state.student),
        )
        run_stage(state, stage, data, cfg, registry, log)
        log.event(
            "stage_end",
            stage_index=si,
            teacher=stage.teacher_id,
            step=state.global_step,
            student_checksum=param_checksum(state.student),
        )
        first = False
    return state


# --- plain ground-truth training (teacher pretraining, no-distill baselines) --


def train_detector_gt(
    model: TinyDetector,
    data: list[DetectionSample],
    steps: int,
    cfg: DistillConfig,
    seed: int,
) -> TinyDetector:
    """Train a detector on ground truth only, deterministically."""
    images = _stack_images(data)
    targets = [s.ground_truth for s in data]
    n = len(data)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.optimizer.learning_rate,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )
    for t in range(steps):
        rng = np.random.default_rng(derive_seed(seed, _STREAM_PRETRAIN, t))
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        _, preds = model(images[idx])
        loss = model.gt_loss(preds, [targets[i] for i in idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return model


# --- train-state (de)serialization --------------------------------------------


def save_train_state(state: TrainState, cfg: DistillConfig, path) -> None:
    payload = {
        "kind": "train_state",
        "student_spec": state.student.spec,
        "student_state": state.student.state_dict(),
        "global_step": state.global_step,
        "stage_index": state.stage_index,
        "steps_done_in_stage": state.steps_done_in_stage,
        "optimizer_state": state.optimizer.state_dict() if state.optimizer else None,
        "reconstructor_state": state.reconstructor.state_dict() if state.reconstructor else None,
        "projector_state": state.projector.state_dict() if state.projector else None,
        "projector_shape": (
            (state.projector.conv.in_channels, state.projector.conv.out_channels)
            if state.projector
            else None
        ),
    }
    save_checkpoint(payload, path)


def load_train_state(path, cfg: DistillConfig) -> TrainState:
    payload = load_checkpoint(path)
    if payload.get("kind") != "train_state":
        raise SchedulerError(f"checkpoint at {path} is not a train state")
    student = TinyDetector(payload["student_spec"])
    student.load_state_dict(payload["student_state"])
    state = TrainState(student)
    state.global_step = payload["global_step"]
    state.stage_index = payload["stage_index"]
    state.steps_done_in_stage = payload["steps_done_in_stage"]
    if payload["reconstructor_state"] is not None:
        state.reconstructor = FeatureReconstructor(student.fpn_channels)
        state.reconstructor.load_state_dict(payload["reconstructor_state"])
    if payload["projector_state"] is not None:
        cin, cout = payload["projector_shape"]
        state.projector = ChannelProjector(cin, cout)
        state.projector.load_state_dict(payload["projector_state"])
    if payload["optimizer_state"] is not None:
        state.optimizer = _build_optimizer(state, cfg)
        state.optimizer.load_state_dict(payload["optimizer_state"])
    return state
