"""Tiny one-stage detectors: small conv backbone + FPN + dense head.

Teachers and students come from the same family at different widths
(strength ordering by parameter count). Heterogeneity is modeled by the
head style: ``anchor_free`` predicts distances to box edges, ``anchor``
regresses offsets from a per-level prior box. Both expose the same
interface: feature pyramid extraction, box prediction, and a ground-truth
loss (focal classification + L1 box regression).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import STUDENT, TEACHER, BoxSet, FeatureMap, FeaturePyramid
from .evaluate import nms

HEAD_STYLES = ("anchor_free", "anchor")


@dataclass(frozen=True)
class TinyDetectorSpec:
    """Architecture knobs for one detector."""

    width_multiplier: float = 1.0
    depth: int = 1  # convs per backbone stage
    fpn_levels: int = 3
    num_classes: int = 3
    head_style: str = "anchor_free"


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(1, cout),
        nn.ReLU(inplace=True),
    )


class TinyDetector(nn.Module):
    def __init__(self, spec: TinyDetectorSpec):
        super().__init__()
        if spec.head_style not in HEAD_STYLES:
            raise ValueError(f"head_style must be one of {HEAD_STYLES}, got {spec.head_style!r}")
        if spec.fpn_levels < 1 or spec.depth < 1 or spec.num_classes < 1:
            raise ValueError("fpn_levels, depth and num_classes must be >= 1")
        if spec.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        self.spec = spec
        L = spec.fpn_levels
        c0 = max(4, round(8 * spec.width_multiplier))
        self.fpn_channels = max(8, round(16 * spec.width_multiplier))

        # stem at stride 2, then L+1 stride-2 stages; the last L stage
        # outputs feed the FPN (strides 8, 16, ... at L=3)
        stage_channels = [c0] + [c0 * min(2**i, 4) for i in range(1, L + 2)]
        self.stem = _conv_block(3, c0, stride=2)
        stages = []
        for i in range(1, L + 2):
            blocks = [_conv_block(stage_channels[i - 1], stage_channels[i], stride=2)]
            blocks += [
                _conv_block(stage_channels[i], stage_channels[i], stride=1)
                for _ in range(spec.depth - 1)
            ]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self._tap_channels = stage_channels[-L:]

        self.laterals = nn.ModuleList(
            nn.Conv2d(c, self.fpn_channels, kernel_size=1) for c in self._tap_channels
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(self.fpn_channels, self.fpn_channels, kernel_size=3, padding=1)
            for _ in range(L)
        )

        self.tower = _conv_block(self.fpn_channels, self.fpn_channels, stride=1)
        self.cls_head = nn.Conv2d(self.fpn_channels, spec.num_classes, kernel_size=3, padding=1)
        self.box_head = nn.Conv2d(self.fpn_channels, 4, kernel_size=3, padding=1)
        with torch.no_grad():
            self.cls_head.bias.fill_(-2.0)  # background prior

        # normalized prior size per level: 2^(l - L + 1), i.e. 0.25/0.5/1.0 at L=3
        self.anchor_sizes = [2.0 ** (l - L + 1) for l in range(L)]

    # --- feature extraction -------------------------------------------------

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """FPN feature maps, finest first (level 0 largest)."""
        x = self.stem(images)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        taps = taps[-self.spec.fpn_levels :]
        laterals = [lat(t) for lat, t in zip(self.laterals, taps)]
        outs = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            up = F.interpolate(outs[0], size=lat.shape[2:], mode="nearest")
            outs.insert(0, lat + up)
        return [smooth(o) for smooth, o in zip(self.smooth, outs)]

    def forward(self, images: torch.Tensor):
        feats = self.features(images)
        preds = []
        for f in feats:
            t = self.tower(f)
            preds.append((self.cls_head(t), self.box_head(t)))
        return feats, preds

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # --- target assignment ---------------------------------------------------

    def _level_centers(self, h: int, w: int, device, dtype):
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        return ys, xs

    def _assign_level(self, box) -> int:
        x0, y0, x1, y1 = box
        size = max(x1 - x0, y1 - y0)
        return min(
            range(self.spec.fpn_levels),
            key=lambda l: abs(math.log2(max(size, 1e-6) / self.anchor_sizes[l])),
        )

    def gt_loss(self, preds, gt_sets: list[BoxSet]) -> torch.Tensor:
        """Focal classification + L1 box regression against ground truth."""
        device = preds[0][0].device
        dtype = preds[0][0].dtype
        B = preds[0][0].shape[0]
        K = self.spec.num_classes

        cls_targets = [torch.zeros_like(cls) for cls, _ in preds]
        box_targets = [torch.zeros_like(box) for _, box in preds]
        pos_masks = [
            torch.zeros((B, cls.shape[2], cls.shape[3]), dtype=torch.bool, device=device)
            for cls, _ in preds
        ]

        for b, gt in enumerate(gt_sets):
            labels = gt.labels if gt.labels is not None else tuple(0 for _ in range(len(gt)))
            for box, label in zip(gt.boxes, labels):
                l = self._assign_level(box)
                h, w = preds[l][0].shape[2:]
                ys, xs = self._level_centers(h, w, device, dtype)
                x0, y0, x1, y1 = box
                in_y = (ys >= y0) & (ys < y1)
                in_x = (xs >= x0) & (xs < x1)
                inside = in_y[:, None] & in_x[None, :]
                if not bool(inside.any()):
                    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
                    iy = int(torch.argmin((ys - cy).abs()))
                    ix = int(torch.argmin((xs - cx).abs()))
                    inside = torch.zeros_like(inside)
                    inside[iy, ix] = True
                pos_masks[l][b] |= inside
                cls_targets[l][b, label][inside] = 1.0
                iy, ix = torch.nonzero(inside, as_tuple=True)
                cy, cx = ys[iy], xs[ix]
                if self.spec.head_style == "anchor_free":
                    tgt = torch.stack([cx - x0, cy - y0, x1 - cx, y1 - cy])
                else:
                    a = self.anchor_sizes[l]
                    bw, bh = x1 - x0, y1 - y0
                    bcx, bcy = (x0 + x1) / 2, (y0 + y1) / 2
                    tgt = torch.stack(
                        [
                            (bcx - cx) / a,
                            (bcy - cy) / a,
                            torch.full_like(cx, math.log(bw / a)),
                            torch.full_like(cx, math.log(bh / a)),
                        ]
                    )
                box_targets[l][b, :, iy, ix] = tgt.to(dtype)

        num_pos = sum(int(m.sum()) for m in pos_masks)
        norm = max(1, num_pos)

        cls_loss = 0.0
        box_loss = 0.0
        for l, (cls_logit, box_pred) in enumerate(preds):
            target = cls_targets[l]
            p = torch.sigmoid(cls_logit)
            ce = F.binary_cross_entropy_with_logits(cls_logit, target, reduction="none")
            p_t = p * target + (1 - p) * (1 - target)
            alpha_t = 0.25 * target + 0.75 * (1 - target)
            cls_loss = cls_loss + (alpha_t * (1 - p_t) ** 2 * ce).sum()
            mask = pos_masks[l].unsqueeze(1)
            if self.spec.head_style == "anchor_free":
                box_out = torch.sigmoid(box_pred)
            else:
                box_out = box_pred
            box_loss = box_loss + ((box_out - box_targets[l]).abs() * mask).sum()
        return (cls_loss + box_loss) / norm

    # --- inference ------------------------------------------------------------

    @torch.no_grad()
    def predict(
        self,
        images: torch.Tensor,
        score_thresh: float = 0.05,
        nms_iou: float = 0.5,
        max_dets: int = 100,
    ) -> list[BoxSet]:
        _, preds = self.forward(images)
        B = images.shape[0]
        img_h, img_w = images.shape[2], images.shape[3]
        results = []
        for b in range(B):
            boxes, scores, labels = [], [], []
            for l, (cls_logit, box_pred) in enumerate(preds):
                h, w = cls_logit.shape[2:]
                ys, xs = self._level_centers(h, w, cls_logit.device, cls_logit.dtype)
                prob = torch.sigmoid(cls_logit[b])  # K×h×w
                if self.spec.head_style == "anchor_free":
                    d = torch.sigmoid(box_pred[b])
                    x0 = xs[None, :] - d[0]
                    y0 = ys[:, None] - d[1]
                    x1 = xs[None, :] + d[2]
                    y1 = ys[:, None] + d[3]
                else:
                    a = self.anchor_sizes[l]
                    bcx = xs[None, :] + box_pred[b, 0] * a
                    bcy = ys[:, None] + box_pred[b, 1] * a
                    bw = a * torch.exp(box_pred[b, 2].clamp(-4, 4))
                    bh = a * torch.exp(box_pred[b, 3].clamp(-4, 4))
                    x0, x1 = bcx - bw / 2, bcx + bw / 2
                    y0, y1 = bcy - bh / 2, bcy + bh / 2
                x0 = x0.expand(h, w).clamp(0.0, 1.0)
                y0 = y0.expand(h, w).clamp(0.0, 1.0)
                x1 = x1.expand(h, w).clamp(0.0, 1.0)
                y1 = y1.expand(h, w).clamp(0.0, 1.0)
                best_score, best_cls = prob.max(dim=0)
                keep = best_score >= score_thresh
                iy, ix = torch.nonzero(keep, as_tuple=True)
                for i, j in zip(iy.tolist(), ix.tolist()):
                    bx = (float(x0[i, j]), float(y0[i, j]), float(x1[i, j]), float(y1[i, j]))
                    if bx[0] < bx[2] and bx[1] < bx[3]:
                        boxes.append(bx)
                        scores.append(float(best_score[i, j]))
                        labels.append(int(best_cls[i, j]))
            kept_boxes, kept_scores, kept_labels = [], [], []
            for cls in sorted(set(labels)):
                idx = [i for i, l in enumerate(labels) if l == cls]
                cls_keep = nms([boxes[i] for i in idx], [scores[i] for i in idx], nms_iou)
                for k in cls_keep:
                    kept_boxes.append(boxes[idx[k]])
                    kept_scores.append(scores[idx[k]])
                    kept_labels.append(cls)
            order = sorted(range(len(kept_scores)), key=lambda i: -kept_scores[i])[:max_dets]
            results.append(
                BoxSet(
                    boxes=tuple(kept_boxes[i] for i in order),
                    scores=tuple(min(1.0, kept_scores[i]) for i in order),
                    image_size=(img_h, img_w),
                    labels=tuple(kept_labels[i] for i in order),
                )
            )
        return results


def make_detector(spec: TinyDetectorSpec, seed: int) -> TinyDetector:
    """Build a detector with seed-deterministic initialization."""
    torch.manual_seed(seed)
    return TinyDetector(spec)


def pyramid_for_image(feats: list[torch.Tensor], index: int, source: str) -> FeaturePyramid:
    """View one image of a batched FPN output as a FeaturePyramid."""
    return FeaturePyramid(
        levels=tuple(FeatureMap(level_id=l, data=f[index]) for l, f in enumerate(feats)),
        source=source,
    )
