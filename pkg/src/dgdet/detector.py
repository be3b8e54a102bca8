"""Tiny two-stage reference detector with a separable (theta, phi, beta) parameter split.

theta owns everything that produces features: backbone, proposal heads, and
the shared instance-feature trunk. phi is the instance classifier, beta the
box regressor. Production detectors with the same separability can be swapped
in behind the ``extract`` / ``classify_instances`` / ``regress_boxes`` seams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, nms, roi_align

from .core import BoundingBox

FEATURE_CHANNELS = 32
FEATURE_STRIDE = 8
ANCHOR_SIZES = (12.0, 20.0, 32.0)
MAX_PROPOSALS = 64
RPN_NMS_IOU = 0.7
POOL_SIZE = 4
INSTANCE_DIM = 64
SCORE_THRESHOLD = 0.05
NMS_IOU = 0.5


@dataclass
class ImageFeatures:
    """Backbone output map (C x H' x W') with its pixel stride."""

    map: torch.Tensor
    stride: int


@dataclass
class InstanceFeatures:
    """Per-proposal feature rows aligned with their proposal boxes (xywh tensor)."""

    features: torch.Tensor
    boxes: torch.Tensor


@dataclass
class Detections:
    boxes: list[BoundingBox]
    class_probs: np.ndarray
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class ExtractResult:
    """Everything one forward pass of the extractor produces for an image."""

    features: ImageFeatures
    proposals: torch.Tensor
    instances: InstanceFeatures
    rpn_objectness: torch.Tensor
    rpn_deltas: torch.Tensor


def xywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    x, y, w, h = boxes.unbind(-1)
    return torch.stack([x, y, x + w, y + h], dim=-1)


def xyxy_to_xywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([x1, y1, x2 - x1, y2 - y1], dim=-1)


def clip_boxes(boxes_xywh: torch.Tensor, height: int, width: int, min_size: float = 1.0) -> torch.Tensor:
    """Clip xywh boxes to image bounds, keeping at least ``min_size`` extent."""
    x1, y1, x2, y2 = xywh_to_xyxy(boxes_xywh).unbind(-1)
    x1 = x1.clamp(0.0, width - min_size)
    y1 = y1.clamp(0.0, height - min_size)
    x2 = torch.maximum(x2.clamp(max=float(width)), x1 + min_size)
    y2 = torch.maximum(y2.clamp(max=float(height)), y1 + min_size)
    return xyxy_to_xywh(torch.stack([x1, y1, x2, y2], dim=-1))


def encode_deltas(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Translation/log-scale deltas taking ``proposals`` onto ``targets`` (both xywh)."""
    px, py, pw, ph = proposals.unbind(-1)
    tx, ty, tw, th = targets.unbind(-1)
    pcx, pcy = px + pw / 2, py + ph / 2
    tcx, tcy = tx + tw / 2, ty + th / 2
    return torch.stack([
        (tcx - pcx) / pw,
        (tcy - pcy) / ph,
        torch.log(tw / pw),
        torch.log(th / ph),
    ], dim=-1)


def decode_deltas(proposals: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`encode_deltas`; log-scale terms clamped for stability."""
    px, py, pw, ph = proposals.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    cx = px + pw / 2 + dx * pw
    cy = py + ph / 2 + dy * ph
    w = pw * torch.exp(dw.clamp(max=4.0))
    h = ph * torch.exp(dh.clamp(max=4.0))
    return torch.stack([cx - w / 2, cy - h / 2, w, h], dim=-1)


def pairwise_iou(a_xywh: torch.Tensor, b_xywh: torch.Tensor) -> torch.Tensor:
    """IoU matrix between two xywh box sets."""
    a = xywh_to_xyxy(a_xywh)
    b = xywh_to_xyxy(b_xywh)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a_xywh[:, 2] * a_xywh[:, 3]
    area_b = b_xywh[:, 2] * b_xywh[:, 3]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


class FeatureExtractor(nn.Module):
    """theta: backbone (4 conv stages, stride 8), proposal heads, instance trunk."""

    def __init__(self, image_size: tuple[int, int]):
        super().__init__()
        self.image_size = image_size
        c = FEATURE_CHANNELS
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
        )
        n_anchors = len(ANCHOR_SIZES)
        self.rpn_objectness = nn.Conv2d(c, n_anchors, 1)
        self.rpn_deltas = nn.Conv2d(c, 4 * n_anchors, 1)
        self.instance_trunk = nn.Linear(c * POOL_SIZE * POOL_SIZE, INSTANCE_DIM)
        self.register_buffer("anchors", self._anchor_grid(), persistent=False)

    def _anchor_grid(self) -> torch.Tensor:
        h, w = self.image_size
        fh, fw = math.ceil(h / FEATURE_STRIDE), math.ceil(w / FEATURE_STRIDE)
        ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * FEATURE_STRIDE
        xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * FEATURE_STRIDE
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        grids = []
        for size in ANCHOR_SIZES:
            s = torch.full_like(cx, size)
            grids.append(torch.stack([cx - s / 2, cy - s / 2, s, s], dim=-1).reshape(-1, 4))
        return torch.cat(grids, dim=0)

    def image_features(self, image: torch.Tensor) -> ImageFeatures:
        h, w = self.image_size
        if image.shape != (3, h, w):
            raise ValueError(f"expected image of shape (3, {h}, {w}), got {tuple(image.shape)}")
        return ImageFeatures(map=self.backbone(image[None])[0], stride=FEATURE_STRIDE)

    def propose(self, features: ImageFeatures, extra_boxes: torch.Tensor | None = None):
        """Decode, clip, NMS-filter and rank anchor proposals by objectness.

        Returns (proposal boxes xywh [R, 4], per-anchor objectness logits,
        per-anchor predicted deltas). Proposal coordinates are detached;
        gradients reach theta through the feature map, not the box geometry.
        """
        fmap = features.map[None]
        obj_logits = self.rpn_objectness(fmap)[0]  # [A, H', W']
        deltas = self.rpn_deltas(fmap)[0]
        n_anchors = len(ANCHOR_SIZES)
        fh, fw = obj_logits.shape[1:]
        obj_flat = obj_logits.reshape(-1)
        deltas_flat = (
            deltas.reshape(n_anchors, 4, fh, fw).permute(0, 2, 3, 1).reshape(-1, 4)
        )
        with torch.no_grad():
            h, w = self.image_size
            boxes = decode_deltas(self.anchors, deltas_flat)
            boxes = clip_boxes(boxes, h, w)
            keep = nms(xywh_to_xyxy(boxes), obj_flat.detach(), RPN_NMS_IOU)
            keep = keep[:MAX_PROPOSALS]
            proposals = boxes[keep]
            if extra_boxes is not None and len(extra_boxes):
                proposals = torch.cat([proposals, extra_boxes], dim=0)
        return proposals, obj_flat, deltas_flat

    def instance_features(self, features: ImageFeatures, boxes_xywh: torch.Tensor) -> InstanceFeatures:
        rois = xywh_to_xyxy(boxes_xywh)
        pooled = roi_align(
            features.map[None], [rois], output_size=POOL_SIZE,
            spatial_scale=1.0 / features.stride, aligned=True,
        )
        flat = pooled.reshape(len(boxes_xywh), -1)
        return InstanceFeatures(features=F.relu(self.instance_trunk(flat)), boxes=boxes_xywh)


class InstanceClassifier(nn.Module):
    """phi: per-proposal (K+1)-way class probabilities (index 0 is background)."""

    def __init__(self, n_classes: int, in_dim: int = INSTANCE_DIM, bias: bool = True):
        super().__init__()
        self.head = nn.Linear(in_dim, n_classes + 1, bias=bias)

    def forward(self, instance_features: torch.Tensor) -> torch.Tensor:
        if instance_features.ndim != 2 or instance_features.shape[0] == 0:
            raise ValueError("expected a non-empty [R, D] instance-feature matrix")
        return torch.softmax(self.head(instance_features), dim=-1)


class BoxRegressor(nn.Module):
    """beta: per-proposal refinement deltas in the translation/log-scale encoding."""

    def __init__(self, in_dim: int = INSTANCE_DIM):
        super().__init__()
        self.head = nn.Linear(in_dim, 4)
        # start from identity refinement so untrained boxes stay at their proposals
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, instance_features: torch.Tensor) -> torch.Tensor:
        if instance_features.ndim != 2 or instance_features.shape[0] == 0:
            raise ValueError("expected a non-empty [R, D] instance-feature matrix")
        return self.head(instance_features)


class TinyDetector(nn.Module):
    """Reference detector: theta = FeatureExtractor, phi = classifier, beta = regressor."""

    def __init__(self, n_classes: int, image_size: tuple[int, int]):
        super().__init__()
        self.n_classes = n_classes
        self.image_size = image_size
        self.extractor = FeatureExtractor(image_size)
        self.classifier = InstanceClassifier(n_classes)
        self.regressor = BoxRegressor()

    # -- parameter collections ------------------------------------------------
    def theta_parameters(self):
        return list(self.extractor.parameters())

    def phi_parameters(self):
        return list(self.classifier.parameters())

    def beta_parameters(self):
        return list(self.regressor.parameters())

    # -- spec operations -------------------------------------------------------
    def extract(self, image: torch.Tensor, gt_boxes: torch.Tensor | None = None) -> "ExtractResult":
        """Features, proposals and pooled instance features for one image [3, H, W].

        During training, ground-truth boxes are appended to the proposals so
        the heads always see positive examples.
        """
        features = self.extractor.image_features(image)
        proposals, obj_logits, rpn_deltas = self.extractor.propose(features, gt_boxes)
        instances = self.extractor.instance_features(features, proposals)
        return ExtractResult(features, proposals, instances, obj_logits, rpn_deltas)

    def classify_instances(self, instances: InstanceFeatures) -> torch.Tensor:
        return self.classifier(instances.features)

    def regress_boxes(self, instances: InstanceFeatures) -> torch.Tensor:
        """Refined boxes (xywh), clipped to the image."""
        deltas = self.regressor(instances.features)
        h, w = self.image_size
        return clip_boxes(decode_deltas(instances.boxes, deltas), h, w)

    @torch.no_grad()
    def detect(self, image: np.ndarray,
               score_threshold: float = SCORE_THRESHOLD,
               nms_iou: float = NMS_IOU) -> Detections:
        """Full inference on one H x W x 3 array in [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            tensor = image_to_tensor(image)
            result = self.extract(tensor)
            probs = self.classify_instances(result.instances)
            boxes = self.regress_boxes(result.instances)

            fg_scores, fg_labels = probs[:, 1:].max(dim=1)
            fg_labels = fg_labels + 1
            keep = fg_scores >= score_threshold
            boxes, probs = boxes[keep], probs[keep]
            fg_scores, fg_labels = fg_scores[keep], fg_labels[keep]
            if len(boxes):
                order = batched_nms(xywh_to_xyxy(boxes), fg_scores, fg_labels, nms_iou)
                boxes, probs = boxes[order], probs[order]
                fg_scores, fg_labels = fg_scores[order], fg_labels[order]
            return Detections(
                boxes=[BoundingBox(*b) for b in boxes.tolist()],
                class_probs=probs.numpy(),
                scores=fg_scores.numpy(),
                labels=fg_labels.numpy(),
            )
        finally:
            self.train(was_training)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 float array in [0, 1] -> float32 tensor [3, H, W]."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def assign_proposals(proposals: torch.Tensor, gt_boxes: torch.Tensor,
                     gt_labels: torch.Tensor, fg_iou: float = 0.5):
    """Match proposals to ground truth for the ROI head.

    Returns (target class per proposal with 0 = background, matched gt index
    per proposal with -1 for background).
    """
    n = len(proposals)
    labels = torch.zeros(n, dtype=torch.long)
    matched = torch.full((n,), -1, dtype=torch.long)
    if len(gt_boxes) == 0:
        return labels, matched
    overlaps = pairwise_iou(proposals, gt_boxes)
    best_iou, best_gt = overlaps.max(dim=1)
    fg = best_iou >= fg_iou
    labels[fg] = gt_labels[best_gt[fg]]
    matched[fg] = best_gt[fg]
    return labels, matched


def rpn_targets(anchors: torch.Tensor, gt_boxes: torch.Tensor,
                fg_iou: float = 0.5, bg_iou: float = 0.3):
    """Objectness targets per anchor: 1 fg, 0 bg, -1 ignore; plus matched gt index."""
    n = len(anchors)
    if len(gt_boxes) == 0:
        return torch.zeros(n, dtype=torch.long), torch.full((n,), -1, dtype=torch.long)
    overlaps = pairwise_iou(anchors, gt_boxes)
    best_iou, best_gt = overlaps.max(dim=1)
    target = torch.full((n,), -1, dtype=torch.long)
    target[best_iou < bg_iou] = 0
    target[best_iou >= fg_iou] = 1
    # the best anchor for each gt is always positive
    best_anchor = overlaps.argmax(dim=0)
    target[best_anchor] = 1
    matched = best_gt.clone()
    matched[target != 1] = -1
    matched[best_anchor] = torch.arange(len(gt_boxes))
    return target, matched
