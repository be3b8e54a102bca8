"""Detection evaluation: per-class AP, mAP, instance-weighted WmAP, and WADA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, iou
from .toydata import DomainDataset

WADA_ACCURACY_DEFINITION = (
    "per-image TP / (TP + FP + FN) with class-aware greedy matching at IoU 0.5, "
    "averaged over the images of each domain"
)


@dataclass(frozen=True)
class Prediction:
    """One predicted box for one image."""

    image_id: str
    class_id: int
    score: float
    box: BoundingBox

    def sort_key(self):
        # content-based tie-break so equal-score predictions rank deterministically
        return (-self.score, self.image_id, self.class_id, *self.box.as_xywh())


@dataclass(frozen=True)
class MatchResult:
    """TP/FP flags for score-ranked predictions of one class, plus missed GT count."""

    tp: np.ndarray
    fp: np.ndarray
    n_ground_truth: int

    @property
    def n_unmatched_ground_truth(self) -> int:
        return self.n_ground_truth - int(self.tp.sum())


def match_class_predictions(
    predictions: list[Prediction],
    ground_truths: dict[str, list[BoundingBox]],
    iou_threshold: float,
) -> MatchResult:
    """Greedily match score-ranked predictions of a single class to ground truth.

    Each ground-truth box absorbs at most one prediction; a prediction is a TP
    if its best unmatched same-image ground truth reaches the IoU threshold.
    """
    ranked = sorted(predictions, key=Prediction.sort_key)
    matched = {img: [False] * len(boxes) for img, boxes in ground_truths.items()}
    n_gt = sum(len(b) for b in ground_truths.values())

    tp = np.zeros(len(ranked), dtype=bool)
    for i, pred in enumerate(ranked):
        gt_boxes = ground_truths.get(pred.image_id, [])
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gt_boxes):
            if matched[pred.image_id][j]:
                continue
            overlap = iou(pred.box, gt)
            if overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = True
            matched[pred.image_id][best_j] = True
    return MatchResult(tp=tp, fp=~tp, n_ground_truth=n_gt)


def average_precision(
    predictions: list[Prediction],
    ground_truths: dict[str, list[BoundingBox]],
    iou_threshold: float = 0.5,
) -> float | None:
    """All-point interpolated AP for a single class, or None with no ground truth.

    Area under the precision envelope of the PR curve built from greedy
    matching at ``iou_threshold``.
    """
    n_gt = sum(len(b) for b in ground_truths.values())
    if n_gt == 0:
        return None
    if not predictions:
        return 0.0

    match = match_class_predictions(predictions, ground_truths, iou_threshold)
    cum_tp = np.cumsum(match.tp.astype(np.int64))
    cum_fp = np.cumsum(match.fp.astype(np.int64))
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)

    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(recall)):
        if recall[i] > prev_recall:
            ap += (recall[i] - prev_recall) * envelope[i]
            prev_recall = recall[i]
    return float(ap)


def summarize(per_class_ap: dict[int, float | None], instance_counts: dict[int, int]) -> tuple[float, float]:
    """Aggregate per-class APs into (mean mAP, instance-weighted WmAP).

    Classes without ground truth (AP None) are excluded from both means;
    zero-GT and zero-AP stay distinguishable upstream.
    """
    present = {c: ap for c, ap in per_class_ap.items() if ap is not None}
    if not present:
        raise ValueError("no class has ground-truth instances; mAP undefined")
    mean_map = float(np.mean(list(present.values())))
    weights = np.array([instance_counts[c] for c in present], dtype=np.float64)
    aps = np.array([present[c] for c in present], dtype=np.float64)
    wmap = float(np.sum(weights * aps) / np.sum(weights))
    return mean_map, wmap


def wada(per_domain_accuracy: dict[int, float], per_domain_image_counts: dict[int, int]) -> float:
    """Weighted average domain accuracy, weights = per-domain image counts."""
    if not per_domain_accuracy:
        raise ValueError("no domains to aggregate")
    weights = np.array([per_domain_image_counts[d] for d in per_domain_accuracy], dtype=np.float64)
    accs = np.array(list(per_domain_accuracy.values()), dtype=np.float64)
    return float(np.sum(weights * accs) / np.sum(weights))


def image_accuracy(
    predictions: list[Prediction],
    annotations: list[tuple[BoundingBox, int]],
    iou_threshold: float = 0.5,
) -> float:
    """Per-image detection accuracy TP / (TP + FP + FN), class-aware matching.

    An image with neither ground truth nor predictions counts as perfect.
    """
    classes = {p.class_id for p in predictions} | {label for _, label in annotations}
    tp = fp = fn = 0
    for c in classes:
        preds_c = [p for p in predictions if p.class_id == c]
        gts_c = {"img": [box for box, label in annotations if label == c]}
        match = match_class_predictions(
            [Prediction("img", c, p.score, p.box) for p in preds_c], gts_c, iou_threshold
        )
        tp += int(match.tp.sum())
        fp += int(match.fp.sum())
        fn += match.n_unmatched_ground_truth
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


@dataclass(frozen=True)
class MetricReport:
    """Aggregated detection metrics, stratified by domain."""

    per_class_ap: dict[int, float | None]
    mean_map: float
    wmap: float
    per_domain_accuracy: dict[int, float]
    per_domain_image_counts: dict[int, int]
    wada: float
    instance_counts: dict[int, int]
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]
    iou_threshold: float
    metadata: dict = field(default_factory=lambda: {"wada_accuracy_definition": WADA_ACCURACY_DEFINITION})

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {self.class_names[c - 1]: ap for c, ap in self.per_class_ap.items()},
            "mean_map": self.mean_map,
            "wmap": self.wmap,
            "per_domain_accuracy": {self.domain_names[d]: a for d, a in self.per_domain_accuracy.items()},
            "per_domain_image_counts": {self.domain_names[d]: n for d, n in self.per_domain_image_counts.items()},
            "wada": self.wada,
            "instance_counts": {self.class_names[c - 1]: n for c, n in self.instance_counts.items()},
            "iou_threshold": self.iou_threshold,
            "metadata": self.metadata,
        }

    def table(self) -> str:
        rows = [f"{'class':<12} {'AP':>8} {'instances':>10}"]
        for c in sorted(self.per_class_ap):
            ap = self.per_class_ap[c]
            ap_str = f"{ap:.4f}" if ap is not None else "absent"
            rows.append(f"{self.class_names[c - 1]:<12} {ap_str:>8} {self.instance_counts.get(c, 0):>10}")
        rows.append(f"{'mAP':<12} {self.mean_map:>8.4f}")
        rows.append(f"{'WmAP':<12} {self.wmap:>8.4f}")
        rows.append("")
        rows.append(f"{'domain':<12} {'accuracy':>8} {'images':>10}")
        for d in sorted(self.per_domain_accuracy):
            rows.append(
                f"{self.domain_names[d]:<12} {self.per_domain_accuracy[d]:>8.4f} "
                f"{self.per_domain_image_counts[d]:>10}"
            )
        rows.append(f"{'WADA':<12} {self.wada:>8.4f}")
        return "\n".join(rows)


def evaluate_predictions(
    predictions: list[Prediction],
    dataset: DomainDataset,
    iou_threshold: float = 0.5,
) -> MetricReport:
    """Score a prediction set against a labelled multi-domain dataset."""
    preds_by_class: dict[int, list[Prediction]] = {c: [] for c in range(1, dataset.n_classes + 1)}
    for p in predictions:
        if p.class_id not in preds_by_class:
            raise ValueError(f"prediction class {p.class_id} outside dataset range 1..{dataset.n_classes}")
        preds_by_class[p.class_id].append(p)

    gts_by_class: dict[int, dict[str, list[BoundingBox]]] = {c: {} for c in preds_by_class}
    instance_counts = {c: 0 for c in preds_by_class}
    preds_by_image: dict[str, list[Prediction]] = {}
    for p in predictions:
        preds_by_image.setdefault(p.image_id, []).append(p)

    for sample in dataset.samples():
        for box, label in sample.annotations:
            gts_by_class[label].setdefault(sample.id, []).append(box)
            instance_counts[label] += 1

    per_class_ap = {
        c: average_precision(preds_by_class[c], gts_by_class[c], iou_threshold)
        for c in preds_by_class
    }
    mean_map, wmap_val = summarize(per_class_ap, instance_counts)

    per_domain_accuracy: dict[int, float] = {}
    per_domain_counts: dict[int, int] = {}
    for d, collection in enumerate(dataset.domains):
        accs = [
            image_accuracy(preds_by_image.get(s.id, []), list(s.annotations), iou_threshold)
            for s in collection
        ]
        per_domain_counts[d] = len(collection)
        per_domain_accuracy[d] = float(np.mean(accs)) if accs else 0.0

    return MetricReport(
        per_class_ap=per_class_ap,
        mean_map=mean_map,
        wmap=wmap_val,
        per_domain_accuracy=per_domain_accuracy,
        per_domain_image_counts=per_domain_counts,
        wada=wada(per_domain_accuracy, per_domain_counts),
        instance_counts=instance_counts,
        class_names=tuple(dataset.class_names),
        domain_names=tuple(dataset.domain_names),
        iou_threshold=iou_threshold,
    )


def evaluate(model, dataset: DomainDataset, iou_threshold: float = 0.5) -> MetricReport:
    """Run ``model.detect`` over every image and score the results."""
    predictions = []
    for sample in dataset.samples():
        det = model.detect(sample.image)
        for box, label, score in zip(det.boxes, det.labels, det.scores):
            predictions.append(Prediction(sample.id, int(label), float(score), box))
    return evaluate_predictions(predictions, dataset, iou_threshold)


def save_predictions(predictions: list[Prediction], path) -> None:
    """Write predictions as a JSON list of {image_id, class, score, x, y, w, h}."""
    records = [
        {"image_id": p.image_id, "class": p.class_id, "score": p.score, **dict(zip("xywh", p.box.as_xywh()))}
        for p in predictions
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2, sort_keys=True)


def load_predictions(path) -> list[Prediction]:
    with open(path, encoding="utf-8") as f:
        records = json.load(f)
    return [
        Prediction(r["image_id"], int(r["class"]), float(r["score"]),
                   BoundingBox(r["x"], r["y"], r["w"], r["h"]))
        for r in records
    ]
