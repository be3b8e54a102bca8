"""Shared domain types and pure geometric/encoding helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

BACKGROUND_CLASS = 0  # class index reserved for "no object"


class SampleValidationError(ValueError):
    """Raised when a sample violates its dataset schema.

    Carries the full per-field violation list in ``violations``.
    """

    def __init__(self, sample_id: str, violations: Sequence[str]):
        self.sample_id = sample_id
        self.violations = list(violations)
        lines = "; ".join(self.violations)
        super().__init__(f"sample '{sample_id}' failed validation: {lines}")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box (left, top, width, height) in pixel units, top-left origin."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive extent, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got x={self.x}, y={self.y}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)


@dataclass(frozen=True)
class DomainSample:
    """One image with its box/class annotations and a domain label.

    ``image`` is an H x W x 3 float array with values in [0, 1]. ``annotations``
    pairs each box with an object class in 1..K (0 is reserved for background
    and never appears as an annotation). ``annotations`` may be empty.
    """

    image: np.ndarray
    annotations: tuple[tuple[BoundingBox, int], ...]
    domain: int
    id: str

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))


def one_hot_domain(d: int, n: int) -> np.ndarray:
    """One-hot encode domain index ``d`` against ``n`` domains."""
    if not 0 <= d < n:
        raise ValueError(f"domain index {d} out of range for {n} domains")
    v = np.zeros(n, dtype=np.float64)
    v[d] = 1.0
    return v


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; symmetric, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def check_prob_vector(p: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Validate that ``p`` is a probability vector (entries >= 0, sums to 1)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"probability vector must be 1-D, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > atol:
        raise ValueError(f"probability vector sums to {total}, expected 1")
    return p


def validate_sample(sample: DomainSample, schema: tuple[int, int, int, int]) -> DomainSample:
    """Check a sample against schema ``(K, N, H, W)``; return it unchanged if valid.

    All violations are collected and reported together in a
    :class:`SampleValidationError`.
    """
    k, n, h, w = schema
    violations: list[str] = []

    img = sample.image
    if img.ndim != 3 or img.shape[2] != 3:
        violations.append(f"image has shape {img.shape}, expected (H, W, 3)")
    elif img.shape[0] != h or img.shape[1] != w:
        violations.append(f"image is {img.shape[0]}x{img.shape[1]}, schema says {h}x{w}")

    if not 0 <= sample.domain < n:
        violations.append(f"domain label {sample.domain} out of range [0, {n})")

    for i, (box, label) in enumerate(sample.annotations):
        if not 1 <= label <= k:
            violations.append(f"box {i}: class label {label} out of range [1, {k}]")
        if box.x2 > w or box.y2 > h:
            violations.append(
                f"box {i}: ({box.x}, {box.y}, {box.w}, {box.h}) exceeds image bounds {h}x{w}"
            )

    if violations:
        raise SampleValidationError(sample.id, violations)
    return sample
