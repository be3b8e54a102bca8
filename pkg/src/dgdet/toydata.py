"""Deterministic synthetic multi-domain detection data and the biased batch sampler."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .core import BoundingBox, DomainSample, iou, validate_sample

SHAPE_KINDS = ("disc", "square", "triangle")
MIN_OBJECT_SIZE = 10.0  # px; keeps objects matchable by the reference anchors
MAX_OBJECT_SIZE = 22.0


class DatasetFormatError(ValueError):
    """Raised when a dataset directory violates the ingestion contract."""


@dataclass(frozen=True)
class DomainStyle:
    """Rendering style of one domain: background palette, texture, noise, lighting."""

    background: tuple[tuple[float, float, float], tuple[float, float, float]]
    texture_freq: float
    noise_sigma: float
    illumination: float

    def as_tuple(self):
        return (*self.background[0], *self.background[1],
                self.texture_freq, self.noise_sigma, self.illumination)


@dataclass(frozen=True)
class ToySpec:
    """Parameters of the synthetic benchmark generator."""

    n_source_domains: int
    n_target_domains: int
    classes: tuple[str, ...]
    images_per_domain: int
    image_size: tuple[int, int]
    seed: int
    domain_styles: tuple[DomainStyle, ...] | None = None

    def __post_init__(self):
        if self.n_source_domains < 2:
            raise ValueError("need at least 2 source domains")
        if self.n_target_domains < 0:
            raise ValueError("target domain count must be non-negative")
        if not self.classes:
            raise ValueError("need at least one object class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        unknown = [c for c in self.classes if c not in SHAPE_KINDS]
        if unknown:
            raise ValueError(f"unsupported shape kinds {unknown}; supported: {SHAPE_KINDS}")
        if self.images_per_domain < 1:
            raise ValueError("images_per_domain must be >= 1")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError("image size must be at least 32x32")
        if self.domain_styles is not None:
            total = self.n_source_domains + self.n_target_domains
            if len(self.domain_styles) != total:
                raise ValueError(f"expected {total} domain styles, got {len(self.domain_styles)}")


def toy_spec_from_dict(raw: dict) -> ToySpec:
    """Build a ToySpec from a parsed config mapping; unknown/missing keys are errors."""
    known = {"n_source_domains", "n_target_domains", "classes", "images_per_domain",
             "image_size", "seed", "domain_styles"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown spec keys: {sorted(unknown)}")
    if "seed" not in raw:
        raise ValueError("spec is missing mandatory 'seed' field")
    styles = None
    if raw.get("domain_styles") is not None:
        styles = tuple(
            DomainStyle(
                background=(tuple(s["background"][0]), tuple(s["background"][1])),
                texture_freq=float(s["texture_freq"]),
                noise_sigma=float(s["noise_sigma"]),
                illumination=float(s["illumination"]),
            )
            for s in raw["domain_styles"]
        )
    return ToySpec(
        n_source_domains=int(raw.get("n_source_domains", 3)),
        n_target_domains=int(raw.get("n_target_domains", 1)),
        classes=tuple(raw.get("classes", SHAPE_KINDS)),
        images_per_domain=int(raw.get("images_per_domain", 48)),
        image_size=tuple(raw.get("image_size", (64, 64))),
        seed=int(raw["seed"]),
        domain_styles=styles,
    )


@dataclass(frozen=True)
class DomainDataset:
    """N per-domain sample collections with a shared schema."""

    domains: tuple[tuple[DomainSample, ...], ...]
    n_classes: int
    schema: tuple[int, int]  # (H, W)
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(d) for d in self.domains)

    def samples(self) -> Iterator[DomainSample]:
        for collection in self.domains:
            yield from collection

    def __len__(self) -> int:
        return sum(self.sizes)


def _hsv(h: float, s: float, v: float) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0))


def default_styles(n_source: int, n_target: int, seed: int) -> tuple[DomainStyle, ...]:
    """Deterministic per-domain styles; target styles disjoint from all source styles.

    Source backgrounds occupy hues [0, 0.5), targets [0.58, 0.95), so no
    target style tuple can coincide with a source one.
    """
    rng = np.random.default_rng([seed, 91])
    styles = []
    for i in range(n_source):
        hue = 0.5 * i / n_source + 0.02 * rng.random()
        styles.append(DomainStyle(
            background=(_hsv(hue, 0.5, 0.40), _hsv(hue + 0.04, 0.4, 0.62)),
            texture_freq=0.05 + 0.10 * rng.random(),
            noise_sigma=0.02 + 0.03 * rng.random(),
            illumination=0.85 + 0.25 * rng.random(),
        ))
    for i in range(n_target):
        hue = 0.58 + 0.37 * i / max(n_target, 1) + 0.02 * rng.random()
        styles.append(DomainStyle(
            background=(_hsv(hue, 0.5, 0.40), _hsv(hue + 0.04, 0.4, 0.62)),
            texture_freq=0.05 + 0.10 * rng.random(),
            noise_sigma=0.02 + 0.03 * rng.random(),
            illumination=0.85 + 0.25 * rng.random(),
        ))
    return tuple(styles)


def _background_base(style: DomainStyle, yy: np.ndarray, xx: np.ndarray, h: int) -> np.ndarray:
    """Vertical palette gradient plus diagonal sinusoidal texture, before lighting."""
    c0 = np.array(style.background[0])
    c1 = np.array(style.background[1])
    t = (yy / h)[..., None]
    img = (1 - t) * c0 + t * c1
    img += 0.06 * np.sin(2 * math.pi * style.texture_freq * (xx + yy))[..., None]
    return img


def render_background(style: DomainStyle, image_size: tuple[int, int],
                      rng: np.random.Generator) -> np.ndarray:
    """Object-free image in the given domain style (gradient, texture, noise, gain)."""
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = _background_base(style, yy, xx, h)
    img *= style.illumination
    img += rng.normal(0.0, style.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255).astype(np.uint8).astype(np.float32) / 255.0)


def split_dataset(ds: DomainDataset, val_fraction: float, seed: int
                  ) -> tuple[DomainDataset, DomainDataset]:
    """Per-domain train/validation split with a seeded permutation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 17])
    train_cols, val_cols = [], []
    for collection in ds.domains:
        order = rng.permutation(len(collection))
        n_val = max(1, round(val_fraction * len(collection))) if len(collection) >= 2 else 0
        val_idx = set(order[:n_val].tolist())
        train_cols.append(tuple(s for i, s in enumerate(collection) if i not in val_idx))
        val_cols.append(tuple(s for i, s in enumerate(collection) if i in val_idx))
    make = lambda cols: DomainDataset(
        domains=tuple(cols), n_classes=ds.n_classes, schema=ds.schema,
        class_names=ds.class_names, domain_names=ds.domain_names)
    return make(train_cols), make(val_cols)


def _shape_mask_and_box(kind: str, cx: float, cy: float, size: float,
                        yy: np.ndarray, xx: np.ndarray) -> tuple[np.ndarray, BoundingBox]:
    """Rasterize one shape at pixel centers; the box tightly encloses it."""
    half = size / 2.0
    if kind == "disc":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
        box = BoundingBox(cx - half, cy - half, size, size)
    elif kind == "square":
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        box = BoundingBox(cx - half, cy - half, size, size)
    elif kind == "triangle":
        # isoceles, apex up; height equals the base width
        top = cy - half
        rel = (yy - top) / size
        mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)
        box = BoundingBox(cx - half, top, size, size)
    else:
        raise ValueError(f"unknown shape kind '{kind}'")
    return mask, box


def _render_sample(sample_id: str, domain_idx: int, style: DomainStyle,
                   classes: Sequence[str], image_size: tuple[int, int],
                   rng: np.random.Generator) -> DomainSample:
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = _background_base(style, yy, xx, h)

    annotations = []
    n_objects = int(rng.integers(1, 4))
    for _ in range(n_objects):
        label = int(rng.integers(1, len(classes) + 1))
        kind = classes[label - 1]
        size = float(rng.uniform(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE))
        placed = False
        for _attempt in range(25):
            cx = float(rng.uniform(size / 2 + 1, w - size / 2 - 1))
            cy = float(rng.uniform(size / 2 + 1, h - size / 2 - 1))
            mask, box = _shape_mask_and_box(kind, cx, cy, size, yy, xx)
            if all(iou(box, prev) < 0.2 for prev, _ in annotations):
                placed = True
                break
        if not placed:
            continue
        hue = (label - 1) / len(classes) + 0.15 + rng.uniform(-0.03, 0.03)
        color = np.array(_hsv(hue, 0.85, 0.9 + rng.uniform(-0.1, 0.05)))
        img[mask] = color
        box = BoundingBox(*(round(v, 3) for v in box.as_xywh()))
        annotations.append((box, label))

    img *= style.illumination
    img += rng.normal(0.0, style.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    # quantize exactly as persisted, so in-memory and reloaded samples agree
    quantized = np.round(img * 255).astype(np.uint8)
    return DomainSample(
        image=(quantized.astype(np.float32) / 255.0),
        annotations=tuple(annotations),
        domain=domain_idx,
        id=sample_id,
    )


def _write_split(samples_by_domain: list[list[DomainSample]], domain_names: list[str],
                 classes: Sequence[str], out_dir: Path) -> None:
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"domains": domain_names, "classes": list(classes), "samples": []}
    for collection in samples_by_domain:
        for s in collection:
            file_name = f"images/{s.id}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out_dir / file_name)
            manifest["samples"].append({
                "id": s.id,
                "file": file_name,
                "domain": domain_names[s.domain],
                "boxes": [
                    {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "class": classes[label - 1]}
                    for b, label in s.annotations
                ],
            })
    with open(out_dir / "annotations.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def generate_toy_dataset(spec: ToySpec, out_dir) -> DomainDataset:
    """Render the benchmark to ``out_dir/train`` (and ``out_dir/target``).

    Deterministic given the spec: rerunning with the same spec produces
    byte-identical images and annotation files. Returns the source-domain
    dataset; the held-out target split is written alongside and can be read
    back with :func:`load_dataset`.
    """
    out_dir = Path(out_dir)
    styles = spec.domain_styles or default_styles(
        spec.n_source_domains, spec.n_target_domains, spec.seed)
    source_styles = styles[: spec.n_source_domains]
    target_styles = styles[spec.n_source_domains:]
    overlap = {s.as_tuple() for s in source_styles} & {s.as_tuple() for s in target_styles}
    if overlap:
        raise ValueError("target domain styles must be disjoint from source styles")

    rng = np.random.default_rng(spec.seed)
    source_names = [f"src{i}" for i in range(spec.n_source_domains)]
    target_names = [f"tgt{i}" for i in range(spec.n_target_domains)]

    def render_domains(names: list[str], domain_styles: Sequence[DomainStyle]) -> list[list[DomainSample]]:
        collections = []
        for d, (name, style) in enumerate(zip(names, domain_styles)):
            collections.append([
                _render_sample(f"{name}-{i:04d}", d, style, spec.classes, spec.image_size, rng)
                for i in range(spec.images_per_domain)
            ])
        return collections

    source = render_domains(source_names, source_styles)
    _write_split(source, source_names, spec.classes, out_dir / "train")
    if spec.n_target_domains:
        target = render_domains(target_names, target_styles)
        _write_split(target, target_names, spec.classes, out_dir / "target")

    h, w = spec.image_size
    schema = (len(spec.classes), spec.n_source_domains, h, w)
    for collection in source:
        for s in collection:
            validate_sample(s, schema)
    return DomainDataset(
        domains=tuple(tuple(c) for c in source),
        n_classes=len(spec.classes),
        schema=(h, w),
        class_names=tuple(spec.classes),
        domain_names=tuple(source_names),
    )


def load_dataset(path) -> DomainDataset:
    """Read a dataset directory (``images/`` + ``annotations.json``) and validate it."""
    root = Path(path)
    manifest_path = root / "annotations.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    for key in ("domains", "classes", "samples"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing '{key}' ({manifest_path})")

    domain_names = list(manifest["domains"])
    class_names = list(manifest["classes"])
    domain_index = {name: i for i, name in enumerate(domain_names)}
    class_index = {name: i + 1 for i, name in enumerate(class_names)}

    collections: list[list[DomainSample]] = [[] for _ in domain_names]
    image_size: tuple[int, int] | None = None
    for rec_no, rec in enumerate(manifest["samples"]):
        where = f"{manifest_path}, samples[{rec_no}]"
        image_path = root / rec["file"]
        if not image_path.is_file():
            raise DatasetFormatError(f"image file '{rec['file']}' not found ({where})")
        if rec["domain"] not in domain_index:
            raise DatasetFormatError(f"unknown domain '{rec['domain']}' ({where})")
        img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
        if image_size is None:
            image_size = img.shape[:2]
        elif img.shape[:2] != image_size:
            raise DatasetFormatError(
                f"image size {img.shape[:2]} differs from dataset size {image_size} ({where})")
        try:
            annotations = tuple(
                (BoundingBox(b["x"], b["y"], b["w"], b["h"]), class_index.get(b["class"], -1))
                for b in rec["boxes"]
            )
            sample = DomainSample(
                image=img, annotations=annotations,
                domain=domain_index[rec["domain"]], id=rec["id"],
            )
            h, w = image_size
            validate_sample(sample, (len(class_names), len(domain_names), h, w))
        except ValueError as exc:
            raise DatasetFormatError(f"{exc} ({where})") from exc
        collections[sample.domain].append(sample)

    if image_size is None:
        raise DatasetFormatError(f"dataset has no samples ({manifest_path})")
    return DomainDataset(
        domains=tuple(tuple(c) for c in collections),
        n_classes=len(class_names),
        schema=image_size,
        class_names=tuple(class_names),
        domain_names=tuple(domain_names),
    )


@dataclass(frozen=True)
class BatchPlan:
    """Planned epoch of batches: sample ids per batch plus the class quota targets."""

    batches: tuple[tuple[str, ...], ...]
    class_quota: dict[int, float]
    seed: int


def sample_weights(collection: Sequence[DomainSample], n_classes: int) -> np.ndarray:
    """Inverse-class-frequency weights; annotation-free samples get the mean weight."""
    freq = np.zeros(n_classes + 1)
    for s in collection:
        for _, label in s.annotations:
            freq[label] += 1
    weights = np.zeros(len(collection))
    for i, s in enumerate(collection):
        weights[i] = sum(1.0 / freq[label] for _, label in s.annotations)
    positive = weights[weights > 0]
    fill = positive.mean() if positive.size else 1.0
    weights[weights == 0] = fill
    return weights / weights.sum()


def plan_batches(ds: DomainDataset, batch_size: int, seed: int) -> BatchPlan:
    """Plan one epoch of domain-covering, class-rebalanced batches.

    Every batch takes floor(batch_size / N) samples from each non-empty
    domain; the remainder rotates round-robin over domains. Within a domain,
    samples are drawn with replacement, weighted inversely to class frequency
    so expected per-class instance counts equalize.
    """
    n = ds.n_domains
    if batch_size < n:
        raise ValueError(f"batch_size {batch_size} must be >= domain count {n}")
    if len(ds) == 0:
        raise ValueError("cannot sample from an empty dataset")

    rng = np.random.default_rng(seed)
    nonempty = [d for d in range(n) if ds.sizes[d] > 0]
    quota = batch_size // n
    remainder = batch_size - quota * len(nonempty)
    weights = {d: sample_weights(ds.domains[d], ds.n_classes) for d in nonempty}

    n_batches = math.ceil(len(ds) / batch_size)
    batches = []
    for b in range(n_batches):
        counts = {d: quota for d in nonempty}
        for i in range(remainder):
            counts[nonempty[(b + i) % len(nonempty)]] += 1
        ids: list[str] = []
        for d in nonempty:
            picks = rng.choice(len(ds.domains[d]), size=counts[d], replace=True, p=weights[d])
            ids.extend(ds.domains[d][int(i)].id for i in picks)
        batches.append(tuple(ids))

    total_instances = sum(len(s.annotations) for s in ds.samples())
    quota_per_class = total_instances / ds.n_classes if ds.n_classes else 0.0
    return BatchPlan(
        batches=tuple(batches),
        class_quota={c: quota_per_class for c in range(1, ds.n_classes + 1)},
        seed=seed,
    )


def balanced_batches(ds: DomainDataset, batch_size: int, seed: int) -> Iterator[list[DomainSample]]:
    """Yield the sample batches of :func:`plan_batches`, in order."""
    by_id = {s.id: s for s in ds.samples()}
    plan = plan_batches(ds, batch_size, seed)
    for batch in plan.batches:
        yield [by_id[i] for i in batch]
