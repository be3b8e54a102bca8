"""Alternating minimax training schedule with parameter freezing and early stopping.

One optimiser owns every parameter collection as a named group; each
sub-step masks the groups it is not allowed to touch by dropping their
gradients, so frozen collections stay bit-identical and momentum state
survives across sub-steps.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import DomainSample
from .detector import (
    TinyDetector,
    assign_proposals,
    encode_deltas,
    image_to_tensor,
    rpn_targets,
)
from .dglosses import (
    ClassifierBank,
    GRLConfig,
    ImageDomainDiscriminator,
    InstanceDomainDiscriminator,
    LossBundle,
    LossWeights,
    NonFiniteLossError,
    loss_cel,
    loss_cst,
    loss_dadv,
    loss_dins,
    loss_erc,
    total_loss,
)
from .metrics import evaluate
from .toydata import DomainDataset, balanced_batches, sample_weights, split_dataset

logger = logging.getLogger("dgdet.trainer")

FRAMEWORK_VERSION = "0.1.0"
CHECKPOINT_VERSION = 1
MAIN_COLLECTIONS = frozenset({"theta", "phi", "beta", "psi_img", "psi_ins"})


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    max_epochs: int = 30
    batch_size: int = 2
    optimizer: str = "adamw"  # "adamw" or "sgd"
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    grl: GRLConfig = field(default_factory=GRLConfig)
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    CONFIG_KEYS = ("max_epochs", "batch_size", "optimizer", "learning_rate",
                   "weight_decay", "momentum", "alpha1", "alpha2", "alpha3",
                   "alpha4", "alpha5", "grl_lambda", "patience", "seed",
                   "val_fraction")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        """Build from a flat key/value mapping; unknown keys are errors."""
        unknown = set(raw) - set(cls.CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        alphas = defaults.weights.as_tuple()
        weights = LossWeights(*(float(raw.get(f"alpha{i+1}", alphas[i])) for i in range(5)))
        return cls(
            max_epochs=int(raw.get("max_epochs", defaults.max_epochs)),
            batch_size=int(raw.get("batch_size", defaults.batch_size)),
            optimizer=str(raw.get("optimizer", defaults.optimizer)),
            learning_rate=float(raw.get("learning_rate", defaults.learning_rate)),
            weight_decay=float(raw.get("weight_decay", defaults.weight_decay)),
            momentum=float(raw.get("momentum", defaults.momentum)),
            weights=weights,
            grl=GRLConfig(float(raw.get("grl_lambda", defaults.grl.lam))),
            patience=int(raw.get("patience", defaults.patience)),
            seed=int(raw.get("seed", defaults.seed)),
            val_fraction=float(raw.get("val_fraction", defaults.val_fraction)),
        )

    def to_dict(self) -> dict:
        a = self.weights.as_tuple()
        return {
            "max_epochs": self.max_epochs, "batch_size": self.batch_size,
            "optimizer": self.optimizer, "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay, "momentum": self.momentum,
            "alpha1": a[0], "alpha2": a[1], "alpha3": a[2], "alpha4": a[3], "alpha5": a[4],
            "grl_lambda": self.grl.lam, "patience": self.patience,
            "seed": self.seed, "val_fraction": self.val_fraction,
        }


@dataclass
class ModelParams:
    """All trainable state: detector (theta, phi, beta), discriminators, banks."""

    detector: TinyDetector
    disc_img: ImageDomainDiscriminator
    disc_ins: InstanceDomainDiscriminator
    erc_bank: ClassifierBank
    cel_bank: ClassifierBank
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]

    def __post_init__(self):
        seen: dict[int, str] = {}
        for name, params in self.collections().items():
            for p in params:
                if id(p) in seen:
                    raise ValueError(f"parameter shared between '{seen[id(p)]}' and '{name}'")
                seen[id(p)] = name

    @property
    def n_classes(self) -> int:
        return self.detector.n_classes

    @property
    def n_domains(self) -> int:
        return self.erc_bank.n_domains

    @property
    def image_size(self) -> tuple[int, int]:
        return self.detector.image_size

    def collections(self) -> dict[str, list[nn.Parameter]]:
        cols = {
            "theta": self.detector.theta_parameters(),
            "phi": self.detector.phi_parameters(),
            "beta": self.detector.beta_parameters(),
            "psi_img": list(self.disc_img.parameters()),
            "psi_ins": list(self.disc_ins.parameters()),
            "erc_bank": list(self.erc_bank.parameters()),
        }
        for d in range(self.n_domains):
            cols[f"cel_{d}"] = self.cel_bank.domain_parameters(d)
        return cols

    def named_modules_by_collection(self) -> dict[str, nn.Module]:
        return {
            "theta": self.detector.extractor,
            "phi": self.detector.classifier,
            "beta": self.detector.regressor,
            "psi_img": self.disc_img,
            "psi_ins": self.disc_ins,
            "erc_bank": self.erc_bank,
            "cel_bank": self.cel_bank,
        }

    def state_snapshot(self) -> dict:
        return {name: copy.deepcopy(m.state_dict())
                for name, m in self.named_modules_by_collection().items()}

    def load_snapshot(self, snapshot: dict) -> None:
        for name, m in self.named_modules_by_collection().items():
            m.load_state_dict(snapshot[name])


def build_model(n_classes: int, n_domains: int, image_size: tuple[int, int], seed: int,
                class_names: tuple[str, ...] | None = None,
                domain_names: tuple[str, ...] | None = None) -> ModelParams:
    """Construct all modules under a fixed torch seed (reproducible init)."""
    torch.manual_seed(seed)
    return ModelParams(
        detector=TinyDetector(n_classes, image_size),
        disc_img=ImageDomainDiscriminator(n_domains),
        disc_ins=InstanceDomainDiscriminator(n_domains),
        erc_bank=ClassifierBank(n_domains, n_classes),
        cel_bank=ClassifierBank(n_domains, n_classes),
        class_names=tuple(class_names or (f"class{i+1}" for i in range(n_classes))),
        domain_names=tuple(domain_names or (f"domain{i}" for i in range(n_domains))),
    )


def make_optimizer(model: ModelParams, config: TrainConfig) -> torch.optim.Optimizer:
    groups = [{"params": params, "name": name} for name, params in model.collections().items()]
    if config.optimizer == "adamw":
        return torch.optim.AdamW(groups, lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    return torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


@dataclass
class TrainState:
    """Mutable bundle handed to the step functions."""

    model: ModelParams
    optimizer: torch.optim.Optimizer
    config: TrainConfig


def _masked_step(state: TrainState, loss: torch.Tensor, allowed: frozenset[str] | set[str]) -> None:
    """Backward + step, dropping gradients of every collection not in ``allowed``."""
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    for group in opt.param_groups:
        if group["name"] not in allowed:
            for p in group["params"]:
                p.grad = None
    opt.step()
    opt.zero_grad(set_to_none=True)


@dataclass
class _ImageForward:
    sample: DomainSample
    features_map: torch.Tensor
    proposals: torch.Tensor
    instance_features: torch.Tensor
    rpn_objectness: torch.Tensor
    rpn_deltas: torch.Tensor
    gt_boxes: torch.Tensor
    gt_labels: torch.Tensor
    roi_labels: torch.Tensor
    roi_matched: torch.Tensor


def _forward_image(state: TrainState, sample: DomainSample) -> _ImageForward:
    detector = state.model.detector
    gt_boxes = torch.tensor([b.as_xywh() for b, _ in sample.annotations],
                            dtype=torch.float32).reshape(-1, 4)
    gt_labels = torch.tensor([label for _, label in sample.annotations], dtype=torch.long)
    result = detector.extract(image_to_tensor(sample.image),
                              gt_boxes if len(gt_boxes) else None)
    roi_labels, roi_matched = assign_proposals(result.proposals, gt_boxes, gt_labels)
    return _ImageForward(
        sample=sample,
        features_map=result.features.map,
        proposals=result.proposals,
        instance_features=result.instances.features,
        rpn_objectness=result.rpn_objectness,
        rpn_deltas=result.rpn_deltas,
        gt_boxes=gt_boxes,
        gt_labels=gt_labels,
        roi_labels=roi_labels,
        roi_matched=roi_matched,
    )


def _detection_terms(state: TrainState, forwards: list[_ImageForward]
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-batch classification/regression losses (ROI head plus proposal heads)."""
    detector = state.model.detector
    anchors = detector.extractor.anchors
    cls_terms, reg_terms = [], []
    for f in forwards:
        probs = detector.classifier(f.instance_features)
        deltas = detector.regressor(f.instance_features)
        pos = f.roi_matched >= 0
        if bool(pos.any()):
            target_deltas = encode_deltas(f.proposals[pos], f.gt_boxes[f.roi_matched[pos]])
            reg_roi = F.smooth_l1_loss(deltas[pos], target_deltas,
                                       reduction="none").sum(dim=-1).mean()
        else:
            reg_roi = torch.zeros(())
        picked = probs.gather(1, f.roi_labels.view(-1, 1)).squeeze(1)
        cls_roi = -torch.log(picked.clamp(min=1e-12)).mean()

        obj_target, rpn_matched = rpn_targets(anchors, f.gt_boxes)
        valid = obj_target >= 0
        targets = obj_target[valid].float()
        n_pos = float(targets.sum())
        pos_weight = torch.tensor(
            max(1.0, min((len(targets) - n_pos) / max(n_pos, 1.0), 20.0)))
        cls_rpn = F.binary_cross_entropy_with_logits(
            f.rpn_objectness[valid], targets, pos_weight=pos_weight)
        anchor_pos = rpn_matched >= 0
        if bool(anchor_pos.any()):
            anchor_targets = encode_deltas(anchors[anchor_pos],
                                           f.gt_boxes[rpn_matched[anchor_pos]])
            reg_rpn = F.smooth_l1_loss(f.rpn_deltas[anchor_pos], anchor_targets,
                                       reduction="none").sum(dim=-1).mean()
        else:
            reg_rpn = torch.zeros(())
        cls_terms.append(cls_roi + cls_rpn)
        reg_terms.append(reg_roi + reg_rpn)
    return torch.stack(cls_terms).mean(), torch.stack(reg_terms).mean()


def _foreground_instances(forwards: list[_ImageForward]):
    """Instance features/classes/domains of foreground-matched proposals, per image."""
    per_image = []
    for f in forwards:
        fg = f.roi_labels > 0
        if bool(fg.any()):
            per_image.append((f, f.instance_features[fg], f.roi_labels[fg]))
    return per_image


def step_main(state: TrainState, batch: list[DomainSample]) -> LossBundle:
    """One optimiser step on the five-term objective; the banks stay untouched."""
    state.model.detector.train()
    w = state.config.weights
    forwards = [_forward_image(state, s) for s in batch]
    cls, reg = _detection_terms(state, forwards)

    zero = torch.zeros(())
    dadv = dins = cst = zero
    if w.alpha1 > 0:
        maps = torch.stack([f.features_map for f in forwards])
        domains = torch.tensor([f.sample.domain for f in forwards], dtype=torch.long)
        dadv = loss_dadv(state.model.disc_img, maps, domains, state.config.grl)

    fg = _foreground_instances(forwards)
    if fg and (w.alpha2 > 0 or w.alpha3 > 0):
        feats = torch.cat([rows for _, rows, _ in fg])
        inst_domains = torch.cat([
            torch.full((len(rows),), f.sample.domain, dtype=torch.long)
            for f, rows, _ in fg])
        if w.alpha2 > 0:
            dins = loss_dins(state.model.disc_ins, feats, inst_domains, state.config.grl)
        if w.alpha3 > 0:
            p_img = state.model.disc_img(torch.stack([f.features_map for f, _, _ in fg]))
            p_ins = [state.model.disc_ins(rows) for _, rows, _ in fg]
            cst = loss_cst(p_img, p_ins)

    bundle = total_loss(cls, reg, dadv, dins, cst, zero, zero, w)
    _masked_step(state, bundle.total, MAIN_COLLECTIONS)
    return bundle.as_floats()


def step_domain_specific(state: TrainState, domain: int,
                         own_batch: list[DomainSample],
                         other_batch: list[DomainSample]) -> dict[str, float]:
    """The three inner-loop updates for one domain.

    (a) fit the domain's stabiliser classifier on its own data (theta fixed);
    (b) entropy-regulariser step on theta and the erc bank (through reversal);
    (c) align theta so other domains' data satisfies the frozen stabilisers.
    Sub-steps with a zero weight are skipped entirely.
    """
    state.model.detector.train()
    w = state.config.weights
    out = {"erc": 0.0, "cel_fit": 0.0, "cel_align": 0.0}

    if w.alpha4 > 0 or w.alpha5 > 0:
        forwards = [_forward_image(state, s) for s in own_batch]
        fg = _foreground_instances(forwards)
        if fg:
            feats = torch.cat([rows for _, rows, _ in fg])
            labels = torch.cat([cls for _, _, cls in fg])
            domains = torch.full((len(feats),), domain, dtype=torch.long)
            if w.alpha5 > 0:
                cel = loss_cel(state.model.cel_bank, feats, labels, domains, "fit-own-domain")
                _masked_step(state, w.alpha5 * cel, {f"cel_{domain}"})
                out["cel_fit"] = float(cel)
            if w.alpha4 > 0:
                erc = loss_erc(state.model.erc_bank, feats, labels, domains, state.config.grl)
                _masked_step(state, w.alpha4 * erc, {"theta", "erc_bank"})
                out["erc"] = float(erc)

    if w.alpha5 > 0:
        forwards = [_forward_image(state, s) for s in other_batch]
        fg = _foreground_instances(forwards)
        if fg:
            feats = torch.cat([rows for _, rows, _ in fg])
            labels = torch.cat([cls for _, _, cls in fg])
            domains = torch.cat([
                torch.full((len(rows),), f.sample.domain, dtype=torch.long)
                for f, rows, _ in fg])
            cel = loss_cel(state.model.cel_bank, feats, labels, domains, "align-theta")
            _masked_step(state, w.alpha5 * cel, {"theta"})
            out["cel_align"] = float(cel)
    return out


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossBundle
    val_metric: float


@dataclass
class TrainHistory:
    records: list[EpochRecord]
    best_epoch: int

    CSV_FIELDS = ("epoch", "cls", "reg", "dadv", "dins", "cst", "erc", "cel",
                  "total", "val_metric")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_FIELDS)
            for r in self.records:
                b = r.losses
                writer.writerow([r.epoch, b.cls, b.reg, b.dadv, b.dins, b.cst,
                                 b.erc, b.cel, b.total, r.val_metric])


def _draw_domain_batch(ds: DomainDataset, domain: int, size: int,
                       rng: np.random.Generator) -> list[DomainSample]:
    collection = ds.domains[domain]
    weights = sample_weights(collection, ds.n_classes)
    picks = rng.choice(len(collection), size=size, replace=True, p=weights)
    return [collection[int(i)] for i in picks]


def _draw_other_batch(ds: DomainDataset, excluded: int, size: int,
                      rng: np.random.Generator) -> list[DomainSample]:
    others = [d for d in range(ds.n_domains) if d != excluded and ds.sizes[d] > 0]
    batch: list[DomainSample] = []
    for i in range(size):
        batch.extend(_draw_domain_batch(ds, others[i % len(others)], 1, rng))
    return batch


def _validation_metric(model: ModelParams, val_ds: DomainDataset) -> float:
    try:
        return evaluate(model.detector, val_ds).mean_map
    except ValueError:
        return 0.0


def _epoch_bundle(main_bundles: list[LossBundle], inner: list[dict[str, float]],
                  weights: LossWeights) -> LossBundle:
    def mean(values):
        return float(np.mean(values)) if values else 0.0

    cls = mean([b.cls for b in main_bundles])
    reg = mean([b.reg for b in main_bundles])
    dadv = mean([b.dadv for b in main_bundles])
    dins = mean([b.dins for b in main_bundles])
    cst = mean([b.cst for b in main_bundles])
    erc = mean([v["erc"] for v in inner])
    cel = mean([v["cel_fit"] + v["cel_align"] for v in inner])
    a1, a2, a3, a4, a5 = weights.as_tuple()
    total = cls + reg + a1 * dadv + a2 * dins + a3 * cst + a4 * erc + a5 * cel
    return LossBundle(cls, reg, dadv, dins, cst, erc, cel, total)


def train(config: TrainConfig, dataset: DomainDataset,
          out_dir=None) -> tuple[ModelParams, TrainHistory]:
    """Run the full alternating schedule and return the best-epoch model.

    Per epoch: every balanced batch takes one five-term main step, then the
    inner loop visits each domain for the three bank updates. Early stopping
    watches the held-out source-split mAP.
    """
    if dataset.n_domains < 2:
        raise ValueError("domain-generalised training needs at least 2 source domains")

    out = Path(out_dir) if out_dir is not None else None
    handler = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)

    try:
        train_ds, val_ds = split_dataset(dataset, config.val_fraction, config.seed)
        model = build_model(dataset.n_classes, dataset.n_domains, dataset.schema,
                            config.seed, dataset.class_names, dataset.domain_names)
        state = TrainState(model, make_optimizer(model, config), config)
        logger.info("training: %d domains, %d classes, %d train / %d val samples",
                    dataset.n_domains, dataset.n_classes, len(train_ds), len(val_ds))

        records: list[EpochRecord] = []
        best_metric = -math.inf
        best_epoch = 0
        best_snapshot = None
        for epoch in range(1, config.max_epochs + 1):
            epoch_seed = (config.seed * 1_000_003 + epoch) % (2**63)
            main_bundles: list[LossBundle] = []
            for step_no, batch in enumerate(
                    balanced_batches(train_ds, config.batch_size, epoch_seed)):
                try:
                    main_bundles.append(step_main(state, batch))
                except NonFiniteLossError as exc:
                    raise RuntimeError(
                        f"aborting at epoch {epoch}, step {step_no}: {exc}") from exc

            inner_rng = np.random.default_rng([config.seed, 7, epoch])
            inner: list[dict[str, float]] = []
            for d in range(train_ds.n_domains):
                own = _draw_domain_batch(train_ds, d, config.batch_size, inner_rng)
                other = _draw_other_batch(train_ds, d, config.batch_size, inner_rng)
                try:
                    inner.append(step_domain_specific(state, d, own, other))
                except NonFiniteLossError as exc:
                    raise RuntimeError(
                        f"aborting at epoch {epoch}, inner loop domain {d}: {exc}") from exc

            val_metric = _validation_metric(model, val_ds)
            bundle = _epoch_bundle(main_bundles, inner, config.weights)
            records.append(EpochRecord(epoch=epoch, losses=bundle, val_metric=val_metric))
            logger.info("epoch %d: total=%.4f cls=%.4f reg=%.4f dadv=%.4f dins=%.4f "
                        "cst=%.4f erc=%.4f cel=%.4f val_mAP=%.4f",
                        epoch, bundle.total, bundle.cls, bundle.reg, bundle.dadv,
                        bundle.dins, bundle.cst, bundle.erc, bundle.cel, val_metric)

            if val_metric > best_metric:
                best_metric = val_metric
                best_epoch = epoch
                best_snapshot = model.state_snapshot()
            elif epoch - best_epoch >= config.patience:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break

        if best_snapshot is not None:
            model.load_snapshot(best_snapshot)
        history = TrainHistory(records=records, best_epoch=best_epoch)

        if out is not None:
            ckpt_dir = out / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(model, ckpt_dir / "best.ckpt")
            history.write_csv(out / "history.csv")
        return model, history
    finally:
        if handler is not None:
            logger.removeHandler(handler)
            handler.close()


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_checkpoint(model: ModelParams, path) -> None:
    """Versioned archive: per-collection state dicts plus a schema record."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": {
            "n_classes": model.n_classes,
            "n_domains": model.n_domains,
            "image_size": list(model.image_size),
            "class_names": list(model.class_names),
            "domain_names": list(model.domain_names),
            "framework_version": FRAMEWORK_VERSION,
        },
        "collections": {name: m.state_dict()
                        for name, m in model.named_modules_by_collection().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Rebuild a model from :func:`save_checkpoint` output."""
    payload = torch.load(path, weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    meta = payload["meta"]
    model = build_model(
        n_classes=int(meta["n_classes"]),
        n_domains=int(meta["n_domains"]),
        image_size=tuple(meta["image_size"]),
        seed=0,
        class_names=tuple(meta["class_names"]),
        domain_names=tuple(meta["domain_names"]),
    )
    for name, module in model.named_modules_by_collection().items():
        module.load_state_dict(payload["collections"][name])
    return model, meta


# --------------------------------------------------------------------------
# feature-invariance probe
# --------------------------------------------------------------------------

def probe_domain_accuracy(model: ModelParams, dataset: DomainDataset, seed: int,
                          train_fraction: float = 0.7, steps: int = 300,
                          lr: float = 0.05) -> float:
    """Held-out domain-classification accuracy of a fresh probe on frozen features.

    Extracts globally pooled backbone features for every image, fits a new
    linear domain classifier on a per-domain split, and reports accuracy on
    the held-out part. Low accuracy (near 1/N) means the features carry
    little domain information.
    """
    extractor = model.detector.extractor
    feats, labels = [], []
    with torch.no_grad():
        for s in dataset.samples():
            fmap = extractor.image_features(image_to_tensor(s.image)).map
            feats.append(fmap.mean(dim=(1, 2)))
            labels.append(s.domain)
    x = torch.stack(feats)
    y = torch.tensor(labels, dtype=torch.long)

    rng = np.random.default_rng([seed, 23])
    train_idx, test_idx = [], []
    for d in range(dataset.n_domains):
        idx = np.flatnonzero(y.numpy() == d)
        order = rng.permutation(idx)
        cut = max(1, int(round(train_fraction * len(order))))
        train_idx.extend(order[:cut].tolist())
        test_idx.extend(order[cut:].tolist())
    if not test_idx:
        raise ValueError("probe needs at least one held-out sample per domain")

    mean = x[train_idx].mean(dim=0)
    std = x[train_idx].std(dim=0).clamp(min=1e-6)
    x = (x - mean) / std

    torch.manual_seed(seed)
    probe = nn.Linear(x.shape[1], dataset.n_domains)
    opt = torch.optim.AdamW(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(probe(x[train_idx]), y[train_idx])
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = probe(x[test_idx]).argmax(dim=1)
    return float((pred == y[test_idx]).float().mean())
