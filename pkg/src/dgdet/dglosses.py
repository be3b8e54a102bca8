"""Domain-generalisation loss terms, gradient reversal, and the heads they train.

Every minimax term is folded into a single minimised scalar via gradient
reversal: the discriminator (or per-domain classifier bank) sees the features
through a reversal layer, so one optimiser step simultaneously fits the head
and pushes the feature extractor the opposite way. All expectation terms are
batch means, making loss magnitudes batch-size invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .detector import FEATURE_CHANNELS, INSTANCE_DIM

_EPS = 1e-12


class NonFiniteLossError(RuntimeError):
    """A loss component came out NaN/Inf; carries the component name."""

    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"loss component '{component}' is non-finite ({value})")


@dataclass(frozen=True)
class GRLConfig:
    """Gradient-reversal coefficient; constant, shared by all adversarial edges."""

    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"reversal coefficient must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class LossWeights:
    """Regularisation constants for the five domain-generalisation terms."""

    alpha1: float = 1.0     # image-level domain adversarial
    alpha2: float = 0.1     # instance-level domain adversarial
    alpha3: float = 1.0     # image/instance consistency
    alpha4: float = 0.001   # entropy regulariser bank
    alpha5: float = 0.05    # stabiliser cross-entropy bank

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def zeros(cls) -> "LossWeights":
        """Plain detector training: all extra terms disabled."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def as_tuple(self):
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5)


@dataclass
class LossBundle:
    """The seven named scalars plus their weighted total."""

    cls: torch.Tensor | float
    reg: torch.Tensor | float
    dadv: torch.Tensor | float
    dins: torch.Tensor | float
    cst: torch.Tensor | float
    erc: torch.Tensor | float
    cel: torch.Tensor | float
    total: torch.Tensor | float

    COMPONENTS = ("cls", "reg", "dadv", "dins", "cst", "erc", "cel")

    def as_floats(self) -> "LossBundle":
        return LossBundle(*(float(getattr(self, f)) for f in (*self.COMPONENTS, "total")))


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x: torch.Tensor, cfg: GRLConfig) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lambda."""
    return _ReverseGradient.apply(x, cfg.lam)


def _nll(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    picked = probs.gather(1, targets.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp(min=_EPS)).mean()


class ImageDomainDiscriminator(nn.Module):
    """Image-level domain probabilities from a globally pooled feature map."""

    def __init__(self, n_domains: int, in_channels: int = FEATURE_CHANNELS, hidden: int = 32):
        super().__init__()
        self.n_domains = n_domains
        self.head = nn.Sequential(
            nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, n_domains))

    def forward(self, feature_maps: torch.Tensor, grl_cfg: GRLConfig | None = None) -> torch.Tensor:
        if feature_maps.ndim == 3:
            feature_maps = feature_maps[None]
        pooled = feature_maps.mean(dim=(2, 3))
        if grl_cfg is not None:
            pooled = grl(pooled, grl_cfg)
        return torch.softmax(self.head(pooled), dim=-1)


class InstanceDomainDiscriminator(nn.Module):
    """Per-proposal domain probabilities from pooled instance features."""

    def __init__(self, n_domains: int, in_dim: int = INSTANCE_DIM, hidden: int = 32):
        super().__init__()
        self.n_domains = n_domains
        self.head = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_domains))

    def forward(self, instance_features: torch.Tensor, grl_cfg: GRLConfig | None = None) -> torch.Tensor:
        if grl_cfg is not None:
            instance_features = grl(instance_features, grl_cfg)
        return torch.softmax(self.head(instance_features), dim=-1)


class ClassifierBank(nn.Module):
    """N domain-indexed linear classifiers over instance features -> K+1 probabilities."""

    def __init__(self, n_domains: int, n_classes: int, in_dim: int = INSTANCE_DIM):
        super().__init__()
        self.n_domains = n_domains
        self.heads = nn.ModuleList(nn.Linear(in_dim, n_classes + 1) for _ in range(n_domains))

    def domain_probs(self, domain: int, features: torch.Tensor, frozen: bool = False) -> torch.Tensor:
        if not 0 <= domain < self.n_domains:
            raise ValueError(f"no classifier for domain {domain} (bank size {self.n_domains})")
        head = self.heads[domain]
        if frozen:
            logits = F.linear(features, head.weight.detach(), head.bias.detach())
        else:
            logits = head(features)
        return torch.softmax(logits, dim=-1)

    def domain_parameters(self, domain: int):
        return list(self.heads[domain].parameters())


# --------------------------------------------------------------------------
# loss terms
# --------------------------------------------------------------------------

def loss_dadv(disc: ImageDomainDiscriminator, feature_maps: torch.Tensor,
              domains: torch.Tensor, grl_cfg: GRLConfig = GRLConfig()) -> torch.Tensor:
    """Image-level domain-adversarial loss.

    Negative log-likelihood of the true domain under the image-level
    discriminator, batch mean. The discriminator input passes through the
    reversal layer, so minimising this trains the discriminator while pushing
    the feature extractor toward domain-indistinguishable features.
    """
    probs = disc(feature_maps, grl_cfg)
    if probs.shape[0] != domains.shape[0]:
        raise ValueError(f"{probs.shape[0]} feature maps vs {domains.shape[0]} domain labels")
    if int(domains.max()) >= probs.shape[1]:
        raise ValueError(f"domain label {int(domains.max())} exceeds discriminator width {probs.shape[1]}")
    return _nll(probs, domains)


def loss_dins(disc: InstanceDomainDiscriminator, instance_features: torch.Tensor,
              domains: torch.Tensor, grl_cfg: GRLConfig = GRLConfig()) -> torch.Tensor:
    """Instance-level domain-adversarial loss over all proposals in the batch."""
    if instance_features.shape[0] == 0:
        raise ValueError("no proposals in the batch; instance-level loss undefined")
    probs = disc(instance_features, grl_cfg)
    if int(domains.max()) >= probs.shape[1]:
        raise ValueError(f"domain label {int(domains.max())} exceeds discriminator width {probs.shape[1]}")
    return _nll(probs, domains)


def loss_cst(p_img: torch.Tensor, p_ins: list[torch.Tensor]) -> torch.Tensor:
    """Consistency between image-level and mean instance-level domain probabilities.

    Per image: L2 norm of mean_i(p_ins_i - p_img); averaged over the images
    of the batch. ``p_img`` is [B, N]; ``p_ins`` holds one [R_b, N] matrix per
    image.
    """
    if p_img.ndim == 1:
        p_img = p_img[None]
    if len(p_ins) != p_img.shape[0]:
        raise ValueError(f"{p_img.shape[0]} image vectors vs {len(p_ins)} instance sets")
    norms = []
    for b, ins in enumerate(p_ins):
        if ins.shape[-1] != p_img.shape[-1]:
            raise ValueError(f"domain dimension mismatch: {ins.shape[-1]} vs {p_img.shape[-1]}")
        if ins.shape[0] == 0:
            raise ValueError("image without proposals; consistency term undefined")
        norms.append(torch.linalg.vector_norm((ins - p_img[b]).mean(dim=0)))
    return torch.stack(norms).mean()


def loss_erc(bank: ClassifierBank, instance_features: torch.Tensor,
             class_targets: torch.Tensor, domains: torch.Tensor,
             grl_cfg: GRLConfig = GRLConfig()) -> torch.Tensor:
    """Entropy-regulariser loss through the per-domain classifier bank.

    Each instance is scored by the classifier of its own domain on reversed
    features: the bank fits its domain while the feature extractor is pushed
    toward class-uninformative per-domain features (the conditional-entropy
    maximisation the equivalence theorem licenses).
    """
    reversed_features = grl(instance_features, grl_cfg)
    losses = []
    for d in domains.unique().tolist():
        rows = domains == d
        probs = bank.domain_probs(int(d), reversed_features[rows])
        picked = probs.gather(1, class_targets[rows].view(-1, 1)).squeeze(1)
        losses.append(-torch.log(picked.clamp(min=_EPS)))
    return torch.cat(losses).mean()


def loss_cel(bank: ClassifierBank, instance_features: torch.Tensor,
             class_targets: torch.Tensor, domains: torch.Tensor,
             phase: str) -> torch.Tensor:
    """Stabiliser cross-entropy through the second per-domain classifier bank.

    phase='fit-own-domain': each instance is scored by its own domain's
    classifier on detached features, so gradients reach only that classifier.
    phase='align-theta': every *other* domain's classifier scores the instance
    with frozen weights, so gradients reach only the feature extractor.
    """
    if phase == "fit-own-domain":
        detached = instance_features.detach()
        losses = []
        for d in domains.unique().tolist():
            rows = domains == d
            probs = bank.domain_probs(int(d), detached[rows])
            picked = probs.gather(1, class_targets[rows].view(-1, 1)).squeeze(1)
            losses.append(-torch.log(picked.clamp(min=_EPS)))
        return torch.cat(losses).mean()
    if phase == "align-theta":
        losses = []
        for d in range(bank.n_domains):
            rows = domains != d
            if not bool(rows.any()):
                continue
            probs = bank.domain_probs(d, instance_features[rows], frozen=True)
            picked = probs.gather(1, class_targets[rows].view(-1, 1)).squeeze(1)
            losses.append(-torch.log(picked.clamp(min=_EPS)))
        if not losses:
            raise ValueError("no (instance, foreign classifier) pairs in the batch")
        return torch.cat(losses).mean()
    raise ValueError(f"unknown phase '{phase}' (expected 'fit-own-domain' or 'align-theta')")


def detection_losses(class_probs: torch.Tensor, target_labels: torch.Tensor,
                     pred_deltas: torch.Tensor, target_deltas: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """ROI-head losses: (classification cross-entropy, positive-box smooth-L1).

    ``class_probs``/``target_labels`` cover all matched proposals (background
    target 0); the delta pair covers positive matches only. With nothing
    matched both terms are zero.
    """
    if class_probs.shape[0] == 0:
        zero = torch.zeros(())
        return zero, zero
    cls = _nll(class_probs, target_labels)
    if pred_deltas.shape[0] == 0:
        return cls, torch.zeros(())
    reg = F.smooth_l1_loss(pred_deltas, target_deltas, reduction="none").sum(dim=-1).mean()
    return cls, reg


def total_loss(cls, reg, dadv, dins, cst, erc, cel, weights: LossWeights) -> LossBundle:
    """Weighted sum of the seven terms; rejects non-finite components by name."""
    components = {"cls": cls, "reg": reg, "dadv": dadv, "dins": dins,
                  "cst": cst, "erc": erc, "cel": cel}
    for name, value in components.items():
        v = float(value)
        if not (v == v and abs(v) != float("inf")):
            raise NonFiniteLossError(name, v)
    a1, a2, a3, a4, a5 = weights.as_tuple()
    total = cls + reg + a1 * dadv + a2 * dins + a3 * cst + a4 * erc + a5 * cel
    return LossBundle(cls=cls, reg=reg, dadv=dadv, dins=dins, cst=cst,
                      erc=erc, cel=cel, total=total)
