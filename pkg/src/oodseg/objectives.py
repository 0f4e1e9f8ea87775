"""Segmentation, risk-regularization and domain-prediction losses.

All functions take and return torch tensors so they can be differentiated;
scalars come back as 0-dim tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_vrex: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("lambda_vrex", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class RiskVector:
    """Per-environment scalar risks, ordered by environment id."""

    def __init__(self, risks: Mapping[int, torch.Tensor]):
        if not risks:
            raise ValueError("a RiskVector needs at least one environment")
        self.env_ids: Tuple[int, ...] = tuple(sorted(risks))
        self._risks = {e: risks[e] for e in self.env_ids}

    def __getitem__(self, env_id) -> torch.Tensor:
        return self._risks[env_id]

    def __len__(self):
        return len(self.env_ids)

    def items(self):
        return self._risks.items()

    def stack(self) -> torch.Tensor:
        return torch.stack([torch.as_tensor(self._risks[e]) for e in self.env_ids])

    def detached(self) -> Dict[int, float]:
        return {e: float(torch.as_tensor(r).detach()) for e, r in self._risks.items()}

    def __repr__(self):
        body = ", ".join(f"{e}: {float(r):.4g}" for e, r in self._risks.items())
        return f"RiskVector({{{body}}})"


def _as_stack(risks) -> torch.Tensor:
    if isinstance(risks, RiskVector):
        return risks.stack()
    if isinstance(risks, torch.Tensor):
        return risks.reshape(-1)
    return torch.stack([torch.as_tensor(r, dtype=torch.float64) for r in risks])


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------- segmentation


def dice_loss(seg_probs: torch.Tensor, masks: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss per sample, averaged over the batch."""
    _check_shapes(seg_probs, masks)
    masks = masks.to(seg_probs.dtype)
    dims = tuple(range(1, seg_probs.dim()))
    inter = (seg_probs * masks).sum(dim=dims)
    denom = seg_probs.sum(dim=dims) + masks.sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(seg_logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    _check_shapes(seg_logits, masks)
    return F.binary_cross_entropy_with_logits(seg_logits, masks.to(seg_logits.dtype))


def seg_loss(seg_logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return dice_loss(torch.sigmoid(seg_logits), masks) + bce_loss(seg_logits, masks)


def per_env_risks(model, batches: Mapping[int, Tuple[torch.Tensor, torch.Tensor]]) -> RiskVector:
    """Segmentation loss evaluated separately on each environment's batch."""
    risks = {}
    for env_id, (images, masks) in batches.items():
        if images.shape[0] == 0:
            raise ValueError(f"empty batch for environment {env_id}")
        logits = model.segment(model.features(images))
        risks[env_id] = seg_loss(logits, masks)
    return RiskVector(risks)


def split_risks(seg_logits: torch.Tensor, masks: torch.Tensor, env_of_sample: torch.Tensor) -> RiskVector:
    """Per-environment risks from one concatenated forward pass."""
    risks = {}
    for env_id in torch.unique(env_of_sample).tolist():
        sel = env_of_sample == env_id
        risks[int(env_id)] = seg_loss(seg_logits[sel], masks[sel])
    return RiskVector(risks)


# ------------------------------------------------------------- risk regularizers


def population_variance(values: torch.Tensor) -> torch.Tensor:
    return ((values - values.mean()) ** 2).mean()


def vrex_total(risks, lam: float, reduction: str = "mean") -> torch.Tensor:
    """``lam * Var(risks) + base`` where base is the mean (or sum) of risks.

    The variance is the population variance over the environments.
    """
    r = _as_stack(risks)
    if reduction == "mean":
        base = r.mean()
    elif reduction == "sum":
        base = r.sum()
    else:
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if lam == 0:
        return base
    return lam * population_variance(r) + base


def worst_env_risk(risks) -> torch.Tensor:
    return _as_stack(risks).max()


def irmv1_penalty(risks, scale: torch.Tensor) -> torch.Tensor:
    """Sum over environments of the squared gradient of each risk w.r.t. ``scale``.

    ``risks`` must have been computed through the dummy multiplier ``scale``
    (a scalar tensor equal to 1 with ``requires_grad=True``).
    """
    values = list(risks.stack()) if isinstance(risks, RiskVector) else list(risks)
    total = torch.zeros((), dtype=scale.dtype)
    for r in values:
        (g,) = torch.autograd.grad(r, scale, create_graph=True, allow_unused=True)
        if g is not None:
            total = total + (g ** 2).sum()
    return total


# ----------------------------------------------------------- domain prediction


def domain_loss(domain_logits: torch.Tensor, domain_labels: torch.Tensor) -> torch.Tensor:
    n_d = domain_logits.shape[1]
    if domain_labels.numel() and (int(domain_labels.min()) < 0 or int(domain_labels.max()) >= n_d):
        raise ValueError(f"domain labels must lie in [0, {n_d})")
    return F.cross_entropy(domain_logits, domain_labels.long())


def confusion_loss(domain_logits: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability over all domains; minimum ``ln n_d`` at uniform rows."""
    if domain_logits.shape[1] < 2:
        raise ValueError("confusion loss needs at least two domains")
    return -F.log_softmax(domain_logits, dim=1).mean()


def domain_prediction_total(seg_risks, l_d, l_conf, weights: LossWeights) -> torch.Tensor:
    return _as_stack(seg_risks).sum() + weights.alpha * l_d + weights.beta * l_conf


def combined_total(seg_risks, lam: float, l_d, l_conf, alpha: float, beta: float) -> torch.Tensor:
    return vrex_total(seg_risks, lam, reduction="sum") + alpha * l_d + beta * l_conf


def chance_accuracy(n_domains: int) -> float:
    return 100.0 / n_domains


def uniform_confusion_minimum(n_domains: int) -> float:
    return math.log(n_domains)
