"""Training objectives: cross-entropy, seafloor-negative triplet loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

LAMBDA_GRID = (0.1, 0.5, 1.0, 2.0)


class LossError(ValueError):
    pass


@dataclass
class HyperParams:
    margin: float = 1.0
    lam: float = 1.0
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    augment: bool = True

    def validate(self) -> None:
        if not self.margin > 0:
            raise LossError(f"margin must be > 0, got {self.margin}")
        if not self.lam > 0:
            raise LossError(f"lambda must be > 0, got {self.lam}")
        if not self.lr > 0:
            raise LossError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise LossError("epochs and batch_size must be >= 1")


@dataclass
class LossValue:
    ce: torch.Tensor
    triplet: torch.Tensor
    total: torch.Tensor
    lam: float

    def components(self) -> dict[str, float]:
        return {"ce": float(self.ce.detach()), "triplet": float(self.triplet.detach()),
                "total": float(self.total.detach())}


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[label]`` with max-subtraction."""
    if not torch.isfinite(logits).all():
        raise LossError("non-finite logits")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    logz = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels.view(-1, 1)).squeeze(1)
    return (logz - picked).mean()


def triplet_loss(z_a: torch.Tensor, z_p: torch.Tensor, z_n: torch.Tensor,
                 margin: float = 1.0) -> torch.Tensor:
    """Batch mean of ``max(0, |a - p|^2 - |a - n|^2 + margin)``.

    Distances are raw squared Euclidean (no normalization). At the hinge kink
    the subgradient taken is zero.
    """
    if not (z_a.shape == z_p.shape == z_n.shape):
        raise LossError(f"embedding shapes differ: {tuple(z_a.shape)}, {tuple(z_p.shape)}, {tuple(z_n.shape)}")
    if margin <= 0:
        raise LossError("margin must be > 0")
    d_ap = ((z_a - z_p) ** 2).sum(dim=1)
    d_an = ((z_a - z_n) ** 2).sum(dim=1)
    return F.relu(d_ap - d_an + margin).mean()


def total_loss(ce: torch.Tensor | float, triplet: torch.Tensor | float, lam: float) -> LossValue:
    if not lam > 0:
        raise LossError(f"lambda must be > 0, got {lam}")
    # plain floats are promoted to double so logged totals are exact
    ce_t = ce if isinstance(ce, torch.Tensor) else torch.tensor(float(ce), dtype=torch.float64)
    tr_t = triplet if isinstance(triplet, torch.Tensor) else torch.tensor(float(triplet), dtype=torch.float64)
    if not (torch.isfinite(ce_t).all() and torch.isfinite(tr_t).all()):
        raise LossError("non-finite loss component")
    return LossValue(ce=ce_t, triplet=tr_t, total=ce_t + lam * tr_t, lam=lam)
