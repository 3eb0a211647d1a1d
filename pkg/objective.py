"""Pretraining and fine-tuning losses."""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import ConfigError, ContractError, DegenerateMaskError


@dataclass
class LossWeights:
    beta1: float = 0.99
    beta2: float = 0.005

    @classmethod
    def from_beta1(cls, beta1: float) -> "LossWeights":
        """β₂ is kept at (1 − β₁)/2."""
        if not 0.0 <= beta1 <= 1.0:
            raise ConfigError(f"beta1 must lie in [0, 1], got {beta1}")
        return cls(beta1=beta1, beta2=(1.0 - beta1) / 2.0)

    def validate(self) -> None:
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self}")


@dataclass
class LossReport:
    pixel: float
    connectome: float
    nonconnectome: float
    total: float
    sigma_g1: float = float("nan")
    sigma_g2: float = float("nan")

    def as_row(self) -> Dict[str, float]:
        return {
            "L_pixel": self.pixel,
            "L_c": self.connectome,
            "L_nc": self.nonconnectome,
            "L_all": self.total,
        }


@dataclass
class MixupDraw:
    lam: float
    permutation: np.ndarray
    alpha: float = 0.8


def pixel_loss(y_mask: torch.Tensor, v_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every masked token entry."""
    if y_mask.numel() == 0:
        raise DegenerateMaskError("pixel loss over an empty masked set")
    if y_mask.shape != v_mask.shape:
        raise ContractError(f"shape mismatch {tuple(y_mask.shape)} vs {tuple(v_mask.shape)}")
    return F.mse_loss(y_mask, v_mask)


def semantic_losses(
    g1: torch.Tensor, g2: Optional[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Connectome and nonconnectome losses over all Gram entries.

    L_c = mean(−log σ(G₁)) = mean(softplus(−G₁))
    L_nc = mean(−log(1 − σ(G₂))) = mean(softplus(G₂))
    """
    l_c = F.softplus(-g1).mean()
    l_nc = F.softplus(g2).mean() if g2 is not None else torch.zeros_like(l_c)
    return l_c, l_nc


def total_loss(
    pixel: torch.Tensor,
    connectome: torch.Tensor,
    nonconnectome: torch.Tensor,
    weights: LossWeights,
    mode: str = "cscrl",
) -> torch.Tensor:
    if mode == "mae":
        return pixel
    return weights.beta1 * pixel + weights.beta2 * (connectome + nonconnectome)


def pretrain_losses(
    outputs: Dict[str, torch.Tensor], weights: LossWeights, mode: str
) -> Tuple[torch.Tensor, LossReport]:
    """L_all for one forward_pretrain output, plus its detached report."""
    l_pixel = pixel_loss(outputs["y_mask"], outputs["target"])
    l_c, l_nc = semantic_losses(outputs["g1"], outputs.get("g2"))
    l_all = total_loss(l_pixel, l_c, l_nc, weights, mode)

    with torch.no_grad():
        sigma_g1 = torch.sigmoid(outputs["g1"]).mean().item()
        sigma_g2 = torch.sigmoid(outputs["g2"]).mean().item() if "g2" in outputs else float("nan")
    report = LossReport(
        pixel=l_pixel.item(),
        connectome=l_c.item(),
        nonconnectome=l_nc.item(),
        total=l_all.item(),
        sigma_g1=sigma_g1,
        sigma_g2=sigma_g2,
    )
    return l_all, report


def smooth_labels(labels: torch.Tensor, num_classes: int, smoothing: float) -> torch.Tensor:
    """One-hot → 1 − ε + ε/K on the label, ε/K elsewhere."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {smoothing}")
    one_hot = F.one_hot(labels.long(), num_classes).to(torch.get_default_dtype())
    return one_hot * (1.0 - smoothing) + smoothing / num_classes


def classification_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against soft targets."""
    sums = targets.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
        raise ContractError("soft targets must sum to 1 per sample")
    targets = targets.to(logits.dtype)
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def sample_mixup(batch_size: int, alpha: float, rng: np.random.Generator) -> MixupDraw:
    return MixupDraw(
        lam=float(rng.beta(alpha, alpha)),
        permutation=rng.permutation(batch_size),
        alpha=alpha,
    )


def mixup(
    volumes: torch.Tensor, targets: torch.Tensor, draw: MixupDraw
) -> Tuple[torch.Tensor, torch.Tensor]:
    """x̃ = λx + (1 − λ)x_π, same for targets. Batches of one pass through."""
    if volumes.shape[0] < 2:
        return volumes, targets
    perm = torch.as_tensor(draw.permutation, dtype=torch.long)
    lam = draw.lam
    mixed_x = lam * volumes + (1.0 - lam) * volumes[perm]
    mixed_y = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x, mixed_y
