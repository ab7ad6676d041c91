"""Reconstruction and adversarial losses.

Images are channel-first tensors, either ``(C, H, W)`` or batched
``(N, C, H, W)``; masks follow the same layout with one channel per facial
component. Per-sample losses are averaged over the batch. Every
normalization divides by the pixel count ``H*W`` only; image channels are
summed, never averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ShapeError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7
    lam: float = 100.0
    epsilon_mass: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon_mass <= 0:
            raise ConfigError(f"epsilon_mass must be > 0, got {self.epsilon_mass}")


def _batched(t: torch.Tensor, name: str) -> torch.Tensor:
    if t.dim() == 3:
        return t.unsqueeze(0)
    if t.dim() != 4:
        raise ShapeError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {tuple(t.shape)}")
    return t


def _check_pair(target, predicted):
    if target.shape != predicted.shape:
        raise ShapeError(f"target {tuple(target.shape)} and prediction {tuple(predicted.shape)} differ")
    return _batched(target, "target"), _batched(predicted, "predicted")


def _check_masks(target, masks, c=None):
    masks = _batched(masks, "masks")
    if masks.shape[0] != target.shape[0] or masks.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"masks {tuple(masks.shape)} do not match images {tuple(target.shape)}")
    if c is not None and not 0 <= c < masks.shape[1]:
        raise IndexError(f"component {c} out of range for {masks.shape[1]} components")
    return masks


def global_l1(target: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    y, y_hat = _check_pair(target, predicted)
    h, w = y.shape[-2:]
    return ((y - y_hat).abs().sum(dim=(1, 2, 3)) / (h * w)).mean()


def _masked_abs_sum(y, y_hat, m):
    # m: (N, 1, H, W) broadcast over image channels
    return (y * m - y_hat * m).abs().sum(dim=(1, 2, 3))


def component_global_l1(target, predicted, masks, c: int) -> torch.Tensor:
    y, y_hat = _check_pair(target, predicted)
    m = _check_masks(y, masks, c)[:, c : c + 1]
    h, w = y.shape[-2:]
    return (_masked_abs_sum(y, y_hat, m) / (h * w)).mean()


def component_mass(masks: torch.Tensor, c: int) -> torch.Tensor:
    """Per-sample soft pixel count of component ``c``; shape ``(N,)``."""
    m = _batched(masks, "masks")
    if not 0 <= c < m.shape[1]:
        raise IndexError(f"component {c} out of range for {m.shape[1]} components")
    return m[:, c].sum(dim=(1, 2))


def inverse_frequency(masks: torch.Tensor, c: int) -> torch.Tensor:
    """gamma_c = H*W / mass(c) per sample (inf where the component is absent)."""
    m = _batched(masks, "masks")
    h, w = m.shape[-2:]
    return (h * w) / component_mass(m, c)


def balanced_component_l1(target, predicted, masks, c: int, epsilon_mass: float = 1e-6) -> torch.Tensor:
    """Masked L1 of component ``c`` normalized by the component's own mass.

    Components with mass below ``epsilon_mass`` contribute zero.
    """
    y, y_hat = _check_pair(target, predicted)
    m = _check_masks(y, masks, c)[:, c : c + 1]
    mass = m.sum(dim=(1, 2, 3))
    present = mass >= epsilon_mass
    safe_mass = torch.where(present, mass, torch.ones_like(mass))
    per_sample = _masked_abs_sum(y, y_hat, m) / safe_mass
    return torch.where(present, per_sample, torch.zeros_like(per_sample)).mean()


def compositional_l1(target, predicted, masks, epsilon_mass: float = 1e-6) -> torch.Tensor:
    m = _batched(masks, "masks")
    return sum(
        balanced_component_l1(target, predicted, masks, c, epsilon_mass) for c in range(m.shape[1])
    )


def mixed_reconstruction_loss(target, predicted, masks, weights: LossWeights = LossWeights()) -> torch.Tensor:
    a = weights.alpha
    # endpoints skip the unused term so they match it exactly
    if a == 0.0:
        return global_l1(target, predicted)
    if a == 1.0:
        return compositional_l1(target, predicted, masks, weights.epsilon_mass)
    return a * compositional_l1(target, predicted, masks, weights.epsilon_mass) + (1 - a) * global_l1(
        target, predicted
    )


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise NumericalError(f"{name} contains non-finite values")


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Discriminator and non-saturating generator losses from probability maps.

    Returns ``(loss_d, loss_g)`` with ``loss_d = -mean[log D(real) + log(1 - D(fake))]``
    and ``loss_g = -mean[log D(fake)]``.
    """
    _check_finite(d_real, "d_real")
    _check_finite(d_fake, "d_fake")
    p_real = d_real.clamp(PROB_EPS, 1 - PROB_EPS)
    p_fake = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    loss_d = -(torch.log(p_real).mean() + torch.log1p(-p_fake).mean())
    loss_g = -torch.log(p_fake).mean()
    return loss_d, loss_g


def discriminator_loss_from_logits(real_logits, fake_logits) -> torch.Tensor:
    _check_finite(real_logits, "real logits")
    _check_finite(fake_logits, "fake logits")
    return F.binary_cross_entropy_with_logits(
        real_logits, torch.ones_like(real_logits)
    ) + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))


def generator_adv_loss_from_logits(fake_logits) -> torch.Tensor:
    _check_finite(fake_logits, "fake logits")
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def generator_objective(adv_g, recon, weights: LossWeights = LossWeights()):
    return adv_g + weights.lam * recon
