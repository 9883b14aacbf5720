from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .model import DenoiserOutput, predict_mask_prob


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    dice_smooth: float = 1.0
    inpaint_prediction_loss: bool = True
    text_to_image_prediction_loss: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"loss.lam: must be >= 0, got {self.lam}")
        if self.dice_smooth < 0:
            raise ConfigError(f"loss.dice_smooth: must be >= 0, got {self.dice_smooth}")


@dataclass
class LossRecord:
    total: torch.Tensor
    seg: torch.Tensor
    dice: torch.Tensor

    def as_floats(self) -> dict:
        return {"seg": float(self.seg), "dice": float(self.dice), "total": float(self.total)}


def seg_dm_loss(eps: torch.Tensor, out: DenoiserOutput) -> torch.Tensor:
    """Mean squared error between the true and the predicted noise"""
    if eps.shape != out.eps_hat.shape:
        raise ValueError(f"eps: shape {tuple(eps.shape)} does not match eps_hat {tuple(out.eps_hat.shape)}")
    return F.mse_loss(out.eps_hat, eps.to(out.eps_hat.dtype))


def per_sample_dice(pred_prob: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft DICE loss per batch item, 1 - (2 sum(p y) + smooth) / (sum(p) + sum(y) + smooth)

    Parameters
    ----------
    pred_prob : torch.Tensor
        (B, ...) probabilities in [0, 1]
    target : torch.Tensor
        (B, ...) binary target mask
    smooth : float, optional
        smoothing constant, by default 1.0

    Returns
    -------
    torch.Tensor
        (B,) losses
    """
    if pred_prob.shape != target.shape:
        raise ValueError(f"target: shape {tuple(target.shape)} does not match pred_prob {tuple(pred_prob.shape)}")
    if torch.any(pred_prob < 0) or torch.any(pred_prob > 1):
        raise ValueError("pred_prob: values must lie in [0, 1]")
    target = target.to(pred_prob.dtype)
    dims = tuple(range(1, pred_prob.ndim))
    intersection = (pred_prob * target).sum(dim=dims)
    denominator = pred_prob.sum(dim=dims) + target.sum(dim=dims)
    return 1.0 - (2.0 * intersection + smooth) / (denominator + smooth)


def dice_loss(pred_prob: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft DICE loss of one grid (any shape), treating every element as one set member"""
    return per_sample_dice(pred_prob.reshape(1, -1), target.reshape(1, -1), smooth)[0]


def combine_losses(seg: torch.Tensor, dice: torch.Tensor, lam: float) -> torch.Tensor:
    """seg + lam * dice"""
    return seg + lam * dice


def total_loss(
    eps: torch.Tensor,
    out: DenoiserOutput,
    target_mask: torch.Tensor,
    cfg: LossConfig,
    apply_prediction_loss: Union[bool, torch.Tensor] = True,
) -> LossRecord:
    """Noise regression plus lambda-weighted mask prediction loss

    Parameters
    ----------
    eps : torch.Tensor
        (B, C, H, W) true noise
    out : DenoiserOutput
        denoiser output
    target_mask : torch.Tensor
        (B, 1, H, W) exact instance masks
    cfg : LossConfig
        loss weights
    apply_prediction_loss : Union[bool, torch.Tensor], optional
        whether the mask head is supervised, globally or as a (B,) 0/1 tensor per item, by default True

    Returns
    -------
    LossRecord
        total loss with its seg and dice components (dice is 0 when no item is supervised)
    """
    seg = seg_dm_loss(eps, out)
    batch = out.mask_logits.shape[0]
    if isinstance(apply_prediction_loss, torch.Tensor):
        weights = apply_prediction_loss.to(device=seg.device, dtype=seg.dtype).reshape(batch)
    else:
        weights = torch.full((batch,), float(bool(apply_prediction_loss)), dtype=seg.dtype, device=seg.device)

    if not bool(weights.any()):
        dice = torch.zeros((), dtype=seg.dtype, device=seg.device)
        return LossRecord(total=seg, seg=seg, dice=dice)

    per_item = per_sample_dice(predict_mask_prob(out), target_mask, cfg.dice_smooth)
    dice = (per_item * weights).sum() / weights.sum()
    return LossRecord(total=combine_losses(seg, dice, cfg.lam), seg=seg, dice=dice)
