"""Training losses: masked L1, MS-SSIM, gradient, and perceptual terms.

All terms are differentiable with respect to the prediction, accept (S, S)
or batched (B, S, S) tensors, and reduce with means so the weighting is
resolution-independent.  The data range is fixed at 1.0 throughout
(volumes are min-max normalized upstream).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoder import StructuralEncoder

__all__ = [
    "LossWeights",
    "LossReport",
    "masked_l1",
    "ms_ssim_loss",
    "ms_ssim_index",
    "auto_scale_count",
    "gradient_loss",
    "perceptual_loss",
    "default_perceptual_taps",
    "total_loss",
]

# Canonical five-scale exponents; truncated and renormalized when an image
# supports fewer scales.
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective; all nonnegative, one positive."""

    lambda_l1: float = 1.0
    lambda_ssim: float = 0.5
    lambda_grad: float = 0.1
    lambda_perc: float = 0.05

    def __post_init__(self):
        vals = (self.lambda_l1, self.lambda_ssim, self.lambda_grad, self.lambda_perc)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative, got {vals}")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    """Per-term scalars and their weighted total (kept as autograd tensors)."""

    l1: torch.Tensor
    ms_ssim: torch.Tensor
    grad: torch.Tensor
    perc: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {
            "l1": float(self.l1.detach()),
            "ms_ssim": float(self.ms_ssim.detach()),
            "grad": float(self.grad.detach()),
            "perc": float(self.perc.detach()),
            "total": float(self.total.detach()),
        }


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0)
    if x.dim() == 3:
        return x
    raise ValueError(f"expected (S, S) or (B, S, S), got shape {tuple(x.shape)}")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _check_mask(mask: torch.Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0/1)")


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over voxels where the mask is 1; 0 if none are."""
    _check_pair(pred, target)
    _check_mask(mask)
    pred_b, target_b = _as_batched(pred), _as_batched(target)
    m = _as_batched(mask.to(pred.dtype)).expand_as(pred_b)
    denom = m.sum()
    if denom == 0:
        return torch.zeros((), dtype=pred.dtype, device=pred.device)
    return ((pred_b - target_b).abs() * m).sum() / denom


def _gaussian_window(dtype, device) -> torch.Tensor:
    coords = torch.arange(_WIN_SIZE, dtype=dtype, device=device) - (_WIN_SIZE - 1) / 2
    g = torch.exp(-(coords**2) / (2 * _WIN_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # Separable valid-mode Gaussian filtering on (B, 1, H, W).
    x = F.conv2d(x, win.view(1, 1, 1, -1))
    return F.conv2d(x, win.view(1, 1, -1, 1))


def _ssim_maps(x: torch.Tensor, y: torch.Tensor, data_range: float, win: torch.Tensor):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    sig_x = _blur(x * x, win) - mu_x * mu_x
    sig_y = _blur(y * y, win) - mu_y * mu_y
    sig_xy = _blur(x * y, win) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2 * sig_xy + c2) / (sig_x + sig_y + c2)
    return lum, cs


def auto_scale_count(size: int, max_scales: int = 5) -> int:
    """Largest scale count (capped at 5) the image size supports: every
    scale needs the 11-tap window to fit after repeated halving."""
    m = 0
    while m < max_scales and size >= 2**m * _WIN_SIZE:
        m += 1
    if m == 0:
        raise ValueError(f"image size {size} too small for even one {_WIN_SIZE}-tap scale")
    return m


def ms_ssim_index(
    pred: torch.Tensor, target: torch.Tensor, scales: int = 5, data_range: float = 1.0
) -> torch.Tensor:
    """Multi-scale SSIM of two images (no masking), in [−1, 1], typically [0, 1].

    Contrast-structure terms are collected per scale (2x average pooling
    between scales); luminance enters at the coarsest scale only.  Per-scale
    exponents are the canonical five, renormalized when truncated.
    """
    _check_pair(pred, target)
    x, y = _as_batched(pred).unsqueeze(1), _as_batched(target).unsqueeze(1)
    if not 1 <= scales <= 5:
        raise ValueError(f"scales must lie in [1, 5], got {scales}")
    min_side = min(x.shape[-2:])
    if min_side < 2 ** (scales - 1) * _WIN_SIZE:
        raise ValueError(
            f"image side {min_side} too small for {scales} scales "
            f"(needs >= {2 ** (scales - 1) * _WIN_SIZE})"
        )
    win = _gaussian_window(x.dtype, x.device)
    weights = torch.tensor(_MSSSIM_WEIGHTS[:scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()

    terms = []
    for i in range(scales):
        lum, cs = _ssim_maps(x, y, data_range, win)
        if i < scales - 1:
            terms.append(cs.mean(dim=(1, 2, 3)))
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
        else:
            terms.append((lum * cs).mean(dim=(1, 2, 3)))
    stacked = torch.stack(terms).clamp(min=0)  # guard fractional powers
    return (stacked ** weights.view(-1, 1)).prod(dim=0).mean()


def ms_ssim_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor | None = None,
    scales: int = 5,
) -> torch.Tensor:
    """1 − MS-SSIM of the mask-multiplied images; data range fixed at 1.0."""
    _check_pair(pred, target)
    if mask is not None:
        _check_mask(mask)
        m = mask.to(pred.dtype)
        pred = pred * m
        target = target * m
    return 1.0 - ms_ssim_index(pred, target, scales=scales, data_range=1.0)


def gradient_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 mismatch of forward-difference image gradients along both axes."""
    _check_pair(pred, target)
    p, t = _as_batched(pred), _as_batched(target)
    if min(p.shape[-2:]) < 2:
        raise ValueError("gradient loss needs at least 2 pixels per axis")
    dx = (p[..., :, 1:] - p[..., :, :-1]) - (t[..., :, 1:] - t[..., :, :-1])
    dy = (p[..., 1:, :] - p[..., :-1, :]) - (t[..., 1:, :] - t[..., :-1, :])
    return dx.abs().mean() + dy.abs().mean()


def default_perceptual_taps(encoder: StructuralEncoder) -> tuple[int, int]:
    """Blocks 3 and 6 when the backbone taps them; otherwise its two shallowest taps."""
    taps = encoder.cfg.tap_layers
    if 3 in taps and 6 in taps:
        return (3, 6)
    return taps[:2]


def perceptual_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    encoder: StructuralEncoder,
    tap_layers: tuple[int, ...] | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean absolute distance between frozen-encoder features of pred and target.

    Slices are mask-multiplied (if a mask is given), replicated to three
    channels, standardized, and encoded; the target pass carries no
    gradient.  Tap layers must be among the encoder's captured taps.
    """
    _check_pair(pred, target)
    taps = tap_layers or default_perceptual_taps(encoder)
    for l in taps:
        if not 1 <= l <= encoder.cfg.depth:
            raise ValueError(f"tap layer {l} outside encoder depth {encoder.cfg.depth}")
        if l not in encoder.cfg.tap_layers:
            raise ValueError(f"tap layer {l} not captured by encoder taps {encoder.cfg.tap_layers}")

    if mask is not None:
        _check_mask(mask)
        m = mask.to(pred.dtype)
        pred = pred * m
        target = target * m

    def _encode(x: torch.Tensor, grad: bool) -> dict[int, torch.Tensor]:
        x = _as_batched(x).unsqueeze(1).expand(-1, 3, -1, -1)
        x = encoder.preprocess(x)
        if grad:
            return encoder(x)
        with torch.no_grad():
            return encoder(x)

    feats_pred = _encode(pred, grad=pred.requires_grad)
    feats_target = _encode(target, grad=False)
    loss = torch.zeros((), dtype=pred.dtype, device=pred.device)
    for l in taps:
        loss = loss + (feats_pred[l] - feats_target[l]).abs().mean()
    return loss


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights,
    encoder: StructuralEncoder | None = None,
    perceptual_taps: tuple[int, ...] | None = None,
    ms_ssim_scales: int | None = None,
) -> LossReport:
    """Weighted combination of the four terms.

    Components with zero weight are skipped (reported as 0).  The MS-SSIM
    scale count defaults to what the image size supports (5 at 224, 2 at 32).
    """
    zero = torch.zeros((), dtype=pred.dtype, device=pred.device)
    l1 = masked_l1(pred, target, mask) if weights.lambda_l1 > 0 else zero
    if weights.lambda_ssim > 0:
        scales = ms_ssim_scales or auto_scale_count(min(pred.shape[-2:]))
        ssim = ms_ssim_loss(pred, target, mask, scales=scales)
    else:
        ssim = zero
    grad = gradient_loss(pred, target) if weights.lambda_grad > 0 else zero
    if weights.lambda_perc > 0:
        if encoder is None:
            raise ValueError("perceptual weight is positive but no encoder was given")
        perc = perceptual_loss(pred, target, encoder, perceptual_taps, mask)
    else:
        perc = zero
    total = (
        weights.lambda_l1 * l1
        + weights.lambda_ssim * ssim
        + weights.lambda_grad * grad
        + weights.lambda_perc * perc
    )
    return LossReport(l1=l1, ms_ssim=ssim, grad=grad, perc=perc, total=total)
