"""Multi-scale generation decoder.

The fused center-slice tokens are reshaped to a coarse (dim, g, g) map and
progressively upsampled to the model resolution.  At each stage the
current features are bilinearly upsampled, optionally concatenated with a
bilinearly resized skip map (the center slice of a fused skip tensor), and
refined by 3x3 conv + group norm + GELU.  A final 3x3 conv produces the
single-channel prediction; no output activation is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .slicing import ValidMask

__all__ = [
    "DecoderStage",
    "DecoderConfig",
    "MultiScaleDecoder",
    "make_decoder_config",
    "collapse_window",
    "decode",
]


@dataclass(frozen=True)
class DecoderStage:
    resolution: int
    skip_layer: int | None
    out_channels: int


@dataclass(frozen=True)
class DecoderConfig:
    grid: int  # patch-grid side: coarse map is (token_dim, grid, grid)
    out_size: int
    token_dim: int
    stages: tuple[DecoderStage, ...]
    groupnorm_groups: int = 8

    def __post_init__(self):
        res = [self.grid] + [s.resolution for s in self.stages]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"stage resolutions must strictly increase, got {res[1:]}")
        if not self.stages or self.stages[-1].resolution != self.out_size:
            raise ValueError(f"stages must end at out_size {self.out_size}")
        skips = [s.skip_layer for s in self.stages if s.skip_layer is not None]
        if len(skips) != len(set(skips)):
            raise ValueError(f"skip layers assigned more than once: {skips}")

    @property
    def skip_layers(self) -> tuple[int, ...]:
        return tuple(s.skip_layer for s in self.stages if s.skip_layer is not None)


def make_decoder_config(
    grid: int,
    out_size: int,
    token_dim: int,
    base_channels: int,
    skip_layers: tuple[int, ...] = (),
    groupnorm_groups: int = 8,
) -> DecoderConfig:
    """Dyadic stage schedule from the patch grid up to the output size.

    Channels halve from ``base_channels`` stage by stage.  Deeper taps are
    consumed at coarser resolutions: ``skip_layers`` (given deepest first)
    are assigned to stages in order; remaining stages take no skip.
    """
    resolutions = []
    r = grid
    while r < out_size:
        r = min(r * 2, out_size)
        resolutions.append(r)
    if not resolutions or resolutions[-1] != out_size:
        raise ValueError(f"cannot reach {out_size} from grid {grid} by doubling")
    stages = []
    ch = base_channels
    for i, res in enumerate(resolutions):
        skip = skip_layers[i] if i < len(skip_layers) else None
        stages.append(DecoderStage(res, skip, ch))
        ch = max(ch // 2, 1)
    return DecoderConfig(grid, out_size, token_dim, tuple(stages), groupnorm_groups)


def collapse_window(tokens: torch.Tensor) -> torch.Tensor:
    """Select the center slice of a (K, P, D) or (B, K, P, D) token tensor.

    The decoder predicts the center slice only, so the K fused slices
    reduce to the row at index (K-1)/2.
    """
    k = tokens.shape[-3]
    if k % 2 == 0:
        raise ValueError(f"window size must be odd, got K={k}")
    return tokens.select(-3, (k - 1) // 2)


def _num_groups(preferred: int, channels: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class _DecodeStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(_num_groups(groups, out_channels), out_channels)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class MultiScaleDecoder(nn.Module):
    """Progressive upsampler from (P, dim) center-slice tokens to (S, S)."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = cfg.token_dim
        for stage in cfg.stages:
            skip_ch = cfg.token_dim if stage.skip_layer is not None else 0
            stages.append(_DecodeStage(in_ch + skip_ch, stage.out_channels, cfg.groupnorm_groups))
            in_ch = stage.out_channels
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(in_ch, 1, kernel_size=3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.bias)

    def _tokens_to_map(self, tokens: torch.Tensor) -> torch.Tensor:
        b, p, d = tokens.shape
        g = self.cfg.grid
        if p != g * g:
            raise ValueError(f"got {p} tokens but the patch grid is {g}x{g}")
        return tokens.transpose(1, 2).reshape(b, d, g, g)

    def forward(
        self, main: torch.Tensor, skips: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        """Decode (P, dim) or (B, P, dim) tokens; skips hold matching
        center-slice token tensors keyed by tap layer."""
        skips = skips or {}
        single = main.dim() == 2
        if single:
            main = main.unsqueeze(0)
            skips = {l: t.unsqueeze(0) for l, t in skips.items()}
        x = self._tokens_to_map(main)
        for stage_cfg, stage in zip(self.cfg.stages, self.stages):
            x = F.interpolate(
                x, size=stage_cfg.resolution, mode="bilinear", align_corners=False
            )
            if stage_cfg.skip_layer is not None:
                if stage_cfg.skip_layer not in skips:
                    raise KeyError(
                        f"decoder stage at {stage_cfg.resolution} needs skip layer "
                        f"{stage_cfg.skip_layer}, got {sorted(skips)}"
                    )
                s = self._tokens_to_map(skips[stage_cfg.skip_layer])
                s = F.interpolate(
                    s, size=stage_cfg.resolution, mode="bilinear", align_corners=False
                )
                x = torch.cat([x, s], dim=1)
            x = stage(x)
        out = self.head(x).squeeze(1)
        return out.squeeze(0) if single else out


def decode(
    module: MultiScaleDecoder,
    main: torch.Tensor,
    skips: dict[int, torch.Tensor] | None = None,
    mask: ValidMask | None = None,
) -> torch.Tensor:
    """Decode center-slice tokens to an (S, S) prediction.

    If a mask is given, voxels outside its in-plane valid region are
    zeroed (the default all-ones mask leaves the output untouched).
    """
    out = module(main, skips)
    if mask is not None:
        out = out * torch.from_numpy(mask.in_plane_mask).to(out.dtype)
    return out
