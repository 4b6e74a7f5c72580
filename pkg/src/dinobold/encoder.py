"""Frozen ViT structural feature extractor.

Each slice of a window is encoded independently by a vision transformer
whose weights never train.  Outputs of selected blocks are captured: the
final block's patch tokens (layer-normalized) form the main token tensor,
earlier taps form the skip set consumed by the decoder.  Class/register
tokens are dropped before anything leaves this module.

Two backends share one implementation:

* ``vit_b16_config()`` — ViT-B/16 geometry (224px, patch 16, 12 blocks,
  dim 768) with class + 4 register tokens and LayerScale, loadable from a
  safetensors file of converted self-supervised ViT weights.
* ``tiny_config()`` — a 32px, 4-block, dim-32 encoder with deterministic
  seeded weights, used for CPU tests of everything downstream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .slicing import SliceWindow

__all__ = [
    "EncoderConfig",
    "EncoderWeightsError",
    "StructuralEncoder",
    "vit_b16_config",
    "tiny_config",
    "load_pretrained",
    "encode_window",
    "preprocess_for_encoder",
    "parameter_digest",
]

# Channel statistics used by the common self-supervised ViT releases.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class EncoderWeightsError(RuntimeError):
    """Weight file missing, malformed, or mismatched against the config."""


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int
    patch_size: int
    depth: int
    dim: int
    heads: int
    tap_layers: tuple[int, ...]
    weights_source: str = "seeded"  # "seeded" or "pretrained"
    seed: int = 0
    num_register_tokens: int = 0
    mlp_ratio: float = 4.0
    layerscale_init: float | None = None
    normalize_mean: tuple[float, float, float] | None = None
    normalize_std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        taps = self.tap_layers
        if not taps or list(taps) != sorted(set(taps)):
            raise ValueError(f"tap layers must be strictly increasing, got {taps}")
        if taps[0] < 1 or taps[-1] != self.depth:
            raise ValueError(f"tap layers must lie in [1, {self.depth}] and include the final block")
        if self.weights_source not in ("seeded", "pretrained"):
            raise ValueError(f"unknown weights source {self.weights_source!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


def vit_b16_config() -> EncoderConfig:
    """Full-size configuration: 224px input, 14x14 patch grid, dim 768."""
    return EncoderConfig(
        image_size=224,
        patch_size=16,
        depth=12,
        dim=768,
        heads=12,
        tap_layers=(3, 6, 9, 12),
        weights_source="pretrained",
        num_register_tokens=4,
        layerscale_init=1e-5,
        normalize_mean=IMAGENET_MEAN,
        normalize_std=IMAGENET_STD,
    )


def tiny_config(seed: int = 0, image_size: int = 32) -> EncoderConfig:
    """Desk-scale test configuration: 4x4 patch grid, dim 32, seeded weights."""
    return EncoderConfig(
        image_size=image_size,
        patch_size=8,
        depth=4,
        dim=32,
        heads=2,
        tap_layers=(1, 2, 3, 4),
        weights_source="seeded",
        seed=seed,
    )


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out)


class _LayerScale(nn.Module):
    def __init__(self, dim: int, init: float):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), init))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, layerscale: float | None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.ls1 = _LayerScale(dim, layerscale) if layerscale else nn.Identity()
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = _LayerScale(dim, layerscale) if layerscale else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x


class StructuralEncoder(nn.Module):
    """Pre-norm ViT over 3-channel slices; parameters are always frozen.

    ``forward`` returns one (N, P, dim) patch-token tensor per tap layer.
    The final tap goes through the closing LayerNorm (the feature space the
    pretrained backbones expose); intermediate taps are raw block outputs.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.num_prefix = 1 + cfg.num_register_tokens
        if cfg.num_register_tokens:
            self.register_tokens = nn.Parameter(torch.zeros(1, cfg.num_register_tokens, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_prefix + cfg.num_patches, cfg.dim))
        self.blocks = nn.ModuleList(
            _Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.layerscale_init)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim)

        if cfg.weights_source == "seeded":
            self._seeded_init(cfg.seed)
        self.freeze()

    def _seeded_init(self, seed: int) -> None:
        # Deterministic across processes: every parameter drawn from one
        # generator in sorted name order.
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias") or "norm" in name:
                    if name.endswith("weight"):
                        p.fill_(1.0)
                    else:
                        p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Frozen contract: the encoder never leaves eval mode.
        return super().train(False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        """Channel standardization with the backend's stats; identity if none."""
        if self.cfg.normalize_mean is None:
            return x
        mean = torch.as_tensor(self.cfg.normalize_mean, dtype=x.dtype, device=x.device)
        std = torch.as_tensor(self.cfg.normalize_std, dtype=x.dtype, device=x.device)
        return (x - mean.view(3, 1, 1)) / std.view(3, 1, 1)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        """Encode (N, 3, S, S) slices to {tap_layer: (N, P, dim)} patch tokens."""
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"input spatial size {tuple(x.shape[-2:])} != encoder size {self.cfg.image_size}"
            )
        n = x.shape[0]
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (N, P, dim)
        prefix = [self.cls_token.expand(n, -1, -1)]
        if self.cfg.num_register_tokens:
            prefix.append(self.register_tokens.expand(n, -1, -1))
        tokens = torch.cat(prefix + [tokens], dim=1) + self.pos_embed

        taps: dict[int, torch.Tensor] = {}
        want = set(self.cfg.tap_layers)
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens)
            if i in want:
                taps[i] = tokens
        taps[self.cfg.depth] = self.norm(taps[self.cfg.depth])
        return {layer: t[:, self.num_prefix :] for layer, t in taps.items()}


def preprocess_for_encoder(
    window: "SliceWindow | torch.Tensor", encoder: StructuralEncoder
) -> torch.Tensor:
    """Standardize window slices for the encoder (identity for the tiny backend).

    Accepts a :class:`SliceWindow` or any (..., 3, S, S) tensor and returns
    the normalized slice tensor.
    """
    if isinstance(window, SliceWindow):
        x = torch.from_numpy(np.ascontiguousarray(window.slices))
    else:
        x = window
    return encoder.preprocess(x)


def encode_window(
    window: SliceWindow, encoder: StructuralEncoder
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Encode one window to its (K, P, dim) token tensor and skip set.

    Skips are keyed by tap layer and exclude the final block, whose output
    is the main token tensor.
    """
    x = torch.from_numpy(np.ascontiguousarray(window.slices))
    x = encoder.preprocess(x)
    with torch.no_grad():
        taps = encoder(x)
    depth = encoder.cfg.depth
    return taps[depth], {l: t for l, t in taps.items() if l != depth}


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters in name order; detects any weight drift."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_pretrained(path, cfg: EncoderConfig | None = None) -> StructuralEncoder:
    """Build an encoder and populate it from a safetensors weight file.

    Every parameter in the file must match the module's shape; mismatches
    and missing/unexpected names raise :class:`EncoderWeightsError` naming
    the offending parameter.  The loaded encoder records a content digest
    in ``encoder.weights_digest``.
    """
    from pathlib import Path

    from safetensors.numpy import load_file

    path = Path(path)
    if not path.exists():
        raise EncoderWeightsError(f"weight file not found: {path}")
    cfg = cfg or vit_b16_config()
    encoder = StructuralEncoder(cfg)

    arrays = load_file(str(path))
    state = encoder.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing:
        raise EncoderWeightsError(f"weight file missing parameter '{missing[0]}'")
    if unexpected:
        raise EncoderWeightsError(f"weight file has unexpected parameter '{unexpected[0]}'")
    for name, array in arrays.items():
        expected = tuple(state[name].shape)
        if tuple(array.shape) != expected:
            raise EncoderWeightsError(
                f"parameter '{name}': file shape {tuple(array.shape)}, expected {expected}"
            )
    encoder.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    encoder.freeze()
    encoder.weights_digest = parameter_digest(encoder)
    return encoder
