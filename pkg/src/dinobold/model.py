"""The trainable generator head and full-volume inference.

:class:`BoldGenerator` composes slice-attention fusion (main branch and
per-skip stacks) with the multi-scale decoder.  The frozen encoder is kept
outside the module on purpose: checkpoints then contain trainable state
only, and the optimizer cannot reach encoder weights by construction.

Because the encoder never changes, per-slice features for a volume are
computed once (:class:`SliceFeatureCache`) and windows are assembled by
gathering rows — padded positions reuse the encoding of a zero slice,
which is exactly what encoding a zero-padded window would produce.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .decoder import DecoderConfig, MultiScaleDecoder, collapse_window
from .encoder import StructuralEncoder
from .fusion import FusionConfig, SkipFusion, SliceAttentionFusion
from .slicing import ValidMask, assemble_volume, resample_slice, restore_output, slice_validity
from .volume_io import Volume3D

__all__ = ["BoldGenerator", "SliceFeatureCache", "predict_volume_cached", "generate_volume"]


class BoldGenerator(nn.Module):
    """Fusion + decoder over precomputed encoder tokens.

    ``fusion_cfg=None`` disables slice attention (tokens pass through
    unchanged); a decoder config without skip stages ignores skips.
    """

    def __init__(self, fusion_cfg: FusionConfig | None, decoder_cfg: DecoderConfig):
        super().__init__()
        self.skip_layers = decoder_cfg.skip_layers
        self.fusion = SliceAttentionFusion(fusion_cfg) if fusion_cfg is not None else None
        self.skip_fusion = (
            SkipFusion(self.skip_layers, fusion_cfg)
            if fusion_cfg is not None and self.skip_layers
            else None
        )
        self.decoder = MultiScaleDecoder(decoder_cfg)

    def forward(
        self, tokens: torch.Tensor, skips: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        """(B, K, P, D) tokens (+ skip tensors) to (B, S, S) predictions."""
        skips = skips or {}
        used = {l: skips[l] for l in self.skip_layers}
        fused = self.fusion(tokens) if self.fusion is not None else tokens
        if self.skip_fusion is not None:
            used = self.skip_fusion(used)
        main = collapse_window(fused)
        skip_maps = {l: collapse_window(t) for l, t in used.items()}
        return self.decoder(main, skip_maps)


class SliceFeatureCache:
    """Frozen-encoder features for every axial slice of one volume."""

    def __init__(self, encoder: StructuralEncoder, volume: Volume3D, chunk: int = 32):
        self.original_shape = volume.shape[:2]
        self.voxel_size = volume.voxel_size
        self.depth = volume.shape[2]
        size = encoder.cfg.image_size

        planes = np.stack(
            [resample_slice(volume.data[:, :, z], size) for z in range(self.depth)]
        )
        x = torch.from_numpy(planes).unsqueeze(1).expand(-1, 3, -1, -1)
        x = encoder.preprocess(x)
        taps: dict[int, list[torch.Tensor]] = {l: [] for l in encoder.cfg.tap_layers}
        with torch.no_grad():
            for start in range(0, self.depth, chunk):
                for l, t in encoder(x[start : start + chunk]).items():
                    taps[l].append(t)
            zero = encoder.preprocess(torch.zeros(1, 3, size, size))
            self._pad_taps = {l: t[0] for l, t in encoder(zero).items()}
        self._taps = {l: torch.cat(parts) for l, parts in taps.items()}
        self.final_layer = encoder.cfg.depth

    def window_tokens(self, z: int, k: int) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Assemble the (K, P, D) main tensor and skip set for center ``z``."""
        valid = slice_validity(z, k, self.depth)
        half = (k - 1) // 2

        def gather(layer):
            rows = [
                self._taps[layer][z - half + i] if valid[i] else self._pad_taps[layer]
                for i in range(k)
            ]
            return torch.stack(rows)

        main = gather(self.final_layer)
        skips = {l: gather(l) for l in self._taps if l != self.final_layer}
        return main, skips


def predict_volume_cached(model: BoldGenerator, cache: SliceFeatureCache, k: int) -> Volume3D:
    """Predict every axial slice from cached features and reassemble."""
    was_training = model.training
    model.eval()
    h, w = cache.original_shape
    preds = []
    try:
        with torch.no_grad():
            for z in range(cache.depth):
                main, skips = cache.window_tokens(z, k)
                pred = model(main.unsqueeze(0), {l: t.unsqueeze(0) for l, t in skips.items()})[0]
                size = pred.shape[0]
                mask = ValidMask(
                    slice_validity(z, k, cache.depth),
                    np.ones((size, size), dtype=np.float32),
                    (h, w),
                )
                preds.append(restore_output(pred.numpy(), mask))
    finally:
        model.train(was_training)
    return assemble_volume(preds, voxel_size=cache.voxel_size, expected_z=cache.depth)


def generate_volume(
    encoder: StructuralEncoder, model: BoldGenerator, volume: Volume3D, k: int
) -> Volume3D:
    """Full-volume inference: encode, fuse, decode, and restore every slice."""
    return predict_volume_cached(model, SliceFeatureCache(encoder, volume), k)
