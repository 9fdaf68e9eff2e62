"""Latent -> luminance decoding and chroma recombination."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .encoder import LatentFeatureMap, RestormerBlock, trunc_normal_
from .errors import ColorspaceMismatch, ShapeMismatch
from .imagedata import ColorSpace, ImageTensor, Modality, rgb_to_ycbcr_array, ycbcr_to_rgb_array


class Decoder(nn.Module):
    def __init__(self, channels=32, head_dim=64, downsample=False, padding_mode="reflect"):
        super().__init__()
        self.channels = channels
        self.blocks = nn.Sequential(
            RestormerBlock(channels, head_dim, padding_mode=padding_mode),
            RestormerBlock(channels, head_dim, padding_mode=padding_mode),
        )
        self.downsample = (
            nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(channels * 4, channels, 1)) if downsample else None
        )
        self.out = nn.Conv2d(channels, 1, 1)
        trunc_normal_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        if downsample:
            trunc_normal_(self.downsample[1].weight)
            nn.init.zeros_(self.downsample[1].bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"decoder expects (B, {self.channels}, H, W), got {tuple(x.shape)}")
        x = self.blocks(x)
        if self.downsample is not None:
            x = self.downsample(x)
        return torch.sigmoid(self.out(x))


def decode(w: LatentFeatureMap, decoder: Decoder) -> ImageTensor:
    """Decode a single-sample latent to a GRAY image."""
    if w.tokens.shape[0] != 1:
        raise ShapeMismatch("decode() takes a single-sample latent; call the Decoder module for batches")
    with torch.no_grad():
        y = decoder(w.to_map())[0, 0]
    return ImageTensor(y.double().cpu().numpy(), Modality.FUSED, ColorSpace.GRAY)


def recombine_chroma(fused_y: ImageTensor, source_color: ImageTensor) -> ImageTensor:
    """Swap the luminance of ``source_color`` for ``fused_y`` and return RGB."""
    if fused_y.colorspace != ColorSpace.GRAY:
        raise ColorspaceMismatch(f"fused luminance must be GRAY, got {fused_y.colorspace.value}")
    if source_color.colorspace != ColorSpace.RGB:
        raise ColorspaceMismatch(f"color source must be RGB, got {source_color.colorspace.value}")
    if fused_y.shape[:2] != source_color.shape[:2]:
        raise ShapeMismatch(f"size mismatch: {fused_y.shape[:2]} vs {source_color.shape[:2]}")
    ycc = rgb_to_ycbcr_array(source_color.pixels)
    ycc[:, :, 0] = fused_y.pixels[:, :, 0]
    rgb = np.clip(ycbcr_to_rgb_array(ycc), 0.0, 1.0)
    return ImageTensor(rgb, Modality.FUSED, ColorSpace.RGB)
