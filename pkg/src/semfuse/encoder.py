"""Restormer-style feature extraction.

Each block runs transposed (channel) attention followed by a gated
depthwise feed-forward network, both wrapped in residual connections. Output
projections start at zero, so a freshly initialized block is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


def head_layout(channels: int, head_dim: int = 64):
    """Return ``(heads, head_dim)`` for a channel width.

    Narrow models get a single head spanning every channel; wider ones must
    split evenly into heads of ``head_dim``.
    """
    if channels < 1:
        raise ValueError("channels must be positive")
    if channels < head_dim:
        return 1, channels
    if channels % head_dim:
        raise ValueError(f"channels={channels} is not a multiple of head_dim={head_dim}")
    return channels // head_dim, head_dim


@dataclass
class LatentFeatureMap:
    """Batched token view ``(B, P, C)`` of a feature map with ``P = H * W``."""

    tokens: torch.Tensor
    spatial_shape: tuple
    stage: int = 0

    def __post_init__(self):
        if self.tokens.dim() == 2:
            self.tokens = self.tokens.unsqueeze(0)
        h, w = self.spatial_shape
        if self.tokens.dim() != 3 or self.tokens.shape[1] != h * w:
            raise ShapeMismatch(
                f"tokens {tuple(self.tokens.shape)} inconsistent with spatial shape {self.spatial_shape}"
            )

    @property
    def channels(self):
        return self.tokens.shape[2]

    @classmethod
    def from_map(cls, x: torch.Tensor, stage=0):
        b, c, h, w = x.shape
        return cls(x.flatten(2).transpose(1, 2), (h, w), stage)

    def to_map(self) -> torch.Tensor:
        b, p, c = self.tokens.shape
        h, w = self.spatial_shape
        return self.tokens.transpose(1, 2).reshape(b, c, h, w)


def trunc_normal_(t, std=0.02):
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        y = (x - mu) / torch.sqrt(var + self.eps)
        return y * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class TransposedAttention(nn.Module):
    """Multi-head attention whose affinity matrix is ``C_h x C_h`` per head."""

    def __init__(self, channels, heads, padding_mode="reflect"):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3,
                                padding_mode=padding_mode)
        self.project_out = nn.Conv2d(channels, channels, 1)

    def affinity(self, x):
        """Per-head softmax affinities ``(B, heads, C_h, C_h)`` and the value tensor."""
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = F.normalize(q.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        k = F.normalize(k.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1)
        return attn, v

    def forward(self, x):
        b, c, h, w = x.shape
        attn, v = self.affinity(x)
        out = (attn @ v).reshape(b, c, h, w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    def __init__(self, channels, expansion=2.66, padding_mode="reflect"):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden * 2, 1)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2,
                                padding_mode=padding_mode)
        self.project_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class RestormerBlock(nn.Module):
    def __init__(self, channels, head_dim=64, expansion=2.66, padding_mode="reflect"):
        super().__init__()
        self.heads, self.head_dim = head_layout(channels, head_dim)
        self.channels = channels
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = TransposedAttention(channels, self.heads, padding_mode)
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels, expansion, padding_mode)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                trunc_normal_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.attn.project_out.weight)
        nn.init.zeros_(self.ffn.project_out.weight)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def restormer_block(x: LatentFeatureMap, block: RestormerBlock) -> LatentFeatureMap:
    if x.channels != block.channels:
        raise ShapeMismatch(f"latent has {x.channels} channels, block expects {block.channels}")
    return LatentFeatureMap.from_map(block(x.to_map()), x.stage)


class ModalityEncoder(nn.Module):
    """Pointwise 1 -> C lift followed by two Restormer blocks."""

    def __init__(self, channels=32, head_dim=64, upsample=False, padding_mode="reflect"):
        super().__init__()
        self.lift = nn.Conv2d(1, channels, 1)
        self.blocks = nn.Sequential(
            RestormerBlock(channels, head_dim, padding_mode=padding_mode),
            RestormerBlock(channels, head_dim, padding_mode=padding_mode),
        )
        self.upsample = (
            nn.Sequential(nn.Conv2d(channels, channels * 4, 1), nn.PixelShuffle(2)) if upsample else None
        )
        trunc_normal_(self.lift.weight)
        nn.init.zeros_(self.lift.bias)
        if upsample:
            trunc_normal_(self.upsample[0].weight)
            nn.init.zeros_(self.upsample[0].bias)

    def forward(self, img):
        if img.dim() != 4 or img.shape[1] != 1:
            raise ShapeMismatch(f"encoder expects (B, 1, H, W) luminance, got {tuple(img.shape)}")
        x = self.blocks(self.lift(img))
        if self.upsample is not None:
            x = self.upsample(x)
        return x


class LatentInit(nn.Module):
    """Concatenate the two modality features and project 2C -> C."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Conv2d(channels * 2, channels, 1)
        trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, f1, f2):
        if f1.shape != f2.shape:
            raise ShapeMismatch(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        return self.proj(torch.cat([f1, f2], dim=1))


def _as_batch(img, dtype):
    if isinstance(img, torch.Tensor):
        t = img.to(dtype)
    else:
        # ImageTensor or ndarray (H, W) / (H, W, 1)
        px = getattr(img, "pixels", img)
        t = torch.as_tensor(px, dtype=dtype)
        if t.dim() == 3:
            if t.shape[2] != 1:
                raise ShapeMismatch("encoder expects a single luminance channel")
            t = t[:, :, 0]
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def encode_modality(img, which: int, model) -> LatentFeatureMap:
    """Run the modality-``which`` encoder of ``model`` on a luminance image."""
    enc = {1: model.encoder1, 2: model.encoder2}[which]
    dtype = next(enc.parameters()).dtype
    return LatentFeatureMap.from_map(enc(_as_batch(img, dtype)))


def init_fusion_latent(f1: LatentFeatureMap, f2: LatentFeatureMap, model) -> LatentFeatureMap:
    if f1.tokens.shape != f2.tokens.shape or f1.spatial_shape != f2.spatial_shape:
        raise ShapeMismatch(f"cannot fuse {tuple(f1.tokens.shape)} with {tuple(f2.tokens.shape)}")
    return LatentFeatureMap.from_map(model.latent_init(f1.to_map(), f2.to_map()), stage=0)


def default_dk(channels: int) -> float:
    return math.sqrt(channels)
