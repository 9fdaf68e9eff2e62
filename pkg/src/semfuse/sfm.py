"""Semantic feature modulation.

One block aligns the fusion latent with the two text embeddings and then
re-injects text through a learned per-channel affine map:

* position branch: ``phi1`` -> query over the P spatial tokens, giving a
  softmax weight ``r[p]`` used as a per-position scale;
* channel branch: ``phi2`` -> query over the C channels through the
  channel covariance of the keys, giving a softmax shift ``s[c]``;
* combine: ``F[p, c] = (P * r[p] + C * s[c]) * V[p, c]`` by default. The
  literal shift form ``P * r[p] * V[p, c] + s[c]`` is available as
  ``combine="shift"``, but the per-channel standardization that follows
  removes any per-channel constant, so under it the channel branch has no
  effect on the output;
* inject: ``(1 + lam) * standardize(F) + mu`` with ``(lam, mu)`` from an MLP
  on ``phi1 || phi2``.

All tensors are token-major: latents are ``(B, P, C)``, embeddings ``(B, 128)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .encoder import LatentFeatureMap, RestormerBlock, trunc_normal_
from .errors import DegenerateChannel, ShapeMismatch
from .textsem import EMBED_DIM

INJECT_EPS = 1e-5


def _check_latent(w, channels):
    if w.dim() != 3 or w.shape[2] != channels:
        raise ShapeMismatch(f"expected latent (B, P, {channels}), got {tuple(w.shape)}")


def _check_embedding(phi, batch):
    if phi.dim() != 2 or phi.shape[1] != EMBED_DIM or phi.shape[0] not in (1, batch):
        raise ShapeMismatch(f"expected embedding (B, {EMBED_DIM}), got {tuple(phi.shape)}")


class SfmBlock(nn.Module):
    def __init__(self, channels=32, hidden=256, dk=None, combine="reweight"):
        super().__init__()
        if combine not in ("reweight", "shift"):
            raise ValueError(f"unknown combine mode {combine!r}")
        self.combine = combine
        self.channels = channels
        self.dk = float(dk) if dk is not None else math.sqrt(channels)
        if not self.dk > 0:
            raise ValueError("dk must be positive")
        self.query_pos = nn.Linear(EMBED_DIM, channels)
        self.query_chan = nn.Linear(EMBED_DIM, channels)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.inject_mlp = nn.Sequential(
            nn.Linear(2 * EMBED_DIM, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * channels),
        )
        for m in self.modules():
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def keys(self, w):
        return self.key(w)

    def align_position(self, w, phi1):
        """Softmax over positions, shape ``(B, P)``."""
        _check_latent(w, self.channels)
        _check_embedding(phi1, w.shape[0])
        q = self.query_pos(phi1)  # (B, C)
        logits = torch.einsum("bpc,bc->bp", self.keys(w), q.expand(w.shape[0], -1)) / self.dk
        return torch.softmax(logits, dim=1)

    def align_channel(self, w, phi2):
        """Softmax over channels, shape ``(B, C)``."""
        _check_latent(w, self.channels)
        _check_embedding(phi2, w.shape[0])
        k = self.keys(w)
        kcov = torch.einsum("bpi,bpj->bij", k, k) / w.shape[1]
        q = self.query_chan(phi2).expand(w.shape[0], -1)
        logits = torch.einsum("bi,bij->bj", q, kcov) / self.dk
        return torch.softmax(logits, dim=1)

    def align_combine(self, w, r, s):
        _check_latent(w, self.channels)
        b, p, c = w.shape
        if r.shape != (b, p) or s.shape != (b, c):
            raise ShapeMismatch(f"r {tuple(r.shape)} / s {tuple(s.shape)} do not match latent {tuple(w.shape)}")
        v = self.value(w)
        if self.combine == "shift":
            return (p * r)[:, :, None] * v + s[:, None, :]
        return ((p * r)[:, :, None] + (c * s)[:, None, :]) * v

    def injection_params(self, phi1, phi2):
        """``(lam, mu)``, each ``(B, C)``."""
        lam, mu = self.inject_mlp(torch.cat([phi1, phi2], dim=1)).chunk(2, dim=1)
        return lam, mu

    def text_inject(self, f_hat, phi1, phi2, lam=None, mu=None):
        _check_latent(f_hat, self.channels)
        if lam is None or mu is None:
            lam, mu = self.injection_params(phi1, phi2)
        return inject(f_hat, lam, mu)

    def forward(self, w, phi1, phi2):
        r = self.align_position(w, phi1)
        s = self.align_channel(w, phi2)
        return self.text_inject(self.align_combine(w, r, s), phi1, phi2)


def inject(f_hat, lam, mu, eps=INJECT_EPS):
    """Per-channel standardization over positions, then ``(1 + lam) * z + mu``."""
    if f_hat.shape[1] < 2:
        raise DegenerateChannel("text injection needs at least two positions per channel")
    mean = f_hat.mean(dim=1, keepdim=True)
    std = f_hat.std(dim=1, keepdim=True, unbiased=False)
    z = (f_hat - mean) / (std + eps)
    return (1.0 + lam)[:, None, :] * z + mu[:, None, :]


class SfmStack(nn.Module):
    """``L`` SFM blocks, each followed by its own Restormer block."""

    def __init__(self, channels=32, stages=2, head_dim=64, padding_mode="reflect", hidden=256, combine="reweight"):
        super().__init__()
        if not 1 <= stages <= 4:
            raise ValueError("stages must be between 1 and 4")
        self.sfm = nn.ModuleList(SfmBlock(channels, hidden, combine=combine) for _ in range(stages))
        self.refine = nn.ModuleList(
            RestormerBlock(channels, head_dim, padding_mode=padding_mode) for _ in range(stages)
        )

    def __len__(self):
        return len(self.sfm)

    def stage(self, i, x, phi1, phi2):
        """Apply stage ``i`` to an NCHW map."""
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.sfm[i](tokens, phi1, phi2)
        return self.refine[i](tokens.transpose(1, 2).reshape(b, c, h, w))

    def forward(self, x, phi1, phi2):
        for i in range(len(self.sfm)):
            x = self.stage(i, x, phi1, phi2)
        return x


def sfm_stack(w0: LatentFeatureMap, phi1, phi2, stack: SfmStack, stages=None) -> LatentFeatureMap:
    stages = len(stack) if stages is None else stages
    if stages != len(stack):
        raise ShapeMismatch(f"asked for {stages} stages but the stack holds {len(stack)}")
    x = w0.to_map()
    for i in range(stages):
        x = stack.stage(i, x, phi1, phi2)
    return LatentFeatureMap.from_map(x, stage=w0.stage + stages)
