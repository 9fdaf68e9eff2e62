"""The full text-guided fusion network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import Decoder
from .encoder import LatentInit, ModalityEncoder, head_layout, trunc_normal_
from .sfm import SfmStack
from .textsem import EMBED_DIM


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    stages: int = 2
    head_dim: int = 64
    image_size: tuple = (64, 64)
    upsample: bool = False
    padding_mode: str = "reflect"
    combine: str = "reweight"

    def __post_init__(self):
        head_layout(self.channels, self.head_dim)
        if not 1 <= self.stages <= 4:
            raise ValueError("stages must be between 1 and 4")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


class FusionModel(nn.Module):
    """Encoders, latent init, SFM stack, decoder and the image->text bridge head.

    ``forward`` maps two luminance batches ``(B, 1, H, W)`` and two text
    embedding batches ``(B, 128)`` to the fused luminance ``(B, 1, H, W)``.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        kw = dict(head_dim=config.head_dim, padding_mode=config.padding_mode)
        self.encoder1 = ModalityEncoder(c, upsample=config.upsample, **kw)
        self.encoder2 = ModalityEncoder(c, upsample=config.upsample, **kw)
        self.latent_init = LatentInit(c)
        self.sfm = SfmStack(c, config.stages, combine=config.combine, **kw)
        self.decoder = Decoder(c, downsample=config.upsample, **kw)
        self.bridge = nn.Linear(c, EMBED_DIM)
        trunc_normal_(self.bridge.weight)
        nn.init.zeros_(self.bridge.bias)

    def forward(self, img1, img2, phi1, phi2):
        w = self.latent_init(self.encoder1(img1), self.encoder2(img2))
        w = self.sfm(w, phi1, phi2)
        return self.decoder(w)

    def embed_image(self, img):
        """Pool the modality-1 encoding of ``img`` and project it to text space."""
        pooled = self.encoder1(img).mean(dim=(2, 3))
        return F.normalize(self.bridge(pooled), dim=1)


_UNIT_GAINS = ("norm1.weight", "norm2.weight", "temperature")


def randomize_(model: nn.Module, generator: torch.Generator, scale=0.2):
    """Overwrite every parameter with dense random values (for gradient checks)."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            base = 1.0 if name.endswith(_UNIT_GAINS) else 0.0
            p.copy_(base + scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return model
