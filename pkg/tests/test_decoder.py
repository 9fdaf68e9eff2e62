import numpy as np
import pytest
import torch

from semfuse.decoder import Decoder, decode, recombine_chroma
from semfuse.encoder import LatentFeatureMap
from semfuse.errors import ColorspaceMismatch, ShapeMismatch
from semfuse.imagedata import ColorSpace, ImageTensor, rgb_to_ycbcr
from semfuse.model import randomize_


def test_output_range_and_shape():
    gen = torch.Generator().manual_seed(0)
    dec = randomize_(Decoder(32).double(), gen, scale=0.5)
    lat = LatentFeatureMap(50 * torch.randn(1, 4096, 32, generator=gen, dtype=torch.float64), (64, 64))
    img = decode(lat, dec)
    assert img.shape == (64, 64, 1) and img.colorspace == ColorSpace.GRAY
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1
    # strictly inside (0, 1) until the sigmoid saturates in floating point
    mild = randomize_(Decoder(32).double(), gen, scale=0.1)
    out = mild(lat.to_map() / 50)
    assert torch.all(out > 0) and torch.all(out < 1)


def test_zero_latent_gives_half():
    dec = Decoder(16).double()
    img = decode(LatentFeatureMap(torch.zeros(1, 64, 16, dtype=torch.float64), (8, 8)), dec)
    np.testing.assert_array_equal(img.pixels, 0.5)


def test_downsample_flag():
    dec = Decoder(8, downsample=True).double()
    assert dec(torch.zeros(1, 8, 16, 16, dtype=torch.float64)).shape == (1, 1, 8, 8)


def test_differentiable_to_latent():
    gen = torch.Generator().manual_seed(1)
    dec = randomize_(Decoder(8).double(), gen)
    x = torch.randn(1, 8, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    dec(x).sum().backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


def _rgb(seed, h=10, w=12):
    return ImageTensor(np.random.default_rng(seed).random((h, w, 3)), colorspace=ColorSpace.RGB)


class TestRecombine:
    def test_identity_substitution(self):
        src = _rgb(0)
        y = ImageTensor(rgb_to_ycbcr(src).pixels[..., :1])
        np.testing.assert_allclose(recombine_chroma(y, src).pixels, src.pixels, atol=1e-6)

    def test_achromatic_source(self):
        gray = np.random.default_rng(1).random((10, 12))
        src = ImageTensor(np.repeat(gray[..., None], 3, axis=2), colorspace=ColorSpace.RGB)
        y = ImageTensor(np.random.default_rng(2).random((10, 12)))
        out = recombine_chroma(y, src).pixels
        np.testing.assert_allclose(out, np.repeat(y.pixels, 3, axis=2), atol=1e-6)

    def test_per_pixel_oracle(self):
        src, y = _rgb(3), ImageTensor(np.random.default_rng(4).random((10, 12)))
        out = recombine_chroma(y, src).pixels
        for i in range(10):
            for j in range(12):
                r, g, b = src.pixels[i, j]
                yy = 0.299 * r + 0.587 * g + 0.114 * b
                cb = (b - yy) / 1.772
                cr = (r - yy) / 1.402
                yn = y.pixels[i, j, 0]
                rn = yn + 1.402 * cr
                bn = yn + 1.772 * cb
                gn = (yn - 0.299 * rn - 0.114 * bn) / 0.587
                want = np.clip([rn, gn, bn], 0, 1)
                np.testing.assert_allclose(out[i, j], want, atol=1e-9, rtol=0)

    def test_always_in_range(self):
        for seed in range(10):
            out = recombine_chroma(ImageTensor(np.random.default_rng(seed).random((8, 8))), _rgb(seed + 50, 8, 8))
            assert out.pixels.min() >= 0 and out.pixels.max() <= 1

    def test_errors(self):
        with pytest.raises(ColorspaceMismatch):
            recombine_chroma(_rgb(0), _rgb(1))
        with pytest.raises(ShapeMismatch):
            recombine_chroma(ImageTensor(np.zeros((8, 8))), _rgb(0))
