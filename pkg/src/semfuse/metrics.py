"""Fusion-quality metrics and diagnostic-report text statistics.

Image metrics work on 8-bit luminance: inputs in [0, 1] (``ImageTensor`` or
float arrays) are quantized as ``round(255 * Y)``; integer arrays are taken
as already 8-bit. All arithmetic afterwards is float64.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch

from .errors import EmptyText, ShapeMismatch
from .imagedata import ImageTensor
from .losses import sobel_xy, ssim_parts

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class QabfConstants:
    gamma_g: float = 0.9994
    kappa_g: float = -15.0
    sigma_g: float = 0.5
    gamma_a: float = 0.9879
    kappa_a: float = -22.0
    sigma_a: float = 0.8
    weight_exponent: float = 1.0


def to_u8(img) -> np.ndarray:
    """2-D float64 array of 8-bit luminance values."""
    if isinstance(img, ImageTensor):
        return np.round(255.0 * img.luminance())
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise ShapeMismatch(f"metrics need a single luminance plane, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise ValueError("integer images must hold 8-bit values 0..255")
        return a.astype(np.float64)
    if not np.all((a >= 0.0) & (a <= 1.0)):
        raise ValueError("float images must lie in [0, 1]; pass integer arrays for 8-bit values")
    return np.round(255.0 * a)


def sd(img) -> float:
    u = to_u8(img)
    return float(np.sqrt(np.mean((u - u.mean()) ** 2)))


def sf(img) -> float:
    u = to_u8(img)
    rf = np.sqrt(np.mean(np.diff(u, axis=1) ** 2))
    cf = np.sqrt(np.mean(np.diff(u, axis=0) ** 2))
    return float(np.hypot(rf, cf))


def ag(img, form="printed") -> float:
    """Average gradient over the (M-1) x (N-1) forward-difference grid.

    ``form="printed"`` averages ``sqrt(dx^2 + dy^2) / 4``; ``form="rms"``
    uses the common ``sqrt((dx^2 + dy^2) / 2)`` instead.
    """
    u = to_u8(img)
    dx = u[1:, :-1] - u[:-1, :-1]
    dy = u[:-1, 1:] - u[:-1, :-1]
    if form == "printed":
        g = 0.25 * np.sqrt(dx * dx + dy * dy)
    elif form == "rms":
        g = np.sqrt((dx * dx + dy * dy) / 2.0)
    else:
        raise ValueError(f"unknown AG form {form!r}")
    return float(g.mean())


def _sobel_u8(u):
    gx, gy = sobel_xy(torch.from_numpy(u)[None, None])
    return gx[0, 0].numpy(), gy[0, 0].numpy()


def _edge_maps(u):
    sx, sy = _sobel_u8(u)
    g = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(sx == 0, np.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return g, alpha


def _edge_preservation(g_src, a_src, g_f, a_f, k: QabfConstants):
    big = np.maximum(g_src, g_f)
    small = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        strength = np.where(big > 0, small / np.where(big > 0, big, 1.0), 1.0)
    orient = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    q_g = k.gamma_g / (1.0 + np.exp(k.kappa_g * (strength - k.sigma_g)))
    q_a = k.gamma_a / (1.0 + np.exp(k.kappa_a * (orient - k.sigma_a)))
    return q_g * q_a


def qabf(src_a, src_b, fused, constants: QabfConstants = QabfConstants()) -> float:
    """Edge-information transfer from two sources into the fused image, in [0, 1]."""
    ua, ub, uf = to_u8(src_a), to_u8(src_b), to_u8(fused)
    if not ua.shape == ub.shape == uf.shape:
        raise ShapeMismatch("Q_ab/f needs images of equal size")
    ga, aa = _edge_maps(ua)
    gb, ab = _edge_maps(ub)
    gf, af = _edge_maps(uf)
    wa = ga ** constants.weight_exponent
    wb = gb ** constants.weight_exponent
    total = wa.sum() + wb.sum()
    if total == 0:
        return 0.0
    q_af = _edge_preservation(ga, aa, gf, af, constants)
    q_bf = _edge_preservation(gb, ab, gf, af, constants)
    return float(np.clip((q_af * wa + q_bf * wb).sum() / total, 0.0, 1.0))


def ms_ssim(x, y, weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM between two 8-bit luminance images.

    Scales are produced by 2x2 average pooling; negative per-scale terms are
    clamped to 0 before exponentiation.
    """
    ux, uy = to_u8(x), to_u8(y)
    if ux.shape != uy.shape:
        raise ShapeMismatch(f"size mismatch: {ux.shape} vs {uy.shape}")
    levels = len(weights)
    if min(ux.shape) < 2 ** (levels - 1):
        raise ShapeMismatch(f"MS-SSIM with {levels} scales needs sides >= {2 ** (levels - 1)}")
    tx = torch.from_numpy(ux)[None, None]
    ty = torch.from_numpy(uy)[None, None]
    value = 1.0
    for j, wgt in enumerate(weights):
        full, cs = ssim_parts(tx, ty, data_range=255.0)
        term = full if j == levels - 1 else cs
        value *= max(float(term), 0.0) ** wgt
        if j < levels - 1:
            tx = torch.nn.functional.avg_pool2d(tx, 2)
            ty = torch.nn.functional.avg_pool2d(ty, 2)
    return value


def ms_ssim_fusion(src_a, src_b, fused) -> float:
    """``MS(fused, src_a) + MS(fused, src_b)``."""
    return ms_ssim(fused, src_a) + ms_ssim(fused, src_b)


@dataclass(frozen=True)
class MetricReport:
    sf: float
    ag: float
    sd: float
    qabf: float
    ms_ssim: float
    computed_on: str = ""
    bit_depth_note: str = "8-bit luminance, round(255*Y)"

    def row(self):
        return [self.computed_on, *(f"{v:.6f}" for v in (self.sf, self.ag, self.sd, self.qabf, self.ms_ssim))]


def evaluate(src_a, src_b, fused, image_id="", ag_form="printed") -> MetricReport:
    return MetricReport(
        sf=sf(fused),
        ag=ag(fused, ag_form),
        sd=sd(fused),
        qabf=qabf(src_a, src_b, fused),
        ms_ssim=ms_ssim_fusion(src_a, src_b, fused),
        computed_on=image_id,
    )


# --------------------------------------------------------------------------
# Report text statistics


def normalize_report(text: str) -> str:
    """Lowercase, drop punctuation and collapse whitespace."""
    return " ".join(re.findall(r"[^\W_]+", text.lower()))


def char_entropy(text: str) -> float:
    """Shannon entropy in bits of the character unigram distribution."""
    if not text:
        raise EmptyText("entropy of empty text is undefined")
    n = len(text)
    h = -sum(c / n * math.log2(c / n) for c in Counter(text).values())
    return h if h > 0 else 0.0


@dataclass(frozen=True)
class ReportStats:
    word_length: int
    entropy_bits_per_char: float
    keyword_hits: list = field(default_factory=list)

    def row(self, report_id):
        return [report_id, str(self.word_length), f"{self.entropy_bits_per_char:.6f}", ";".join(self.keyword_hits)]


def report_stats(text: str, lexicon=None, normalize=True) -> ReportStats:
    """Word count, character entropy and lexicon hits for a report.

    With ``normalize`` the entropy is taken over the lowercased text with
    punctuation removed; otherwise over the raw characters.
    """
    if not isinstance(text, str) or not text.strip():
        raise EmptyText("report text must be non-empty")
    lexicon = default_lexicon() if lexicon is None else lexicon
    basis = normalize_report(text) if normalize else text
    if not basis:
        basis = text
    low = text.lower()
    hits = [term for term in lexicon if term and term.lower() in low]
    return ReportStats(len(text.split()), char_entropy(basis), hits)


def load_lexicon(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def default_lexicon() -> list[str]:
    with resources.files("semfuse.data").joinpath("lexicon.txt").open(encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
