"""Training losses and their image primitives.

Everything here is differentiable torch code working on luminance batches of
shape ``(B, 1, H, W)``; 2-D arrays and :class:`ImageTensor` inputs are
promoted to that shape. Kinks are resolved deterministically: ``|x|`` has
derivative 0 at 0, ties in the elementwise max route the gradient to the
first argument, and the Sobel magnitude has derivative 0 where it vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss, ShapeMismatch, ZeroVector

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 1.5
    gamma: float = 1.5
    theta: float = 0.85
    omega: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "theta", "omega"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.theta > 1:
            raise ValueError("theta must lie in [0, 1]")


def as_batch(img, dtype=torch.float64) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img
    else:
        px = getattr(img, "pixels", img)
        t = torch.as_tensor(np.asarray(px), dtype=dtype)
        if t.dim() == 3:
            if t.shape[2] != 1:
                raise ShapeMismatch("losses operate on a single luminance channel")
            t = t[:, :, 0]
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    if t.dim() != 4 or t.shape[1] != 1:
        raise ShapeMismatch(f"expected (B, 1, H, W) luminance, got {tuple(t.shape)}")
    return t


def _same_shape(*ts):
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ShapeMismatch(f"shape mismatch: {tuple(s)} vs {tuple(t.shape)}")


_SOBEL_X = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]


def sobel_xy(x: torch.Tensor):
    """Horizontal and vertical Sobel responses with reflect padding."""
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ShapeMismatch("Sobel needs images of at least 3x3")
    kx = torch.tensor(_SOBEL_X, dtype=x.dtype, device=x.device)
    k = torch.stack([kx, kx.t()])[:, None]
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), k)
    return g[:, :1], g[:, 1:]


def _safe_sqrt(sq):
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def sobel(img) -> torch.Tensor:
    """Gradient magnitude ``sqrt(gx^2 + gy^2)``, same shape as the input batch."""
    gx, gy = sobel_xy(as_batch(img))
    return _safe_sqrt(gx * gx + gy * gy)


def gaussian_window(size, sigma=SSIM_SIGMA, dtype=torch.float64):
    c = (size - 1) / 2.0
    g = torch.tensor([math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(size)], dtype=dtype)
    g = g / g.sum()
    return torch.outer(g, g)


def window_size_for(h, w, size=SSIM_WINDOW):
    """Largest odd window not exceeding ``size`` or the image sides."""
    s = min(size, h, w)
    return s if s % 2 else s - 1


def ssim_parts(x, y, data_range=1.0):
    """Per-sample mean SSIM and mean contrast-structure term, both ``(B,)``.

    Uses valid-mode Gaussian windows (11x11, sigma 1.5). Images smaller than
    the window use the largest odd window that fits.
    """
    x, y = as_batch(x), as_batch(y)
    _same_shape(x, y)
    h, w = x.shape[-2:]
    win = gaussian_window(window_size_for(h, w), dtype=x.dtype).to(x.device)[None, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mx * mx
    syy = F.conv2d(y * y, win) - my * my
    sxy = F.conv2d(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ssim(x, y, data_range=1.0) -> torch.Tensor:
    """Mean local SSIM averaged over the batch."""
    return ssim_parts(x, y, data_range)[0].mean()


def semantic_loss(fused_embedding, phi1, phi2, theta=0.85) -> torch.Tensor:
    """Thresholded cosine loss averaged over both description rows and the batch.

    Each row contributes ``0`` when its cosine reaches ``theta`` (inclusive)
    and ``1 - cos`` otherwise.
    """
    e = torch.as_tensor(fused_embedding)
    e = e[None] if e.dim() == 1 else e
    rows = []
    for phi in (phi1, phi2):
        phi = torch.as_tensor(phi, dtype=e.dtype)
        phi = phi[None] if phi.dim() == 1 else phi
        if (e.norm(dim=1) == 0).any() or (phi.norm(dim=1) == 0).any():
            raise ZeroVector("semantic loss needs nonzero embeddings")
        cos = F.cosine_similarity(e, phi.expand_as(e), dim=1, eps=0.0).clamp(-1.0, 1.0)
        rows.append(torch.where(cos >= theta, torch.zeros_like(cos), 1.0 - cos))
    return ((rows[0] + rows[1]) / 2).mean()


def grad_loss(fused, src1, src2) -> torch.Tensor:
    """Mean absolute difference between the fused Sobel magnitude and the
    elementwise max of the sources' magnitudes."""
    f, a, b = as_batch(fused), as_batch(src1), as_batch(src2)
    _same_shape(f, a, b)
    ga, gb = sobel(a), sobel(b)
    target = torch.where(ga >= gb, ga, gb)
    return (sobel(f) - target).abs().mean()


def recon_loss(fused, src, omega=1.0) -> torch.Tensor:
    f, s = as_batch(fused), as_batch(src)
    _same_shape(f, s)
    return (s - f).abs().mean() + omega * (1.0 - ssim(s, f))


def reconstruction_total(fused, src1, src2, omega=1.0) -> torch.Tensor:
    return recon_loss(fused, src1, omega) + recon_loss(fused, src2, omega)


def total_loss(parts, weights: LossWeights = LossWeights()):
    """``alpha * semantic + beta * grad + gamma * rec``.

    ``parts`` is a mapping with keys ``semantic``, ``grad``, ``rec`` or a
    3-sequence in that order.
    """
    if isinstance(parts, dict):
        sem, grd, rec = parts["semantic"], parts["grad"], parts["rec"]
    else:
        sem, grd, rec = parts
    return weights.alpha * sem + weights.beta * grd + weights.gamma * rec


def loss_parts(model, img1, img2, phi1, phi2, weights: LossWeights = LossWeights()):
    """Run ``model`` and return ``(fused, {semantic, grad, rec, total})``."""
    fused = model(img1, img2, phi1, phi2)
    parts = {
        "semantic": semantic_loss(model.embed_image(fused), phi1, phi2, weights.theta),
        "grad": grad_loss(fused, img1, img2),
        "rec": reconstruction_total(fused, img1, img2, weights.omega),
    }
    parts["total"] = total_loss(parts, weights)
    return fused, parts


def _rel_err(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn, params, probe_count=64, h=1e-4, seed=0, kink_tol=1e-3, max_redraws=None):
    """Largest relative error between autograd and central differences.

    ``loss_fn()`` must return a scalar tensor built from ``params`` (float64
    tensors with ``requires_grad``). Each probe picks one random scalar
    parameter. A probe whose central difference changes by more than
    ``kink_tol`` (relative) when the step is halved straddles a kink of
    ``|x|``/``max``/threshold and is redrawn.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    rng = np.random.default_rng(seed)
    max_redraws = 10 * probe_count if max_redraws is None else max_redraws

    def central(p, idx, step):
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NonFiniteLoss("loss became non-finite during finite differencing")
        return (up - down) / (2 * step)

    worst, done, redraws = 0.0, 0, 0
    while done < probe_count:
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = int(rng.integers(params[k].numel()))
        numeric = central(params[k], idx, h)
        if _rel_err(numeric, central(params[k], idx, h / 2)) > kink_tol:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError("too many probes landed on kinks")
            continue
        analytic = grads[k].view(-1)[idx].item()
        worst = max(worst, _rel_err(analytic, numeric))
        done += 1
    return worst
