"""Input-transformation stack for gradient averaging: diverse resize/pad,
translation-invariant kernel smoothing, scale copies, admixing and the
frequency-domain spectrum transform.

All transforms preserve image shape, keep values in [0, 1] (clipping where
noted) and take explicit ``torch.Generator`` handles so parallel workers can
own independent streams. The batched ``*_bchw`` helpers stay inside the
autograd graph; attacks differentiate through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .core import ConfigError, PIXEL_SCALE, Tensor, as_image, clip01, hwc_to_bchw, bchw_to_hwc


@dataclass(frozen=True)
class DimConfig:
    """Diverse-input transform: random downscale plus random zero padding.

    ``canvas_ratio`` sets the padded canvas relative to the input size and
    ``min_resize`` the lower end of the resize range relative to the canvas.
    """

    probability: float = 0.5
    canvas_ratio: float = 1.1
    min_resize: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability must be in [0, 1], got {self.probability}")
        if self.canvas_ratio < 1.0:
            raise ConfigError(f"canvas_ratio must be >= 1, got {self.canvas_ratio}")
        if not 0.0 < self.min_resize <= 1.0:
            raise ConfigError(f"min_resize must be in (0, 1], got {self.min_resize}")


@dataclass(frozen=True)
class TimConfig:
    """Translation-invariant smoothing kernel applied to averaged gradients."""

    kernel_size: int = 7
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.kind != "gaussian":
            raise ConfigError(f"unsupported kernel kind {self.kind!r}")


@dataclass(frozen=True)
class SimConfig:
    """Scale-invariant copies x / 2^i for i in [0, num_copies)."""

    num_copies: int = 5

    def __post_init__(self):
        if self.num_copies < 1:
            raise ConfigError(f"num_copies must be >= 1, got {self.num_copies}")


@dataclass(frozen=True)
class AdmixConfig:
    """Admix: blend in images from other classes, then take scale copies."""

    num_copies: int = 5
    num_sampled: int = 3
    strength: float = 0.2

    def __post_init__(self):
        if self.num_copies < 1 or self.num_sampled < 1:
            raise ConfigError("num_copies and num_sampled must be >= 1")
        if self.strength < 0:
            raise ConfigError(f"strength must be >= 0, got {self.strength}")


@dataclass(frozen=True)
class SpectrumConfig:
    """Frequency-domain transform: noise, DCT, random coefficient mask, inverse DCT.

    ``sigma`` is given in 0-255 pixel units to match budget conventions and is
    converted internally.
    """

    rho: float = 0.5
    sigma: float = 16.0
    num_transforms: int = 20

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must be in [0, 1), got {self.rho}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.num_transforms < 1:
            raise ConfigError(f"num_transforms must be >= 1, got {self.num_transforms}")


# ---------------------------------------------------------------------------
# diverse input (resize + pad)
# ---------------------------------------------------------------------------

def _dim_layout(height: int, width: int, cfg: DimConfig, gen: torch.Generator):
    """Draw one random resize/pad layout, or None when the transform is skipped.

    Draw order (one stream): apply ~ U(0,1), resize fraction ~ U(min_resize, 1),
    top offset, left offset.
    """
    u = torch.rand((), generator=gen).item()
    if u >= cfg.probability:
        return None
    canvas_h = round(height * cfg.canvas_ratio)
    canvas_w = round(width * cfg.canvas_ratio)
    frac = cfg.min_resize + (1.0 - cfg.min_resize) * torch.rand((), generator=gen).item()
    sub_h = max(1, round(frac * canvas_h))
    sub_w = max(1, round(frac * canvas_w))
    top = int(torch.randint(0, canvas_h - sub_h + 1, (), generator=gen))
    left = int(torch.randint(0, canvas_w - sub_w + 1, (), generator=gen))
    return sub_h, sub_w, top, left, canvas_h, canvas_w


def _dim_canvas(x: Tensor, layout) -> Tensor:
    """Resize a (B, C, H, W) batch and zero-pad it onto the enlarged canvas."""
    sub_h, sub_w, top, left, canvas_h, canvas_w = layout
    resized = F.interpolate(x, size=(sub_h, sub_w), mode="bilinear", align_corners=False)
    return F.pad(resized, (left, canvas_w - sub_w - left, top, canvas_h - sub_h - top))


def dim_transform_bchw(x: Tensor, cfg: DimConfig, gen: torch.Generator) -> Tensor:
    """Apply an independent diverse-input draw to each batch element."""
    height, width = x.shape[-2:]
    outs = []
    for i in range(x.shape[0]):
        layout = _dim_layout(height, width, cfg, gen)
        xi = x[i:i + 1]
        if layout is None:
            outs.append(xi)
        else:
            canvas = _dim_canvas(xi, layout)
            outs.append(F.interpolate(canvas, size=(height, width),
                                      mode="bilinear", align_corners=False))
    return torch.cat(outs, dim=0)


def dim_transform(x: Tensor, cfg: DimConfig, gen: torch.Generator) -> Tensor:
    """Diverse-input transform of an (H, W, C) image; output shape unchanged."""
    return bchw_to_hwc(dim_transform_bchw(hwc_to_bchw(as_image(x)), cfg, gen))[0]


# ---------------------------------------------------------------------------
# translation-invariant gradient smoothing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _gaussian_kernel_cached(k: int, dtype_name: str) -> Tensor:
    dtype = getattr(torch, dtype_name)
    if k == 1:
        return torch.ones((1, 1), dtype=dtype)
    sigma = k / 3.0
    coords = torch.arange(k, dtype=dtype) - (k - 1) / 2.0
    gauss = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = torch.outer(gauss, gauss)
    return kernel / kernel.sum()


def smoothing_kernel(cfg: TimConfig, dtype: torch.dtype = torch.float32) -> Tensor:
    """Normalized k x k Gaussian (std = k/3) used for gradient smoothing."""
    return _gaussian_kernel_cached(cfg.kernel_size, str(dtype).split(".")[-1]).clone()


def tim_smooth_bchw(g: Tensor, cfg: TimConfig) -> Tensor:
    k = cfg.kernel_size
    if k == 1:
        return g
    channels = g.shape[1]
    kernel = smoothing_kernel(cfg, g.dtype).to(g.device)
    weight = kernel.expand(channels, 1, k, k)
    return F.conv2d(g, weight, padding=k // 2, groups=channels)


def tim_smooth(g: Tensor, cfg: TimConfig) -> Tensor:
    """Depthwise convolution of an (H, W, C) gradient with the smoothing kernel.

    Borders are zero-padded so the output shape matches the input.
    """
    g = as_image(g) if g.dtype not in (torch.float32, torch.float64) else g
    if g.ndim != 3:
        raise ConfigError(f"expected (H, W, C) gradient, got shape {tuple(g.shape)}")
    return bchw_to_hwc(tim_smooth_bchw(hwc_to_bchw(g), cfg))[0]


# ---------------------------------------------------------------------------
# scale copies and admixing
# ---------------------------------------------------------------------------

def sim_copies_bchw(x: Tensor, cfg: SimConfig) -> Tensor:
    """(B, C, H, W) -> (B * num_copies, C, H, W), scales grouped per copy."""
    return torch.cat([x * (0.5 ** i) for i in range(cfg.num_copies)], dim=0)


def sim_copies(x: Tensor, cfg: SimConfig) -> list[Tensor]:
    """Scale copies [x, x/2, ..., x/2^(m-1)] of an (H, W, C) image."""
    x = as_image(x)
    return [x * (0.5 ** i) for i in range(cfg.num_copies)]


def admix_batch(x: Tensor, pool: list[Tensor], cfg: AdmixConfig,
                gen: torch.Generator) -> list[Tensor]:
    """Blend sampled other-class images into x, then produce scale copies.

    Returns the num_copies * num_sampled images clip((x + strength * x') / 2^i)
    ordered with all scales of one sampled image before the next.
    """
    if not pool:
        raise ConfigError("admix pool is empty; supply images from other classes")
    x = as_image(x)
    picks = torch.randint(0, len(pool), (cfg.num_sampled,), generator=gen)
    out = []
    for j in picks.tolist():
        mixed = x + cfg.strength * as_image(pool[j])
        for i in range(cfg.num_copies):
            out.append(clip01(mixed * (0.5 ** i)))
    return out


def admix_expand_bchw(x: Tensor, pool: Tensor, cfg: AdmixConfig,
                      gen: torch.Generator) -> Tensor:
    """In-graph admix expansion of a (B, C, H, W) batch against a (P, C, H, W) pool."""
    if pool is None or len(pool) == 0:
        raise ConfigError("admix pool is empty; supply images from other classes")
    picks = torch.randint(0, pool.shape[0], (cfg.num_sampled,), generator=gen)
    out = []
    for j in picks.tolist():
        mixed = x + cfg.strength * pool[j:j + 1]
        for i in range(cfg.num_copies):
            out.append(clip01(mixed * (0.5 ** i)))
    return torch.cat(out, dim=0)


# ---------------------------------------------------------------------------
# orthonormal 2-D DCT and the spectrum transform
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _dct_matrix_cached(n: int, dtype_name: str) -> Tensor:
    dtype = getattr(torch, dtype_name)
    i = torch.arange(n, dtype=torch.float64)
    k = i.unsqueeze(1)
    mat = torch.cos(math.pi * (2.0 * i + 1.0) * k / (2.0 * n))
    mat[0] *= math.sqrt(1.0 / n)
    mat[1:] *= math.sqrt(2.0 / n)
    return mat.to(dtype)


def dct_matrix(n: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """Orthonormal type-II DCT matrix C with dct(v) = C @ v."""
    return _dct_matrix_cached(n, str(dtype).split(".")[-1]).clone()


def dct2(x: Tensor) -> Tensor:
    """Orthonormal type-II 2-D DCT over the last two dimensions."""
    x = torch.as_tensor(x)
    ch = dct_matrix(x.shape[-2], x.dtype).to(x.device)
    cw = dct_matrix(x.shape[-1], x.dtype).to(x.device)
    return ch @ x @ cw.T


def idct2(x: Tensor) -> Tensor:
    """Inverse of :func:`dct2`; idct2(dct2(x)) == x up to float error."""
    x = torch.as_tensor(x)
    ch = dct_matrix(x.shape[-2], x.dtype).to(x.device)
    cw = dct_matrix(x.shape[-1], x.dtype).to(x.device)
    return ch.T @ x @ cw


def spectrum_transform_bchw(x: Tensor, cfg: SpectrumConfig,
                            gen: torch.Generator) -> Tensor:
    """Noise + random spectral mask in the DCT domain, clipped back to [0, 1].

    Draw order (one stream): pixel noise ~ N(0, sigma^2), then the
    coefficient mask ~ U(1 - rho, 1 + rho).
    """
    sigma = cfg.sigma / PIXEL_SCALE
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device) * sigma
    mask = 1.0 - cfg.rho + 2.0 * cfg.rho * torch.rand(
        x.shape, generator=gen, dtype=x.dtype, device=x.device)
    return clip01(idct2(dct2(x + noise) * mask))


def spectrum_transform(x: Tensor, cfg: SpectrumConfig, gen: torch.Generator) -> Tensor:
    """Spectrum transform of an (H, W, C) image; per-channel 2-D DCT."""
    return bchw_to_hwc(spectrum_transform_bchw(hwc_to_bchw(as_image(x)), cfg, gen))[0]
