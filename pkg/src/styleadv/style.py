"""Embedding-conditioned style network and its training procedures.

The network re-renders an image under a style selected by a latent vector
``z``. Styling happens through conditional instance normalization: every
conv layer is followed by an instance norm whose per-channel scale and
shift are affine functions of ``z`` (scales kept positive via softplus).

At initialization the network is an identity map: the final conv is
zero-initialized and the output head is ``sigmoid(decoder + logit(x))``,
so untrained weights reproduce the input almost exactly. Training moves
feature statistics toward convex combinations of a small style corpus
(pretraining) and then nudges the network so stylized images stay
recognizable to an ensemble of classifiers (fine-tuning).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ClassifierHandle, ConfigError, InputError, Tensor,
                   as_image, bchw_to_hwc, clip01, hwc_to_bchw)

log = logging.getLogger(__name__)

# softplus(x) = 1 at this bias, so conditional scales start near identity
_SOFTPLUS_ONE = 0.5413248546129181
_SKIP_EPS = 1e-4


class ConditionalInstanceNorm2d(nn.Module):
    """Instance norm whose affine parameters are functions of an embedding."""

    def __init__(self, channels: int, embedding_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False,
                                      track_running_stats=False)
        self.to_scale = nn.Linear(embedding_dim, channels)
        self.to_shift = nn.Linear(embedding_dim, channels)
        nn.init.normal_(self.to_scale.weight, std=0.05)
        nn.init.constant_(self.to_scale.bias, _SOFTPLUS_ONE)
        nn.init.normal_(self.to_shift.weight, std=0.05)
        nn.init.zeros_(self.to_shift.bias)

    def forward(self, h: Tensor, z: Tensor) -> Tensor:
        scale = F.softplus(self.to_scale(z))[:, :, None, None]
        shift = self.to_shift(z)[:, :, None, None]
        return self.norm(h) * scale + shift


class _StyledConv(nn.Module):
    def __init__(self, in_ch, out_ch, embedding_dim, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.cin = ConditionalInstanceNorm2d(out_ch, embedding_dim)

    def forward(self, h, z):
        return F.relu(self.cin(self.conv(h), z))


class _StyledResBlock(nn.Module):
    def __init__(self, channels, embedding_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.cin1 = ConditionalInstanceNorm2d(channels, embedding_dim)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.cin2 = ConditionalInstanceNorm2d(channels, embedding_dim)

    def forward(self, h, z):
        r = F.relu(self.cin1(self.conv1(h), z))
        r = self.cin2(self.conv2(r), z)
        return h + r


class StyleNetwork(nn.Module):
    """Encoder / residual / decoder image-to-image net conditioned on z.

    Input and output are (B, 3, H, W) in [0, 1]; differentiable in both the
    image and the embedding. ``finetuned`` records whether the weights went
    through classifier-ensemble fine-tuning (persisted in checkpoints).
    """

    def __init__(self, embedding_dim: int = 100, base_width: int = 20):
        super().__init__()
        if embedding_dim < 1 or base_width < 4:
            raise ConfigError("embedding_dim must be >= 1 and base_width >= 4")
        self.embedding_dim = embedding_dim
        self.base_width = base_width
        w = base_width
        d = embedding_dim
        self.enc1 = _StyledConv(3, w, d)
        self.enc2 = _StyledConv(w, w + 12, d, stride=2)
        self.enc3 = _StyledConv(w + 12, w + 28, d, stride=2)
        self.res1 = _StyledResBlock(w + 28, d)
        self.res2 = _StyledResBlock(w + 28, d)
        self.dec1 = _StyledConv(w + 28, w + 12, d)
        self.dec2 = _StyledConv(w + 12, w, d)
        self.final = nn.Conv2d(w, 3, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)
        self.finetuned = False

    @property
    def arch_kwargs(self) -> dict:
        return {"embedding_dim": self.embedding_dim,
                "base_width": self.base_width}

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if z.dim() == 1:
            z = z.unsqueeze(0).expand(x.shape[0], -1)
        if z.shape != (x.shape[0], self.embedding_dim):
            raise InputError(f"embedding shape {tuple(z.shape)} does not match "
                             f"batch {x.shape[0]} x dim {self.embedding_dim}")
        z = z.to(x.dtype)
        full = x.shape[-2:]
        h = self.enc1(x, z)
        h = self.enc2(h, z)
        mid = h.shape[-2:]
        h = self.enc3(h, z)
        h = self.res1(h, z)
        h = self.res2(h, z)
        h = F.interpolate(h, size=mid, mode="nearest")
        h = self.dec1(h, z)
        h = F.interpolate(h, size=full, mode="nearest")
        h = self.dec2(h, z)
        return torch.sigmoid(self.final(h) + torch.logit(x, eps=_SKIP_EPS))


def sample_embedding(dim: int = 100, gen: torch.Generator | None = None,
                     batch: int | None = None) -> Tensor:
    """Draw z ~ N(0, I); one vector, or (batch, dim) when batch is given."""
    shape = (dim,) if batch is None else (batch, dim)
    return torch.randn(shape, generator=gen)


def stylize(net: StyleNetwork, image: Tensor, z: Tensor) -> Tensor:
    """Apply the style network to one (H, W, C) image; stays differentiable."""
    x = as_image(image)
    return bchw_to_hwc(net(hwc_to_bchw(x), z))[0]


def mix_and_perturb(x_base: Tensor, x_styled: Tensor, gamma: float,
                    beta: float, epsilon: float,
                    gen: torch.Generator | None = None) -> Tensor:
    """gamma * base + (1 - gamma) * styled + uniform noise in [-beta*eps, beta*eps].

    With gamma == 1 and beta == 0 the base tensor is returned exactly (a
    clone), bypassing arithmetic and clipping so reductions stay bitwise
    identical. Noise is a single uniform draw shaped like the image.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    if beta < 0 or epsilon < 0:
        raise ConfigError("beta and epsilon must be non-negative")
    if x_base.shape != x_styled.shape:
        raise InputError(f"shape mismatch: {tuple(x_base.shape)} vs "
                         f"{tuple(x_styled.shape)}")
    if gamma == 1.0 and beta == 0.0:
        return x_base.clone()
    mixed = gamma * x_base + (1.0 - gamma) * x_styled
    if beta > 0 and epsilon > 0:
        r = torch.rand(x_base.shape, generator=gen, dtype=x_base.dtype)
        mixed = mixed + (2.0 * r - 1.0) * (beta * epsilon)
    return clip01(mixed)


@dataclass(frozen=True)
class StmConfig:
    """Knobs for style-augmented gradient averaging.

    mix_base selects what the stylized image is blended with: the current
    adversarial iterate (default) or the clean input. gradient_through_style
    additionally backpropagates through the style network instead of
    treating the mixed image as a leaf.
    """

    gamma: float = 0.5
    beta: float = 2.0
    num_samples: int = 20
    mix_base: str = "iterate"
    gradient_through_style: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.mix_base not in ("iterate", "clean"):
            raise ConfigError(f"mix_base must be 'iterate' or 'clean', "
                              f"got {self.mix_base!r}")


# ---------------------------------------------------------------------------
# pretraining: move feature statistics toward corpus styles
# ---------------------------------------------------------------------------

class _FeatureNet(nn.Module):
    """Fixed random-weight conv features used as the style statistic space."""

    def __init__(self, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList([
            nn.Conv2d(3, 8, 3, padding=1),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
        ])
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, generator=gen)
            nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


def _channel_stats(feat: Tensor) -> tuple[Tensor, Tensor]:
    mu = feat.mean(dim=(2, 3))
    sigma = feat.std(dim=(2, 3), unbiased=False)
    return mu, sigma


def pretrain_style_network(styles: Tensor, contents: Tensor, *,
                           embedding_dim: int = 100, base_width: int = 20,
                           steps: int = 400, batch_size: int = 16,
                           lr: float = 1e-3, content_weight: float = 1.0,
                           style_weight: float = 25.0,
                           seed: int = 0) -> StyleNetwork:
    """Train a fresh network so z indexes blends of corpus style statistics.

    ``styles`` is (S, H, W, C) with S >= 4; ``contents`` is (N, H, W, C).
    A fixed random matrix U maps z to softmax weights over the S styles;
    the loss pulls per-channel feature means/stds of the output toward the
    weighted corpus statistics while keeping deep features close to the
    content image. Fully determined by the seed.
    """
    if styles.dim() != 4 or styles.shape[0] < 4:
        raise ConfigError(f"style corpus must contain at least 4 images, "
                          f"got shape {tuple(styles.shape)}")
    if contents.dim() != 4 or len(contents) == 0:
        raise ConfigError("content image stack must be non-empty (N, H, W, C)")
    torch.manual_seed(seed)
    net = StyleNetwork(embedding_dim=embedding_dim, base_width=base_width)
    net.train()
    phi = _FeatureNet(seed=seed + 1)
    gen = torch.Generator().manual_seed(seed + 2)
    mix_matrix = torch.randn((styles.shape[0], embedding_dim),
                             generator=torch.Generator().manual_seed(seed + 3))

    with torch.no_grad():
        style_feats = phi(hwc_to_bchw(styles))
        style_stats = [_channel_stats(f) for f in style_feats]  # (S, C) pairs

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(contents)
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        z = torch.randn((batch_size, embedding_dim), generator=gen)
        xb = hwc_to_bchw(contents[idx])
        weights = torch.softmax(mix_matrix @ z.T, dim=0)  # (S, B)
        out = net(xb, z)
        out_feats = phi(out)
        with torch.no_grad():
            content_feats = phi(xb)
        style_loss = out.new_zeros(())
        for (mu_s, sig_s), feat in zip(style_stats, out_feats):
            target_mu = weights.T @ mu_s       # (B, C)
            target_sig = weights.T @ sig_s
            mu, sig = _channel_stats(feat)
            style_loss = style_loss + F.mse_loss(mu, target_mu) \
                + F.mse_loss(sig, target_sig)
        content_loss = F.mse_loss(out_feats[-1], content_feats[-1])
        loss = content_weight * content_loss + style_weight * style_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.debug("pretrain step %d: content %.4f style %.4f",
                      step, content_loss.item(), style_loss.item())
    net.eval()
    net.finetuned = False
    return net


# ---------------------------------------------------------------------------
# fine-tuning: keep stylized images recognizable to an ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    max_images: int = 1000

    def __post_init__(self):
        if self.epochs < 0 or self.max_images < 1 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0, batch_size and "
                              "max_images >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def select_finetune_images(handles: list[ClassifierHandle], images: Tensor,
                           labels: Tensor, max_images: int) -> tuple[Tensor, Tensor]:
    """Keep images every classifier gets right, capped at max_images."""
    keep = torch.ones(len(images), dtype=torch.bool)
    batch = hwc_to_bchw(images)
    for h in handles:
        keep &= h.predict_batch(batch) == labels
    kept = keep.nonzero(as_tuple=True)[0][:max_images]
    if len(kept) == 0:
        raise ConfigError("no images are correctly classified by the whole "
                          "ensemble; cannot build a fine-tuning set")
    return images[kept], labels[kept]


def finetune_style_network(net: StyleNetwork, handles: list[ClassifierHandle],
                           weights: list[float] | None, images: Tensor,
                           labels: Tensor, config: FinetuneConfig = FinetuneConfig(),
                           seed: int = 0) -> tuple[StyleNetwork, list[float]]:
    """Minimize the weighted ensemble loss on stylized images (fresh z per step).

    Returns a trained copy plus per-epoch mean losses; the input network and
    the classifiers are left untouched. weights default to uniform and must
    sum to 1.
    """
    if not handles:
        raise ConfigError("fine-tuning needs at least one classifier")
    if weights is None:
        weights = [1.0 / len(handles)] * len(handles)
    if len(weights) != len(handles):
        raise ConfigError(f"{len(weights)} weights for {len(handles)} classifiers")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ConfigError(f"ensemble weights must sum to 1, got {sum(weights)}")
    before = [h.checksum for h in handles]

    tuned = copy.deepcopy(net)
    if config.epochs == 0:
        return tuned, []
    tuned.train()
    xs, ys = select_finetune_images(handles, images, labels, config.max_images)
    log.info("fine-tuning on %d ensemble-correct images for %d epochs",
             len(xs), config.epochs)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(tuned.parameters(), lr=config.lr)
    history = []
    n = len(xs)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb = hwc_to_bchw(xs[idx])
            yb = ys[idx]
            z = torch.randn((len(idx), tuned.embedding_dim), generator=gen)
            out = tuned(xb, z)
            loss = out.new_zeros(())
            for w, h in zip(weights, handles):
                loss = loss + w * F.cross_entropy(h.model(out), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("finetune epoch %d: loss %.4f", epoch, history[-1])
    tuned.eval()
    tuned.finetuned = True
    after = [h.checksum for h in handles]
    if before != after:
        raise ConfigError("classifier weights changed during fine-tuning; "
                          "they are expected to stay frozen")
    return tuned, history


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

STYLE_FORMAT_VERSION = 1


def save_style_network(net: StyleNetwork, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    torch.save({"format_version": STYLE_FORMAT_VERSION,
                "arch": net.arch_kwargs,
                "finetuned": bool(net.finetuned),
                "shapes": {k: list(v.shape) for k, v in state.items()},
                "state": state}, path)


def load_style_network(path) -> StyleNetwork:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no style checkpoint at {path}")
    blob = torch.load(path, weights_only=True)
    if blob.get("format_version") != STYLE_FORMAT_VERSION:
        raise ConfigError(f"unsupported style checkpoint version "
                          f"{blob.get('format_version')!r}")
    net = StyleNetwork(**blob["arch"])
    for key, shape in blob["shapes"].items():
        if key not in blob["state"] or list(blob["state"][key].shape) != shape:
            raise ConfigError(f"style checkpoint is inconsistent at key {key!r}")
    net.load_state_dict(blob["state"])
    net.finetuned = bool(blob["finetuned"])
    net.eval()
    return net


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images."""
    mse = F.mse_loss(a.double(), b.double()).item()
    if mse == 0:
        return float("inf")
    return 10.0 * torch.log10(torch.tensor(1.0 / mse)).item()
