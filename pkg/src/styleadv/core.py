"""Shared numeric types: perturbation budgets, the differentiable-classifier
wrapper, and the L-infinity momentum/projection machinery used by every attack.

Image convention throughout the package: a float tensor of shape (H, W, C)
with values in [0, 1]. Classifier modules consume batched (B, C, H, W) input.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

PIXEL_SCALE = 255.0


class StyleAdvError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(StyleAdvError):
    """A configuration value is invalid or inconsistent."""


class InputError(StyleAdvError):
    """An input tensor does not satisfy an operation's preconditions."""


class UnsupportedCapability(StyleAdvError):
    """The requested operation needs a capability the object does not have."""


class TrainingFailure(StyleAdvError):
    """A training run finished below its required quality floor."""


class BudgetViolation(StyleAdvError):
    """Internal invariant breach: an iterate left the perturbation ball."""


def as_image(x) -> Tensor:
    """Coerce an array-like into a float32 (H, W, C) image tensor."""
    t = torch.as_tensor(x)
    if t.ndim != 3:
        raise InputError(f"expected (H, W, C) image, got shape {tuple(t.shape)}")
    if t.dtype not in (torch.float32, torch.float64):
        t = t.float()
    return t


def hwc_to_bchw(x: Tensor) -> Tensor:
    """(H, W, C) -> (1, C, H, W); a (N, H, W, C) stack -> (N, C, H, W)."""
    if x.ndim == 3:
        return x.permute(2, 0, 1).unsqueeze(0)
    if x.ndim == 4:
        return x.permute(0, 3, 1, 2)
    raise InputError(f"expected 3- or 4-D image tensor, got shape {tuple(x.shape)}")


def bchw_to_hwc(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H, W, C); the batch dimension is kept."""
    if x.ndim != 4:
        raise InputError(f"expected (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    return x.permute(0, 2, 3, 1)


def clip01(x: Tensor) -> Tensor:
    return x.clamp(0.0, 1.0)


@dataclass(frozen=True)
class AttackBudget:
    """L-infinity perturbation budget and the iteration schedule.

    ``epsilon`` and ``step_size`` are in [0, 1] pixel units. The default
    step size follows the usual schedule alpha = epsilon / iterations.
    """

    epsilon: float
    iterations: int
    step_size: float | None = None
    momentum_decay: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.momentum_decay < 0:
            raise ConfigError(f"momentum_decay must be >= 0, got {self.momentum_decay}")
        if self.step_size is None:
            alpha = self.epsilon / self.iterations if self.iterations > 0 else 0.0
            object.__setattr__(self, "step_size", alpha)

    @classmethod
    def from_pixel_units(cls, epsilon: float, iterations: int,
                         step_size: float | None = None,
                         momentum_decay: float = 1.0) -> "AttackBudget":
        """Build a budget from 0-255 pixel units (e.g. epsilon=16)."""
        return cls(
            epsilon=epsilon / PIXEL_SCALE,
            iterations=iterations,
            step_size=None if step_size is None else step_size / PIXEL_SCALE,
            momentum_decay=momentum_decay,
        )

    def with_epsilon(self, epsilon: float) -> "AttackBudget":
        return replace(self, epsilon=epsilon, step_size=None)


@dataclass
class LabeledExample:
    """An image with its ground-truth label and optional attack target."""

    image: Tensor
    label: int
    target_label: int | None = None

    def __post_init__(self):
        self.image = as_image(self.image)
        self.label = int(self.label)
        if self.target_label is not None:
            self.target_label = int(self.target_label)
            if self.target_label == self.label:
                raise ConfigError("target_label must differ from the true label")


class ClassifierHandle:
    """Differentiable classifier oracle.

    Wraps an ``nn.Module`` that maps (B, C, H, W) inputs in [0, 1] to logits.
    The handle only exposes what attacks need: logits, cross-entropy loss and
    input gradients. Model parameters are treated as read-only.
    """

    def __init__(self, model: torch.nn.Module, class_count: int, name: str,
                 differentiable: bool = True):
        if class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {class_count}")
        self.model = model.eval()
        self.class_count = int(class_count)
        self.name = str(name)
        self.differentiable = bool(differentiable)
        for p in self.model.parameters():
            p.requires_grad_(False)

    def __repr__(self):
        return f"ClassifierHandle({self.name!r}, K={self.class_count})"

    def _check_label(self, y: int):
        if not 0 <= int(y) < self.class_count:
            raise InputError(f"label {y} out of range for K={self.class_count}")

    def logits_batch(self, x: Tensor) -> Tensor:
        """Logits for a (B, C, H, W) batch."""
        if x.ndim != 4:
            raise InputError(f"expected (B, C, H, W) batch, got shape {tuple(x.shape)}")
        out = self.model(x)
        if out.shape[-1] != self.class_count:
            raise InputError(
                f"model returned {out.shape[-1]} logits, expected {self.class_count}")
        return out

    def logits(self, x: Tensor) -> Tensor:
        """Logits for a single (H, W, C) image."""
        return self.logits_batch(hwc_to_bchw(as_image(x))).squeeze(0)

    def loss(self, x: Tensor, y: int) -> Tensor:
        """Cross-entropy J(x, y) as a scalar tensor."""
        self._check_label(y)
        logits = self.logits(x)
        return F.cross_entropy(logits.unsqueeze(0), torch.tensor([int(y)]))

    def loss_batch(self, x: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
        return F.cross_entropy(self.logits_batch(x), y, reduction=reduction)

    def input_gradient(self, x: Tensor, y: int) -> Tensor:
        """Gradient of the cross-entropy with respect to the input pixels."""
        if not self.differentiable:
            raise UnsupportedCapability(
                f"classifier {self.name!r} does not expose input gradients")
        xg = as_image(x).detach().clone().requires_grad_(True)
        loss = self.loss(xg, y)
        (grad,) = torch.autograd.grad(loss, xg)
        return grad.detach()

    def predict(self, x: Tensor) -> int:
        with torch.no_grad():
            return int(self.logits(x).argmax().item())

    def predict_batch(self, x: Tensor) -> Tensor:
        with torch.no_grad():
            return self.logits_batch(x).argmax(dim=1)

    def accuracy(self, images: Tensor, labels: Tensor, batch_size: int = 256) -> float:
        """Top-1 accuracy over a (B, H, W, C) stack of images."""
        correct = 0
        labels = torch.as_tensor(labels)
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                xb = images[i:i + batch_size].permute(0, 3, 1, 2)
                correct += int((self.logits_batch(xb).argmax(1) == labels[i:i + batch_size]).sum())
        return correct / max(len(images), 1)

    @property
    def checksum(self) -> str:
        return state_dict_digest(self.model.state_dict())


def state_dict_digest(state_dict: dict) -> str:
    """Stable sha256 over a state dict's keys, shapes and raw values."""
    h = hashlib.sha256()
    for key in sorted(state_dict):
        t = state_dict[key]
        h.update(key.encode())
        if isinstance(t, torch.Tensor):
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()


@dataclass
class MomentumState:
    """Accumulated momentum direction; kept in float64 for stable averaging."""

    g: Tensor
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "MomentumState":
        return cls(g=torch.zeros(shape, dtype=torch.float64), t=0)


def l1_normalize(g: Tensor) -> Tensor:
    """Divide by the L1 norm over all entries; all-zero input passes through."""
    norm = g.abs().sum()
    if norm == 0:
        return g
    return g / norm


def momentum_update(state: MomentumState, g_bar: Tensor, mu: float) -> MomentumState:
    """g <- mu * g + g_bar / ||g_bar||_1 (normalization skipped when zero)."""
    if g_bar.shape != state.g.shape:
        raise InputError(
            f"gradient shape {tuple(g_bar.shape)} does not match state {tuple(state.g.shape)}")
    g_new = mu * state.g + l1_normalize(g_bar.to(torch.float64))
    return MomentumState(g=g_new, t=state.t + 1)


def sign_step_and_clip(x_adv: Tensor, x_orig: Tensor, g: Tensor,
                       alpha: float, epsilon: float) -> Tensor:
    """One sign-gradient step projected into the epsilon-ball and [0, 1].

    Returns clip(x_adv + alpha * sign(g)) where the clip enforces both
    ||result - x_orig||_inf <= epsilon and result in [0, 1]. sign(0) = 0.
    """
    if x_adv.shape != x_orig.shape or g.shape != x_adv.shape:
        raise InputError("x_adv, x_orig and g must share one shape")
    if epsilon < 0:
        raise InputError(f"epsilon must be >= 0, got {epsilon}")
    out_dtype = x_adv.dtype
    x64 = x_adv.to(torch.float64)
    o64 = x_orig.to(torch.float64)
    stepped = x64 + alpha * torch.sign(g.to(torch.float64))
    delta = (stepped - o64).clamp(-epsilon, epsilon)
    result64 = (o64 + delta).clamp(0.0, 1.0)
    if out_dtype == torch.float64:
        return result64
    out = result64.to(out_dtype)
    # Casting down can round a boundary pixel a fraction of an ULP outside
    # the ball; nudge the cast bounds inward and re-clip in the output dtype.
    hi64 = o64 + epsilon
    lo64 = o64 - epsilon
    hi = hi64.to(out_dtype)
    lo = lo64.to(out_dtype)
    hi = torch.where(hi.to(torch.float64) > hi64, torch.nextafter(hi, lo), hi)
    lo = torch.where(lo.to(torch.float64) < lo64, torch.nextafter(lo, hi), lo)
    return torch.minimum(torch.maximum(out, lo), hi).clamp(0.0, 1.0)


def check_budget(x_adv: Tensor, x_orig: Tensor, epsilon: float,
                 tol: float = 1e-9) -> None:
    """Raise BudgetViolation if an iterate escaped the ball or [0, 1]."""
    gap = (x_adv.to(torch.float64) - x_orig.to(torch.float64)).abs().max().item()
    if gap > epsilon + tol:
        raise BudgetViolation(f"L-inf distance {gap:.3e} exceeds epsilon {epsilon:.3e}")
    lo, hi = x_adv.min().item(), x_adv.max().item()
    if lo < -tol or hi > 1.0 + tol:
        raise BudgetViolation(f"pixel range [{lo:.3e}, {hi:.3e}] outside [0, 1]")
