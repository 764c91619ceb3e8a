"""Iterative sign-gradient attacks with transform-averaged gradients.

One engine drives every attack variant. Each iteration builds a set of
views of the current iterate (style-mixed samples, spectrum samples, scale
copies, resize/pad jitter, or just the iterate itself), averages the loss
gradient over the views in float64, optionally smooths it with a fixed
kernel, folds it into an L1-normalized momentum buffer and takes a signed
step projected onto the epsilon ball.

Degenerate settings reduce exactly to the simpler attacks (for instance a
style mix weight of 1 with zero extra noise and one sample walks the same
code path as plain momentum sign-gradient), which the tests pin down
bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (AttackBudget, ClassifierHandle, ConfigError, InputError,
                   LabeledExample, MomentumState, Tensor, bchw_to_hwc,
                   check_budget, hwc_to_bchw, momentum_update,
                   sign_step_and_clip)
from .style import StmConfig, StyleNetwork, mix_and_perturb
from .transforms import (AdmixConfig, DimConfig, SimConfig, SpectrumConfig,
                         TimConfig, admix_expand_bchw, dim_transform_bchw,
                         sim_copies_bchw, spectrum_transform_bchw, tim_smooth)

log = logging.getLogger(__name__)

ATTACK_NAMES = ("ifgsm", "mifgsm", "dim", "tim", "sim", "admix", "s2im",
                "stm", "st-dim", "st-tim", "st-sim")

# views are processed in fixed-size chunks so the float64 gradient buffer
# is filled in a deterministic order regardless of sample counts
_CHUNK_ROWS = 32


@dataclass(frozen=True)
class AttackSpec:
    """Serializable description of one attack configuration."""

    name: str
    budget: AttackBudget
    mode: str = "untargeted"
    stm: StmConfig | None = None
    dim: DimConfig | None = None
    sim: SimConfig | None = None
    admix: AdmixConfig | None = None
    spectrum: SpectrumConfig | None = None
    smoothing: TimConfig | None = None

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"mode must be 'untargeted' or 'targeted', "
                              f"got {self.mode!r}")
        if self.sim is not None and self.admix is not None:
            raise ConfigError("sim and admix expansions are mutually exclusive "
                              "(admix already includes scale copies)")


def make_attack_spec(name: str, budget: AttackBudget, *, mode: str = "untargeted",
                     stm: StmConfig | None = None, dim: DimConfig | None = None,
                     sim: SimConfig | None = None, admix: AdmixConfig | None = None,
                     spectrum: SpectrumConfig | None = None,
                     smoothing: TimConfig | None = None) -> AttackSpec:
    """Build the named attack, filling in standard defaults.

    Explicit config arguments override the defaults the name implies, so
    callers can e.g. request "stm" with a custom sample count.
    """
    if name not in ATTACK_NAMES:
        raise ConfigError(f"unknown attack {name!r}; choose from {ATTACK_NAMES}")
    if name == "ifgsm":
        budget = dataclasses.replace(budget, momentum_decay=0.0)
    wants_stm = name in ("stm", "st-dim", "st-tim", "st-sim")
    if wants_stm and stm is None:
        stm = StmConfig()
    if name in ("dim", "st-dim") and dim is None:
        dim = DimConfig()
    if name in ("tim", "st-tim") and smoothing is None:
        smoothing = TimConfig()
    if name in ("sim", "st-sim") and sim is None:
        sim = SimConfig()
    if name == "admix" and admix is None:
        admix = AdmixConfig()
    if name == "s2im" and spectrum is None:
        spectrum = SpectrumConfig()
    return AttackSpec(name=name, budget=budget, mode=mode, stm=stm, dim=dim,
                      sim=sim, admix=admix, spectrum=spectrum,
                      smoothing=smoothing)


def spec_to_dict(spec: AttackSpec) -> dict:
    out = {"name": spec.name, "mode": spec.mode,
           "budget": dataclasses.asdict(spec.budget)}
    for field in ("stm", "dim", "sim", "admix", "spectrum", "smoothing"):
        cfg = getattr(spec, field)
        out[field] = None if cfg is None else dataclasses.asdict(cfg)
    return out


_CFG_TYPES = {"stm": StmConfig, "dim": DimConfig, "sim": SimConfig,
              "admix": AdmixConfig, "spectrum": SpectrumConfig,
              "smoothing": TimConfig}


def spec_from_dict(data: dict) -> AttackSpec:
    try:
        kwargs = {"name": data["name"], "mode": data.get("mode", "untargeted"),
                  "budget": AttackBudget(**data["budget"])}
        for field, cls in _CFG_TYPES.items():
            raw = data.get(field)
            kwargs[field] = None if raw is None else cls(**raw)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed attack spec: {exc}") from exc
    return AttackSpec(**kwargs)


def spec_hash(spec: AttackSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

class _FusedLogits(nn.Module):
    def __init__(self, models: list[nn.Module], weights: list[float]):
        super().__init__()
        self.models = nn.ModuleList(models)
        self.weights = list(weights)

    def forward(self, x):
        out = None
        for w, m in zip(self.weights, self.models):
            term = w * m(x)
            out = term if out is None else out + term
        return out


def make_ensemble(handles: list[ClassifierHandle],
                  weights: list[float] | None = None) -> ClassifierHandle:
    """Fuse classifiers by weighted logit sum into one attackable handle."""
    if not handles:
        raise ConfigError("an ensemble needs at least one classifier")
    counts = {h.class_count for h in handles}
    if len(counts) != 1:
        raise ConfigError(f"ensemble members disagree on class count: {counts}")
    if weights is None:
        weights = [1.0 / len(handles)] * len(handles)
    if len(weights) != len(handles):
        raise ConfigError(f"{len(weights)} weights for {len(handles)} models")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ConfigError(f"ensemble weights must sum to 1, got {sum(weights)}")
    fused = _FusedLogits([h.model for h in handles], weights)
    name = "ens(" + "+".join(h.name for h in handles) + ")"
    return ClassifierHandle(fused, class_count=counts.pop(), name=name)


# ---------------------------------------------------------------------------
# the engine
# ---------------------------------------------------------------------------

@dataclass
class IterationStats:
    loss: float
    grad_l1: float
    momentum_l1: float


@dataclass
class AttackTrace:
    """Outcome of one attack run: final image plus per-iteration telemetry."""

    name: str
    adversary: Tensor
    stats: list[IterationStats]
    views_per_iteration: int


def _stm_leaves(cfg: StmConfig, x_bchw: Tensor, x0_bchw: Tensor,
                style_net: StyleNetwork, epsilon: float,
                gen: torch.Generator) -> Tensor:
    """Sample the mixed images whose gradients get averaged (detached)."""
    n = cfg.num_samples
    base = x_bchw if cfg.mix_base == "iterate" else x0_bchw
    base_rep = base.expand(n, -1, -1, -1)
    if cfg.gamma == 1.0:
        # the styled term has weight zero: skip stylization and its z draws
        mixed = mix_and_perturb(base_rep, base_rep, cfg.gamma, cfg.beta,
                                epsilon, gen)
    else:
        z = torch.randn((n, style_net.embedding_dim), generator=gen)
        with torch.no_grad():
            styled = style_net(x_bchw.expand(n, -1, -1, -1), z)
        mixed = mix_and_perturb(base_rep, styled, cfg.gamma, cfg.beta,
                                epsilon, gen)
    return mixed.detach()


def _expand_views(spec: AttackSpec, rows: Tensor, admix_pool: Tensor | None,
                  gen: torch.Generator) -> Tensor:
    """In-graph view construction; draw order: spectrum, admix, resize/pad."""
    h = rows
    if spec.spectrum is not None:
        h = spectrum_transform_bchw(h, spec.spectrum, gen)
    if spec.admix is not None:
        h = admix_expand_bchw(h, admix_pool, spec.admix, gen)
    elif spec.sim is not None:
        h = sim_copies_bchw(h, spec.sim)
    if spec.dim is not None:
        h = dim_transform_bchw(h, spec.dim, gen)
    return h


def _view_loss(logits: Tensor, label: Tensor, mode: str) -> Tensor:
    losses = F.cross_entropy(logits, label.expand(logits.shape[0]),
                             reduction="sum")
    return -losses if mode == "targeted" else losses


def _averaged_gradient(spec: AttackSpec, surrogate: ClassifierHandle,
                       x: Tensor, x0: Tensor, label: Tensor,
                       gen: torch.Generator, style_net: StyleNetwork | None,
                       admix_pool: Tensor | None) -> tuple[Tensor, float, int]:
    """Mean view gradient at the current iterate, accumulated in float64.

    Returns (gradient as HWC float64, mean view loss, view count).
    """
    x_bchw = hwc_to_bchw(x)
    x0_bchw = hwc_to_bchw(x0)
    if spec.stm is not None and spec.stm.gradient_through_style:
        return _chain_rule_gradient(spec, surrogate, x_bchw, x0_bchw, label,
                                    gen, style_net, admix_pool)
    if spec.stm is not None:
        leaf_rows = _stm_leaves(spec.stm, x_bchw, x0_bchw, style_net,
                                spec.budget.epsilon, gen)
    elif spec.spectrum is not None:
        # the spectrum transform is one draw per row; stochastic averaging
        # comes from replicating the iterate across rows
        leaf_rows = x_bchw.expand(spec.spectrum.num_transforms, -1, -1, -1)
    else:
        leaf_rows = x_bchw
    leaf = leaf_rows.detach().clone().requires_grad_(True)
    buf = torch.zeros(leaf.shape, dtype=torch.float64)
    loss_total = 0.0
    views_total = 0
    for i in range(0, leaf.shape[0], _CHUNK_ROWS):
        chunk = leaf[i:i + _CHUNK_ROWS]
        views = _expand_views(spec, chunk, admix_pool, gen)
        loss = _view_loss(surrogate.model(views), label, spec.mode)
        loss.backward()
        buf += leaf.grad.double()
        leaf.grad = None
        loss_total += abs(loss.item())
        views_total += views.shape[0]
    g = buf.sum(dim=0) / views_total
    return bchw_to_hwc(g.unsqueeze(0))[0], loss_total / views_total, views_total


def _chain_rule_gradient(spec: AttackSpec, surrogate: ClassifierHandle,
                         x_bchw: Tensor, x0_bchw: Tensor, label: Tensor,
                         gen: torch.Generator, style_net: StyleNetwork,
                         admix_pool: Tensor | None) -> tuple[Tensor, float, int]:
    """Variant that backpropagates through the style network itself."""
    cfg = spec.stm
    leaf = x_bchw.detach().clone().requires_grad_(True)
    n = cfg.num_samples
    rep = leaf.expand(n, -1, -1, -1)
    base = rep if cfg.mix_base == "iterate" else x0_bchw.expand(n, -1, -1, -1)
    if cfg.gamma == 1.0:
        mixed = mix_and_perturb(base, base, cfg.gamma, cfg.beta,
                                spec.budget.epsilon, gen)
    else:
        z = torch.randn((n, style_net.embedding_dim), generator=gen)
        styled = style_net(rep, z)
        mixed = mix_and_perturb(base, styled, cfg.gamma, cfg.beta,
                                spec.budget.epsilon, gen)
    views = _expand_views(spec, mixed, admix_pool, gen)
    loss = _view_loss(surrogate.model(views), label, spec.mode)
    loss.backward()
    views_total = views.shape[0]
    g = leaf.grad[0].double() / views_total
    return bchw_to_hwc(g.unsqueeze(0))[0], abs(loss.item()) / views_total, views_total


def run_attack(spec: AttackSpec, surrogate: ClassifierHandle,
               example: LabeledExample, gen: torch.Generator, *,
               style_net: StyleNetwork | None = None,
               admix_pool: Tensor | None = None) -> AttackTrace:
    """Run one attack on one example; fully determined by the generator state."""
    if spec.stm is not None and style_net is None:
        raise ConfigError(f"attack {spec.name!r} needs a style network")
    if spec.admix is not None and (admix_pool is None or len(admix_pool) == 0):
        raise ConfigError(f"attack {spec.name!r} needs a non-empty mixing pool")
    if spec.mode == "targeted" and example.target_label is None:
        raise InputError("targeted mode needs an example with a target label")
    pool_bchw = hwc_to_bchw(admix_pool) if spec.admix is not None else None
    x0 = example.image.detach().clone()
    x = x0.clone()
    y = torch.tensor(example.target_label if spec.mode == "targeted"
                     else example.label)
    budget = spec.budget
    state = MomentumState.zeros(x0.shape)
    stats: list[IterationStats] = []
    views = 0
    for _ in range(budget.iterations):
        g, mean_loss, views = _averaged_gradient(spec, surrogate, x, x0, y,
                                                 gen, style_net, pool_bchw)
        if spec.smoothing is not None:
            g = tim_smooth(g, spec.smoothing)
        state = momentum_update(state, g, budget.momentum_decay)
        x = sign_step_and_clip(x, x0, state.g, budget.step_size, budget.epsilon)
        stats.append(IterationStats(loss=mean_loss,
                                    grad_l1=g.abs().sum().item(),
                                    momentum_l1=state.g.abs().sum().item()))
    check_budget(x, x0, budget.epsilon)
    return AttackTrace(name=spec.name, adversary=x, stats=stats,
                       views_per_iteration=views)


def run_stm(surrogate: ClassifierHandle, example: LabeledExample,
            style_net: StyleNetwork, budget: AttackBudget,
            gen: torch.Generator, config: StmConfig = StmConfig()) -> AttackTrace:
    """Style-mixing attack with standard settings; see run_attack."""
    spec = make_attack_spec("stm", budget, stm=config)
    return run_attack(spec, surrogate, example, gen, style_net=style_net)
