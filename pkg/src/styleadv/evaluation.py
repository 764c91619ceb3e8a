"""Experiment harness: run attack variants against a surrogate, measure
transfer to held-out targets (optionally through defenses) and render the
results as a deterministic report.

Every stochastic choice is drawn from a stream derived by hashing
(seed, attack, image index), so runs are reproducible image by image,
independent of execution order or thread count.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from .attacks import (ATTACK_NAMES, AttackSpec, make_attack_spec, run_attack,
                      spec_to_dict)
from .core import (AttackBudget, ClassifierHandle, ConfigError,
                   LabeledExample, Tensor, hwc_to_bchw)
from .defenses import get_defense
from .style import StmConfig, StyleNetwork, mix_and_perturb, sample_embedding

log = logging.getLogger(__name__)

try:
    from importlib.metadata import version as _pkg_version
    PACKAGE_VERSION = _pkg_version("styleadv")
except Exception:  # pragma: no cover - metadata missing in odd installs
    PACKAGE_VERSION = "unknown"

# metadata keys excluded from the report hash because they vary run to run
VOLATILE_KEYS = frozenset({"wall_time_seconds", "finished_at"})


def derive_stream(seed: int, *keys) -> torch.Generator:
    """Independent generator for (seed, *keys), stable across platforms."""
    tag = "|".join([str(seed)] + [str(k) for k in keys])
    digest = hashlib.sha256(tag.encode()).digest()
    value = int.from_bytes(digest[:8], "little")
    return torch.Generator().manual_seed(value)


def pick_eval_indices(surrogate: ClassifierHandle, images: Tensor,
                      labels: Tensor, num_images: int) -> Tensor:
    """First num_images indices the surrogate classifies correctly."""
    if num_images < 1:
        raise ConfigError(f"num_images must be >= 1, got {num_images}")
    preds = surrogate.predict_batch(hwc_to_bchw(images))
    correct = (preds == labels).nonzero(as_tuple=True)[0]
    if len(correct) == 0:
        raise ConfigError(f"surrogate {surrogate.name!r} classifies none of "
                          f"the candidate images correctly")
    if len(correct) < num_images:
        log.warning("only %d of the requested %d eval images are correctly "
                    "classified; using all of them", len(correct), num_images)
    return correct[:num_images]


def attack_success_rate(target: ClassifierHandle, adv_images: Tensor,
                        labels: Tensor, mode: str = "untargeted") -> float:
    """Percent of adversarial images that fool (or hit, if targeted) the model.

    ``labels`` are true labels in untargeted mode and desired labels in
    targeted mode.
    """
    if len(adv_images) == 0:
        raise ConfigError("cannot compute a success rate over zero images")
    preds = target.predict_batch(hwc_to_bchw(adv_images))
    labels = torch.as_tensor(labels)
    hits = (preds == labels) if mode == "targeted" else (preds != labels)
    return 100.0 * hits.double().mean().item()


def admix_pool_indices(labels: Tensor, num_classes: int) -> list[Tensor]:
    """Per class c, the indices of images whose label differs from c."""
    return [(labels != c).nonzero(as_tuple=True)[0] for c in range(num_classes)]


def generate_adversaries(spec: AttackSpec, surrogate: ClassifierHandle,
                         images: Tensor, labels: Tensor, seed: int, *,
                         style_net: StyleNetwork | None = None,
                         pool_images: Tensor | None = None,
                         pool_by_class: list[Tensor] | None = None,
                         target_labels: Tensor | None = None,
                         jobs: int = 1) -> Tensor:
    """Attack each image with its own derived stream; order-independent."""
    if spec.mode == "targeted" and target_labels is None:
        raise ConfigError("targeted attacks need target_labels")

    def one(i: int) -> Tensor:
        ex = LabeledExample(images[i], int(labels[i]),
                            target_label=None if target_labels is None
                            else int(target_labels[i]))
        pool = None
        if spec.admix is not None:
            if pool_images is None or pool_by_class is None:
                raise ConfigError(f"attack {spec.name!r} needs a mixing pool")
            pool = pool_images[pool_by_class[int(labels[i])]]
        gen = derive_stream(seed, spec.name, i)
        return run_attack(spec, surrogate, ex, gen, style_net=style_net,
                          admix_pool=pool).adversary

    n = len(images)
    if jobs <= 1:
        advs = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            advs = list(pool_exec.map(one, range(n)))
    return torch.stack(advs)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings for one attack-vs-targets evaluation matrix.

    epsilon (and sigma-style values elsewhere) are in 0-255 pixel units to
    match the command-line convention; they are converted internally.
    """

    attacks: tuple[str, ...]
    surrogate: str
    targets: tuple[str, ...]
    seeds: tuple[int, ...] = (0,)
    num_images: int = 100
    epsilon: float = 16.0
    iterations: int = 10
    step_size: float | None = None
    momentum_decay: float = 1.0
    mode: str = "untargeted"
    stm: StmConfig = field(default_factory=StmConfig)
    defenses: tuple[str, ...] = ()
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(self.attacks))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "defenses", tuple(self.defenses))
        unknown = [a for a in self.attacks if a not in ATTACK_NAMES]
        if unknown:
            raise ConfigError(f"unknown attacks {unknown}; choose from {ATTACK_NAMES}")
        if not self.attacks or not self.targets or not self.seeds:
            raise ConfigError("attacks, targets and seeds must be non-empty")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget.from_pixel_units(self.epsilon, self.iterations,
                                             self.step_size,
                                             self.momentum_decay)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvaluationReport:
    """Success-rate matrix plus everything needed to reproduce it.

    The hash covers the canonical JSON form minus volatile metadata
    (wall-clock fields), so two runs of the same experiment match exactly.
    """

    config: dict
    clean_accuracy: dict
    results: dict
    metadata: dict

    def canonical_dict(self, include_volatile: bool = False) -> dict:
        meta = {k: v for k, v in self.metadata.items()
                if include_volatile or k not in VOLATILE_KEYS}
        return {"config": self.config, "clean_accuracy": self.clean_accuracy,
                "results": self.results, "metadata": meta}

    def to_json(self, include_volatile: bool = True) -> str:
        return json.dumps(self.canonical_dict(include_volatile), indent=2,
                          sort_keys=True)

    @property
    def report_hash(self) -> str:
        blob = self.to_json(include_volatile=False).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report at {path}: {exc}") from exc
        return cls(config=data["config"], clean_accuracy=data["clean_accuracy"],
                   results=data["results"], metadata=data["metadata"])

    def table(self) -> str:
        """Plain-text success-rate grid (attacks x evaluation columns)."""
        columns: list[str] = []
        for attack in self.results.values():
            for col in attack.get("columns", {}):
                if col not in columns:
                    columns.append(col)
        name_w = max([len(a) for a in self.results] + [6])
        col_w = max([len(c) for c in columns] + [8])
        lines = [" " * name_w + " | " +
                 " | ".join(c.rjust(col_w) for c in columns)]
        lines.append("-" * len(lines[0]))
        for name, attack in self.results.items():
            if "error" in attack:
                lines.append(f"{name.ljust(name_w)} | error: {attack['error']}")
                continue
            cells = [f"{attack['columns'][c]:.2f}".rjust(col_w) if c in attack["columns"]
                     else " " * col_w for c in columns]
            lines.append(f"{name.ljust(name_w)} | " + " | ".join(cells))
        return "\n".join(lines)


def _derive_target_labels(labels: Tensor, num_classes: int,
                          indices: Tensor) -> Tensor:
    """Deterministic wrong-label assignment for targeted experiments."""
    out = []
    for pos, i in enumerate(indices.tolist()):
        gen = derive_stream(0, "target-label", i)
        offset = 1 + int(torch.randint(0, num_classes - 1, (), generator=gen))
        out.append((int(labels[pos]) + offset) % num_classes)
    return torch.tensor(out, dtype=torch.int64)


def run_experiment_matrix(zoo, dataset, config: ExperimentConfig, *,
                          style_net: StyleNetwork | None = None
                          ) -> EvaluationReport:
    """Full attacks-by-targets evaluation; see ExperimentConfig for knobs."""
    started = time.monotonic()
    surrogate = zoo.handle(config.surrogate)
    target_handles = {name: zoo.handle(name) for name in config.targets}
    defense_fns = {name: get_defense(name) for name in config.defenses}

    idx = pick_eval_indices(surrogate, dataset.test_images,
                            dataset.test_labels, config.num_images)
    images = dataset.test_images[idx]
    labels = dataset.test_labels[idx]
    target_labels = None
    if config.mode == "targeted":
        target_labels = _derive_target_labels(labels, zoo.class_count, idx)
    rate_labels = target_labels if config.mode == "targeted" else labels

    needs_pool = any(a == "admix" for a in config.attacks)
    pool_by_class = (admix_pool_indices(dataset.test_labels, zoo.class_count)
                     if needs_pool else None)

    clean_accuracy = {name: 100.0 * zoo.handle(name).accuracy(images, labels)
                      for name in dict.fromkeys((config.surrogate, *config.targets))}

    results: dict[str, dict] = {}
    for attack_name in config.attacks:
        stm = config.stm if attack_name in ("stm", "st-dim", "st-tim", "st-sim") else None
        spec = make_attack_spec(attack_name, config.budget, mode=config.mode,
                                stm=stm)
        per_seed: dict[str, dict[str, float]] = {}
        entry: dict = {"spec": spec_to_dict(spec)}
        try:
            for seed in config.seeds:
                advs = generate_adversaries(
                    spec, surrogate, images, labels, seed,
                    style_net=style_net, pool_images=dataset.test_images,
                    pool_by_class=pool_by_class, target_labels=target_labels,
                    jobs=config.jobs)
                cols: dict[str, float] = {}
                for tname, handle in target_handles.items():
                    cols[tname] = attack_success_rate(handle, advs, rate_labels,
                                                      config.mode)
                    for dname, dfn in defense_fns.items():
                        cleaned = torch.stack([dfn(a) for a in advs])
                        cols[f"{tname}|{dname}"] = attack_success_rate(
                            handle, cleaned, rate_labels, config.mode)
                per_seed[str(seed)] = cols
            col_names = per_seed[str(config.seeds[0])].keys()
            entry["per_seed"] = per_seed
            entry["columns"] = {c: sum(per_seed[str(s)][c] for s in config.seeds)
                                / len(config.seeds) for c in col_names}
        except ConfigError as exc:
            log.error("attack %s failed: %s", attack_name, exc)
            entry["error"] = str(exc)
        results[attack_name] = entry

    metadata = {
        "package_version": PACKAGE_VERSION,
        "image_count": int(len(images)),
        "image_indices": idx.tolist(),
        "surrogate_checksum": surrogate.checksum,
        "target_checksums": {n: h.checksum for n, h in target_handles.items()},
        "style_checksum": (None if style_net is None else
                           _style_checksum(style_net)),
        "wall_time_seconds": round(time.monotonic() - started, 3),
    }
    return EvaluationReport(config=config.to_dict(),
                            clean_accuracy=clean_accuracy,
                            results=results, metadata=metadata)


def _style_checksum(net: StyleNetwork) -> str:
    from .core import state_dict_digest
    return state_dict_digest(net.state_dict())


# ---------------------------------------------------------------------------
# stylization quality and the strategy ablation
# ---------------------------------------------------------------------------

def stylized_accuracy(handles: list[ClassifierHandle], net: StyleNetwork,
                      images: Tensor, labels: Tensor, *, gamma: float = 0.0,
                      beta: float = 0.0, epsilon: float = 16.0 / 255.0,
                      seed: int = 0, batch_size: int = 64) -> float:
    """Mean accuracy of the classifiers on style-mixed images (percent).

    gamma=0, beta=0 scores pure stylizations; gamma>0 blends the original
    back in, which should make images easier to recognize.
    """
    if not handles:
        raise ConfigError("need at least one classifier")
    gen = derive_stream(seed, "stylized-accuracy", gamma, beta)
    accs = [0.0 for _ in handles]
    n = len(images)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            xb = hwc_to_bchw(images[i:i + batch_size])
            yb = labels[i:i + batch_size]
            z = sample_embedding(net.embedding_dim, gen, batch=xb.shape[0])
            styled = net(xb, z)
            mixed = mix_and_perturb(xb, styled, gamma, beta, epsilon, gen)
            for j, h in enumerate(handles):
                preds = h.logits_batch(mixed).argmax(dim=1)
                accs[j] += int((preds == yb).sum())
    return 100.0 * sum(a / n for a in accs) / len(handles)


STRATEGY_ROWS = ("baseline", "stylized", "stylized+finetuned",
                 "stylized+finetuned+mixed")


def run_strategy_ablation(zoo, dataset, raw_net: StyleNetwork,
                          tuned_net: StyleNetwork, *, surrogate: str,
                          targets: tuple[str, ...], seeds: tuple[int, ...] = (0,),
                          num_images: int = 100,
                          budget: AttackBudget | None = None,
                          stm: StmConfig = StmConfig(), jobs: int = 1) -> dict:
    """Success rates for the four incremental strategies, in a fixed order:
    plain momentum baseline, stylization with the raw network, stylization
    with the fine-tuned network, and fine-tuned stylization mixed with the
    iterate. Rates are averaged over the targets and seeds.
    """
    budget = budget or AttackBudget.from_pixel_units(16, 10)
    sur = zoo.handle(surrogate)
    handles = {t: zoo.handle(t) for t in targets}
    idx = pick_eval_indices(sur, dataset.test_images, dataset.test_labels,
                            num_images)
    images = dataset.test_images[idx]
    labels = dataset.test_labels[idx]

    unmixed = dataclasses.replace(stm, gamma=0.0)
    rows = [
        ("baseline", make_attack_spec("mifgsm", budget), None),
        ("stylized", make_attack_spec("stm", budget, stm=unmixed), raw_net),
        ("stylized+finetuned", make_attack_spec("stm", budget, stm=unmixed),
         tuned_net),
        ("stylized+finetuned+mixed", make_attack_spec("stm", budget, stm=stm),
         tuned_net),
    ]
    out = {"rows": [], "targets": list(targets), "seeds": list(seeds),
           "num_images": int(len(images))}
    for name, spec, net in rows:
        per_seed = {}
        for seed in seeds:
            advs = generate_adversaries(spec, sur, images, labels, seed,
                                        style_net=net, jobs=jobs)
            rates = [attack_success_rate(h, advs, labels) for h in handles.values()]
            per_seed[str(seed)] = sum(rates) / len(rates)
        mean = sum(per_seed.values()) / len(per_seed)
        out["rows"].append({"strategy": name, "success_rate": mean,
                            "per_seed": per_seed})
    return out
