"""Command-line pipeline: generate data, train the classifier zoo, pretrain
and fine-tune the style network, run attacks and evaluate transfer.

Settings resolve in a fixed order: an explicit command-line flag beats the
YAML file given via --config, which beats the built-in defaults. Every
command writes a manifest with the fully resolved configuration and sha256
digests of its outputs, and on failure leaves a machine-readable error.json
and exits nonzero.
"""

from __future__ import annotations

import dataclasses
import logging
from contextlib import contextmanager
from pathlib import Path

import click
import yaml
from click.core import ParameterSource

from . import artifacts as art
from .attacks import ATTACK_NAMES, make_attack_spec, spec_to_dict
from .core import AttackBudget, StyleAdvError, ConfigError
from .data import ENV_ROOT, make_shapes_dataset, make_style_corpus
from .evaluation import (EvaluationReport, ExperimentConfig,
                         admix_pool_indices, attack_success_rate,
                         generate_adversaries, pick_eval_indices,
                         run_experiment_matrix)
from .style import (FinetuneConfig, StmConfig, finetune_style_network,
                    load_style_network, pretrain_style_network,
                    save_style_network)
from .transforms import SpectrumConfig
from .zoo import load_zoo, save_zoo, train_toy_classifiers

log = logging.getLogger(__name__)


@click.group()
@click.option("--root", type=click.Path(path_type=Path), envvar=ENV_ROOT,
              default="styleadv_runs", show_default=True,
              help=f"Workspace for datasets, checkpoints and runs "
                   f"(also via ${ENV_ROOT}).")
@click.option("-v", "--verbose", count=True,
              help="Log progress; repeat for debug output.")
@click.pass_context
def main(ctx, root: Path, verbose: int):
    """Transferable adversarial examples via style-mixed gradient averaging."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"root": root}


@contextmanager
def _guarded(command: str, where: Path | list):
    """Write error.json and exit nonzero when a pipeline step fails.

    ``where`` may be a list so commands can redirect the record to the real
    output directory once flags are resolved (the last entry wins).
    """
    try:
        yield
    except StyleAdvError as exc:
        out_dir = Path(where[-1] if isinstance(where, list) else where)
        out_dir.mkdir(parents=True, exist_ok=True)
        record = art.write_error_record(out_dir, command, exc)
        click.echo(f"error ({type(exc).__name__}): {exc}", err=True)
        click.echo(f"error record: {record}", err=True)
        raise SystemExit(2)


def _load_file_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _resolved(ctx, file_cfg: dict, names: list[str]) -> dict:
    """Apply the precedence: CLI flag > config file > declared default."""
    out = {}
    for name in names:
        if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE:
            out[name] = ctx.params[name]
        elif name in file_cfg:
            out[name] = file_cfg[name]
        else:
            out[name] = ctx.params[name]
    return out


def _as_tuple(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(str(v) for v in value)


def _default_paths(root: Path) -> dict:
    return {
        "data": root / "data" / "shapes.npz",
        "styles": root / "data" / "styles.npz",
        "zoo": root / "zoo",
        "pretrained": root / "style" / "pretrained.pt",
        "finetuned": root / "style" / "finetuned.pt",
    }


_STYLE_ATTACKS = ("stm", "st-dim", "st-tim", "st-sim")


def _load_style_for(attacks: tuple[str, ...], path: Path,
                    allow_unfinetuned: bool):
    if not any(a in _STYLE_ATTACKS for a in attacks):
        return None
    net = load_style_network(path)
    if not net.finetuned and not allow_unfinetuned:
        raise ConfigError(
            f"style network at {path} has not been fine-tuned against a "
            f"classifier ensemble; pass --allow-unfinetuned to use it anyway")
    return net


# ---------------------------------------------------------------------------
# data and model preparation
# ---------------------------------------------------------------------------

@main.command("make-data")
@click.option("--seed", default=0, show_default=True)
@click.option("--n-train", default=4000, show_default=True)
@click.option("--n-test", default=1000, show_default=True)
@click.option("--image-size", default=32, show_default=True)
@click.option("--num-styles", default=8, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory [default: <root>/data].")
@click.pass_context
def make_data(ctx, seed, n_train, n_test, image_size, num_styles, out):
    """Generate the synthetic glyph dataset and the style texture corpus."""
    out = out or ctx.obj["root"] / "data"
    cfg = {"seed": seed, "n_train": n_train, "n_test": n_test,
           "image_size": image_size, "num_styles": num_styles}
    with _guarded("make-data", out):
        dataset = make_shapes_dataset(n_train, n_test, image_size, seed=seed)
        styles = make_style_corpus(num_styles, image_size, seed=seed)
        art.save_dataset_npz(dataset, out / "shapes.npz")
        art.save_styles_npz(styles, out / "styles.npz")
        art.write_run_manifest(out, "make-data", cfg,
                               {"shapes.npz": out / "shapes.npz",
                                "styles.npz": out / "styles.npz"})
    click.echo(f"wrote {n_train}+{n_test} glyph images and {num_styles} "
               f"style textures under {out}")


@main.command("train-zoo")
@click.option("--data", type=click.Path(path_type=Path), default=None,
              help="Dataset npz [default: <root>/data/shapes.npz].")
@click.option("--epochs", default=8, show_default=True)
@click.option("--floor", default=0.70, show_default=True,
              help="Minimum acceptable test accuracy per model.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Checkpoint directory [default: <root>/zoo].")
@click.pass_context
def train_zoo(ctx, data, epochs, floor, out):
    """Train the toy classifier zoo (three families, two seeds each)."""
    paths = _default_paths(ctx.obj["root"])
    data = data or paths["data"]
    out = out or paths["zoo"]
    cfg = {"data": str(data), "epochs": epochs, "floor": floor}
    with _guarded("train-zoo", out):
        dataset = art.load_dataset_npz(data)
        zoo = train_toy_classifiers(dataset, epochs=epochs, accuracy_floor=floor)
        save_zoo(zoo, out)
        art.write_run_manifest(
            out, "train-zoo", cfg,
            {f"{n}.pt": out / f"{n}.pt" for n in zoo.names}
            | {"zoo_manifest.json": out / "zoo_manifest.json"})
    for name, acc in zoo.accuracy_table().items():
        click.echo(f"{name}: test accuracy {acc:.3f}")
    click.echo(f"saved {len(zoo)} models under {out}")


@main.command("pretrain-style")
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--styles", type=click.Path(path_type=Path), default=None,
              help="Style corpus npz [default: <root>/data/styles.npz].")
@click.option("--steps", default=400, show_default=True)
@click.option("--embedding-dim", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Checkpoint file [default: <root>/style/pretrained.pt].")
@click.pass_context
def pretrain_style(ctx, data, styles, steps, embedding_dim, seed, out):
    """Pretrain the style network against the texture corpus."""
    paths = _default_paths(ctx.obj["root"])
    data = data or paths["data"]
    styles = styles or paths["styles"]
    out = out or paths["pretrained"]
    cfg = {"data": str(data), "styles": str(styles), "steps": steps,
           "embedding_dim": embedding_dim, "seed": seed}
    with _guarded("pretrain-style", out.parent):
        dataset = art.load_dataset_npz(data)
        corpus = art.load_styles_npz(styles)
        net = pretrain_style_network(corpus, dataset.train_images,
                                     embedding_dim=embedding_dim,
                                     steps=steps, seed=seed)
        save_style_network(net, out)
        art.write_run_manifest(out.parent, "pretrain-style", cfg,
                               {out.name: out},
                               manifest_name=f"{out.stem}.manifest.json")
    click.echo(f"pretrained style network saved to {out}")


@main.command("finetune-style")
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--zoo", "zoo_dir", type=click.Path(path_type=Path), default=None)
@click.option("--style-net", type=click.Path(path_type=Path), default=None,
              help="Starting checkpoint [default: <root>/style/pretrained.pt].")
@click.option("--ensemble", default=None,
              help="Comma-separated zoo members [default: role tags].")
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--max-images", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Checkpoint file [default: <root>/style/finetuned.pt].")
@click.pass_context
def finetune_style(ctx, data, zoo_dir, style_net, ensemble, epochs, lr,
                   batch_size, max_images, seed, out):
    """Fine-tune the style network so stylized images stay classifiable."""
    paths = _default_paths(ctx.obj["root"])
    data = data or paths["data"]
    zoo_dir = zoo_dir or paths["zoo"]
    style_net = style_net or paths["pretrained"]
    out = out or paths["finetuned"]
    cfg = {"data": str(data), "zoo": str(zoo_dir), "style_net": str(style_net),
           "ensemble": ensemble, "epochs": epochs, "lr": lr,
           "batch_size": batch_size, "max_images": max_images, "seed": seed}
    with _guarded("finetune-style", out.parent):
        dataset = art.load_dataset_npz(data)
        zoo = load_zoo(zoo_dir)
        names = _as_tuple(ensemble) or tuple(zoo.with_role("ensemble-member"))
        if not names:
            raise ConfigError("no ensemble members: pass --ensemble or tag "
                              "zoo members with the ensemble-member role")
        handles = [zoo.handle(n) for n in names]
        net = load_style_network(style_net)
        tuned, history = finetune_style_network(
            net, handles, None, dataset.train_images, dataset.train_labels,
            FinetuneConfig(epochs=epochs, lr=lr, batch_size=batch_size,
                           max_images=max_images), seed=seed)
        save_style_network(tuned, out)
        cfg["ensemble"] = list(names)
        art.write_run_manifest(out.parent, "finetune-style", cfg,
                               {out.name: out},
                               manifest_name=f"{out.stem}.manifest.json")
    if history:
        click.echo(f"ensemble loss {history[0]:.4f} -> {history[-1]:.4f} "
                   f"over {epochs} epochs")
    click.echo(f"fine-tuned style network saved to {out}")


# ---------------------------------------------------------------------------
# attack and evaluation
# ---------------------------------------------------------------------------

_shared_attack_options = [
    click.option("--config", "config_file", type=click.Path(path_type=Path),
                 default=None, help="YAML file with defaults for these flags."),
    click.option("--seed", default=0, show_default=True),
    click.option("--surrogate", default="plain_a", show_default=True),
    click.option("--targets", default="res_b,incept_a,incept_b",
                 show_default=True, help="Comma-separated zoo members."),
    click.option("--epsilon", default=16.0, show_default=True,
                 help="L-inf budget in 0-255 pixel units."),
    click.option("--iterations", default=10, show_default=True),
    click.option("--alpha", default=None, type=float,
                 help="Step size in 0-255 units [default: epsilon/iterations]."),
    click.option("--mu", default=1.0, show_default=True,
                 help="Momentum decay factor."),
    click.option("--gamma", default=0.5, show_default=True,
                 help="Mixing weight on the unstyled image."),
    click.option("--beta", default=2.0, show_default=True,
                 help="Extra uniform noise amplitude, in units of epsilon."),
    click.option("--n", default=20, show_default=True,
                 help="Transform samples averaged per iteration."),
    click.option("--num-images", default=None, type=int,
                 help="How many correctly-classified test images to attack."),
    click.option("--mode", default="untargeted", show_default=True,
                 type=click.Choice(["untargeted", "targeted"])),
    click.option("--data", type=click.Path(path_type=Path), default=None),
    click.option("--zoo", "zoo_dir", type=click.Path(path_type=Path),
                 default=None),
    click.option("--style-net", type=click.Path(path_type=Path), default=None,
                 help="Style checkpoint [default: <root>/style/finetuned.pt]."),
    click.option("--allow-unfinetuned", is_flag=True,
                 help="Permit a style network that skipped fine-tuning."),
    click.option("--out", type=click.Path(path_type=Path), default=None),
]


def _with_options(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


_RESOLVED_NAMES = ["seed", "surrogate", "targets", "epsilon", "iterations",
                   "alpha", "mu", "gamma", "beta", "n", "num_images", "mode"]


@main.command()
@_with_options(_shared_attack_options)
@click.option("--attack", "attack_name", default="stm", show_default=True,
              type=click.Choice(ATTACK_NAMES))
@click.pass_context
def attack(ctx, config_file, attack_name, data, zoo_dir, style_net,
           allow_unfinetuned, out, **_):
    """Attack test images with one variant and save the adversaries."""
    paths = _default_paths(ctx.obj["root"])
    data = data or paths["data"]
    zoo_dir = zoo_dir or paths["zoo"]
    style_net = style_net or paths["finetuned"]
    where = [out or ctx.obj["root"] / "runs"]
    with _guarded("attack", where):
        file_cfg = _load_file_config(config_file)
        if ctx.get_parameter_source("attack_name") != ParameterSource.COMMANDLINE \
                and "attack" in file_cfg:
            attack_name = file_cfg["attack"]
        p = _resolved(ctx, file_cfg, _RESOLVED_NAMES)
        p["num_images"] = p["num_images"] or 20
        out = out or ctx.obj["root"] / "runs" / f"{attack_name}-s{p['seed']}"
        where.append(out)
        dataset = art.load_dataset_npz(data)
        zoo = load_zoo(zoo_dir)
        net = _load_style_for((attack_name,), style_net, allow_unfinetuned)
        budget = AttackBudget.from_pixel_units(p["epsilon"], p["iterations"],
                                               p["alpha"], p["mu"])
        stm = (StmConfig(gamma=p["gamma"], beta=p["beta"], num_samples=p["n"])
               if attack_name in _STYLE_ATTACKS else None)
        spectrum = (SpectrumConfig(num_transforms=p["n"])
                    if attack_name == "s2im" else None)
        spec = make_attack_spec(attack_name, budget, mode=p["mode"], stm=stm,
                                spectrum=spectrum)
        surrogate = zoo.handle(p["surrogate"])
        targets = _as_tuple(p["targets"])
        idx = pick_eval_indices(surrogate, dataset.test_images,
                                dataset.test_labels, p["num_images"])
        images = dataset.test_images[idx]
        labels = dataset.test_labels[idx]
        pool_by_class = (admix_pool_indices(dataset.test_labels,
                                            zoo.class_count)
                         if spec.admix is not None else None)
        advs = generate_adversaries(spec, surrogate, images, labels, p["seed"],
                                    style_net=net,
                                    pool_images=dataset.test_images,
                                    pool_by_class=pool_by_class)
        rates = {t: attack_success_rate(zoo.handle(t), advs, labels, p["mode"])
                 for t in targets}
        produced = art.save_adversarial_batch(out, advs, labels, idx)
        art.write_json(out / "attack_report.json",
                       {"attack": attack_name, "spec": spec_to_dict(spec),
                        "success_rates": rates})
        produced["attack_report.json"] = out / "attack_report.json"
        resolved = dict(p, attack=attack_name, data=str(data),
                        zoo=str(zoo_dir),
                        style_net=str(style_net) if net else None)
        art.write_run_manifest(out, "attack", resolved, produced)
    for t, r in rates.items():
        click.echo(f"{attack_name} -> {t}: {r:.1f}% success")
    click.echo(f"outputs under {out}")


@main.command()
@_with_options(_shared_attack_options)
@click.option("--attacks", default="mifgsm,stm", show_default=True,
              help="Comma-separated attack variants.")
@click.option("--seeds", default=None,
              help="Comma-separated seeds [default: --seed].")
@click.option("--defenses", default="", show_default=True,
              help="Comma-separated defenses applied before target scoring.")
@click.option("--jobs", default=1, show_default=True)
@click.pass_context
def evaluate(ctx, config_file, data, zoo_dir, style_net, allow_unfinetuned,
             out, **_):
    """Run an attacks-by-targets matrix and write a deterministic report."""
    paths = _default_paths(ctx.obj["root"])
    data = data or paths["data"]
    zoo_dir = zoo_dir or paths["zoo"]
    style_net = style_net or paths["finetuned"]
    out = out or ctx.obj["root"] / "runs" / "evaluate"
    with _guarded("evaluate", out):
        file_cfg = _load_file_config(config_file)
        p = _resolved(ctx, file_cfg,
                      _RESOLVED_NAMES + ["attacks", "seeds", "defenses", "jobs"])
        p["num_images"] = p["num_images"] or 100
        attacks = _as_tuple(p["attacks"])
        seeds = tuple(int(s) for s in _as_tuple(p["seeds"])) or (p["seed"],)
        dataset = art.load_dataset_npz(data)
        zoo = load_zoo(zoo_dir)
        net = _load_style_for(attacks, style_net, allow_unfinetuned)
        config = ExperimentConfig(
            attacks=attacks, surrogate=p["surrogate"],
            targets=_as_tuple(p["targets"]), seeds=seeds,
            num_images=p["num_images"], epsilon=p["epsilon"],
            iterations=p["iterations"], step_size=p["alpha"],
            momentum_decay=p["mu"], mode=p["mode"],
            stm=StmConfig(gamma=p["gamma"], beta=p["beta"],
                          num_samples=p["n"]),
            defenses=_as_tuple(p["defenses"]), jobs=int(p["jobs"]))
        report = run_experiment_matrix(zoo, dataset, config, style_net=net)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
        (out / "report.txt").write_text(report.table() + "\n")
        resolved = dict(config.to_dict(), data=str(data), zoo=str(zoo_dir),
                        style_net=str(style_net) if net else None)
        art.write_run_manifest(out, "evaluate", resolved,
                               {"report.json": out / "report.json",
                                "report.txt": out / "report.txt"})
    click.echo(report.table())
    click.echo(f"report hash: {report.report_hash}")
    click.echo(f"outputs under {out}")


@main.command()
@click.argument("report_path", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Also write the rendered table to this file.")
def report(report_path, out):
    """Render a saved evaluation report as a text table."""
    with _guarded("report", report_path.parent):
        rep = EvaluationReport.load(report_path)
        text = rep.table()
        if out:
            Path(out).write_text(text + "\n")
    click.echo(text)
    click.echo(f"report hash: {rep.report_hash}")


if __name__ == "__main__":
    main()
