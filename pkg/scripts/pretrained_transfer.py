#!/usr/bin/env python3
"""Transfer evaluation with user-supplied pretrained classifiers.

The package's built-in pipeline is desk-scale by design. This script wires
full-size models into the same attack engine: it attacks a folder of images
against one pretrained surrogate and reports black-box success on the
remaining models, optionally comparing the resulting row against expected
percentages.

Requires torchvision (not a package dependency; install it separately).
Example:

    python3 scripts/pretrained_transfer.py \
        --data /data/eval-set --labels /data/eval-set/labels.csv \
        --models resnet50,inception_v3,densenet121,vgg16 \
        --style-net style/finetuned_large.pt \
        --num-images 1000 --expect 72.5,48.1,39.9
"""

import argparse
import csv
import sys
from pathlib import Path

import torch
from PIL import Image

from styleadv import (
    AttackBudget,
    ClassifierHandle,
    StmConfig,
    load_style_network,
    make_attack_spec,
)
from styleadv.artifacts import write_json
from styleadv.evaluation import (
    attack_success_rate,
    generate_adversaries,
    pick_eval_indices,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
_STYLE_ATTACKS = ("stm", "st-dim", "st-tim", "st-sim")


class _Normalized(torch.nn.Module):
    """Shift a [0,1]-input model interface onto a mean/std-normalized one."""

    def __init__(self, model, mean, std):
        super().__init__()
        self.model = model
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return self.model((x - self.mean) / self.std)


def _load_models(names, image_size):
    try:
        from torchvision import models as tvm
    except ImportError:
        sys.exit("this script needs torchvision: pip install torchvision")
    handles = {}
    for name in names:
        model = tvm.get_model(name, weights="DEFAULT").eval()
        wrapped = _Normalized(model, IMAGENET_MEAN, IMAGENET_STD)
        with torch.no_grad():
            k = wrapped(torch.zeros(1, 3, image_size, image_size)).shape[1]
        handles[name] = ClassifierHandle(wrapped, class_count=k, name=name)
    return handles


def _load_image(path, size):
    img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
    import numpy as np
    return torch.from_numpy(np.asarray(img, dtype="float32") / 255.0)


def _load_flat_with_csv(data_dir, labels_csv, size):
    rows = list(csv.reader(open(labels_csv)))
    images, labels = [], []
    for fname, label in rows:
        images.append(_load_image(Path(data_dir) / fname, size))
        labels.append(int(label))
    return torch.stack(images), torch.tensor(labels, dtype=torch.int64)


def _load_class_dirs(data_dir, size):
    root = Path(data_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for idx, sub in enumerate(dirs):
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                images.append(_load_image(f, size))
                labels.append(idx)
    return torch.stack(images), torch.tensor(labels, dtype=torch.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True,
                    help="Image folder (class-per-subdirectory, or flat with --labels).")
    ap.add_argument("--labels", default=None,
                    help="CSV of filename,class-index rows for a flat folder.")
    ap.add_argument("--models", required=True,
                    help="Comma-separated torchvision model names; the first "
                         "is the surrogate, the rest are black-box targets.")
    ap.add_argument("--attack", default="stm")
    ap.add_argument("--style-net", default=None,
                    help="Style network checkpoint (required for st* attacks).")
    ap.add_argument("--image-size", type=int, default=224)
    ap.add_argument("--num-images", type=int, default=1000)
    ap.add_argument("--epsilon", type=float, default=16.0)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--gamma", type=float, default=0.5)
    ap.add_argument("--beta", type=float, default=2.0)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None, help="Write the row as JSON here.")
    ap.add_argument("--expect", default=None,
                    help="Comma-separated expected success percentages, one "
                         "per target, compared within --tolerance.")
    ap.add_argument("--tolerance", type=float, default=3.0)
    args = ap.parse_args(argv)

    names = [n.strip() for n in args.models.split(",") if n.strip()]
    if len(names) < 2:
        sys.exit("--models needs a surrogate plus at least one target")
    handles = _load_models(names, args.image_size)
    surrogate, targets = names[0], names[1:]

    if args.labels:
        images, labels = _load_flat_with_csv(args.data, args.labels,
                                             args.image_size)
    else:
        images, labels = _load_class_dirs(args.data, args.image_size)

    style_net = None
    if args.attack in _STYLE_ATTACKS:
        if not args.style_net:
            sys.exit(f"attack {args.attack} needs --style-net")
        style_net = load_style_network(args.style_net)
        if not style_net.finetuned:
            print("note: style network was not fine-tuned against an "
                  "ensemble; expect weaker transfer", file=sys.stderr)

    budget = AttackBudget.from_pixel_units(args.epsilon, args.iterations)
    stm = (StmConfig(gamma=args.gamma, beta=args.beta, num_samples=args.n)
           if args.attack in _STYLE_ATTACKS else None)
    spec = make_attack_spec(args.attack, budget, stm=stm)

    idx = pick_eval_indices(handles[surrogate], images, labels,
                            args.num_images)
    print(f"attacking {len(idx)} images the surrogate classifies correctly")
    advs = generate_adversaries(spec, handles[surrogate], images[idx],
                                labels[idx], args.seed, style_net=style_net,
                                jobs=args.jobs)
    row = {t: attack_success_rate(handles[t], advs, labels[idx])
           for t in targets}
    white_box = attack_success_rate(handles[surrogate], advs, labels[idx])

    print(f"\n{args.attack} from {surrogate} "
          f"(epsilon={args.epsilon}/255, T={args.iterations}):")
    print(f"  {surrogate} (white box): {white_box:.1f}%")
    for t in targets:
        print(f"  {t}: {row[t]:.1f}%")
    if args.out:
        write_json(args.out, {"attack": args.attack, "surrogate": surrogate,
                              "white_box": white_box, "targets": row})

    if args.expect:
        expected = [float(v) for v in args.expect.split(",")]
        if len(expected) != len(targets):
            sys.exit(f"--expect needs {len(targets)} values")
        misses = [(t, row[t], e) for t, e in zip(targets, expected)
                  if abs(row[t] - e) > args.tolerance]
        for t, got, want in misses:
            print(f"MISS {t}: got {got:.1f}%, expected {want:.1f} "
                  f"+/- {args.tolerance}")
        if misses:
            sys.exit(1)
        print(f"all targets within +/- {args.tolerance} points of expected")


if __name__ == "__main__":
    main()
