"""Run-directory bookkeeping: canonical JSON, file digests, run manifests,
error records and npz round-trips for datasets and adversarial batches.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, Tensor
from .data import CLASS_NAMES, ShapesDataset, save_png


def _savez_deterministic(path, **arrays) -> None:
    """np.savez_compressed with a frozen zip timestamp, so the bytes (and
    hence the manifest digests) depend only on the array contents.
    """
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy",
                                   date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_run_manifest(out_dir, command: str, resolved_config: dict,
                       artifacts: dict[str, str | Path],
                       manifest_name: str = "manifest.json") -> dict:
    """Record the fully resolved configuration plus digests of every output."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": resolved_config,
        "artifacts": {
            name: {"path": str(Path(p).relative_to(out_dir)
                               if Path(p).is_relative_to(out_dir) else Path(p)),
                   "sha256": file_digest(p)}
            for name, p in sorted(artifacts.items())
        },
    }
    write_json(out_dir / manifest_name, manifest)
    return manifest


def write_error_record(out_dir, command: str, exc: Exception) -> Path:
    """Machine-readable failure note next to whatever partial output exists."""
    path = Path(out_dir) / "error.json"
    write_json(path, {"command": command, "error": type(exc).__name__,
                      "message": str(exc)})
    return path


# ---------------------------------------------------------------------------
# npz round-trips
# ---------------------------------------------------------------------------

def save_dataset_npz(dataset: ShapesDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _savez_deterministic(
        path,
        train_images=dataset.train_images.numpy(),
        train_labels=dataset.train_labels.numpy(),
        test_images=dataset.test_images.numpy(),
        test_labels=dataset.test_labels.numpy(),
        class_names=np.array(CLASS_NAMES),
    )


def load_dataset_npz(path) -> ShapesDataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no dataset at {path}; generate one first")
    blob = np.load(path, allow_pickle=False)
    return ShapesDataset(
        torch.from_numpy(blob["train_images"]),
        torch.from_numpy(blob["train_labels"]),
        torch.from_numpy(blob["test_images"]),
        torch.from_numpy(blob["test_labels"]),
    )


def save_styles_npz(styles: Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _savez_deterministic(path, styles=styles.numpy())


def load_styles_npz(path) -> Tensor:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no style corpus at {path}; generate one first")
    return torch.from_numpy(np.load(path, allow_pickle=False)["styles"])


def save_adversarial_batch(out_dir, advs: Tensor, labels: Tensor,
                           indices: Tensor, *, write_pngs: bool = True) -> dict:
    """Store exact float adversaries plus browsable PNG previews.

    Returns {artifact name: path} for the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    npz_path = out_dir / "adversarial.npz"
    _savez_deterministic(npz_path, images=advs.numpy(),
                         labels=labels.numpy(), indices=indices.numpy())
    paths = {"adversarial.npz": npz_path}
    if write_pngs:
        png_dir = out_dir / "png"
        png_dir.mkdir(exist_ok=True)
        for i in range(len(advs)):
            cname = CLASS_NAMES[int(labels[i])]
            p = png_dir / f"{int(indices[i]):05d}_{cname}.png"
            save_png(advs[i], p)
            paths[f"png/{p.name}"] = p
    return paths


def load_adversarial_batch(path) -> tuple[Tensor, Tensor, Tensor]:
    blob = np.load(Path(path), allow_pickle=False)
    return (torch.from_numpy(blob["images"]), torch.from_numpy(blob["labels"]),
            torch.from_numpy(blob["indices"]))
