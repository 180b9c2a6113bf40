"""Synthetic single-shape dataset and training of the tiny reference CNN."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backend import ModelHandle, make_tiny_test_cnn
from .data import BoundingBox, Dataset, load_dataset

CLASSES = ("square", "circle", "triangle")
# shape extent as a fraction of the image side
EXTENT_RANGE = (0.25, 0.5)


@dataclass(frozen=True)
class ShapesDatasetSpec:
    image_size: int = 32
    samples_per_class: int = 50
    seed: int = 0
    val_fraction: float = 0.2


def shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one randomly placed shape, sampled at pixel centres."""
    extent = int(rng.integers(round(EXTENT_RANGE[0] * size), round(EXTENT_RANGE[1] * size) + 1))
    x0 = int(rng.integers(1, size - extent))
    y0 = int(rng.integers(1, size - extent))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return (xx >= x0) & (xx < x0 + extent) & (yy >= y0) & (yy < y0 + extent)
    if kind == "circle":
        r = extent / 2
        return (xx - x0 - r) ** 2 + (yy - y0 - r) ** 2 <= r ** 2
    if kind == "triangle":
        # apex at top centre, base along the bottom edge of the extent box
        u = (yy - y0) / extent
        half = u * extent / 2
        cx = x0 + extent / 2
        return (u >= 0) & (u <= 1) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def render_sample(kind: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, BoundingBox]:
    """uint8 RGB image with a bright shape on a dark uniform background."""
    mask = shape_mask(kind, size, rng)
    bg = np.zeros(3, dtype=np.int64)
    fg = rng.integers(140, 256, size=3)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[...] = bg
    img[mask] = fg
    ys, xs = np.nonzero(mask)
    box = BoundingBox(kind, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return img, box


def generate_shapes(spec: ShapesDatasetSpec) -> list[tuple[str, np.ndarray, BoundingBox]]:
    rng = np.random.default_rng(spec.seed)
    items = []
    for i in range(spec.samples_per_class):
        for kind in CLASSES:
            img, box = render_sample(kind, spec.image_size, rng)
            items.append((f"{kind}_{i:04d}", img, box))
    return items


def write_shapes_dataset(spec: ShapesDatasetSpec, out_dir) -> Path:
    """Write images, per-image annotation JSON and a manifest with train/val splits."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    n_val = int(round(spec.samples_per_class * spec.val_fraction))
    splits = {"train": [], "val": []}
    for name, img, box in generate_shapes(spec):
        Image.fromarray(img).save(root / "images" / f"{name}.png")
        ann = {"image": f"images/{name}.png", "boxes": [box.to_dict()]}
        ann_path = root / "annotations" / f"{name}.json"
        ann_path.write_text(json.dumps(ann, indent=1, sort_keys=True))
        index = int(name.rsplit("_", 1)[1])
        split = "val" if index >= spec.samples_per_class - n_val else "train"
        splits[split].append(f"annotations/{name}.json")
    manifest = {"classes": list(CLASSES), "spec": asdict(spec), "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _stack(dataset: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    x = np.stack([s.image.transpose(2, 0, 1) for s in dataset.samples])
    y = [dataset.class_index(s.boxes[0].label) for s in dataset.samples]
    return torch.from_numpy(x).float(), torch.tensor(y)


def accuracy(model: ModelHandle, dataset: Dataset) -> float:
    correct = 0
    for s in dataset.samples:
        pred = int(np.argmax(model.forward_scores(s.image)))
        correct += pred == dataset.class_index(s.boxes[0].label)
    return correct / len(dataset)


def pixel_dropout(x: torch.Tensor, max_fraction: float, gen: torch.Generator) -> torch.Tensor:
    """Zero a random fraction (up to ``max_fraction``) of pixels in each image.

    Keeps zero-filled perturbations, as used by the deletion metric, inside the
    training distribution.
    """
    n, _, h, w = x.shape
    rate = torch.rand(n, 1, 1, 1, generator=gen) * max_fraction
    keep = torch.rand(n, 1, h, w, generator=gen) >= rate
    return x * keep


def train_tiny(data_dir, seed: int = 0, epochs: int = 40, batch_size: int = 32,
               lr: float = 0.01, dropout: float = 0.35) -> tuple[ModelHandle, dict]:
    """Fit the tiny CNN on the ``train`` split; report accuracy on ``val``.

    Training runs in float32 with a seeded generator and pixel-dropout
    augmentation; the returned handle is the float64 inference model.
    """
    train = load_dataset(data_dir, split="train")
    val = load_dataset(data_dir, split="val")
    model = make_tiny_test_cnn(seed, num_classes=len(train.class_names))
    net = model.net.float().train()
    x, y = _stack(train)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            batch = pixel_dropout(x[idx], dropout, gen) if dropout > 0 else x[idx]
            loss = F.cross_entropy(net(batch), y[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        losses.append(total / len(x))
    net.double().eval()
    metrics = {
        "seed": seed,
        "epochs": epochs,
        "dropout": dropout,
        "train_accuracy": accuracy(model, train),
        "val_accuracy": accuracy(model, val),
        "final_loss": losses[-1] if losses else None,
        "num_train": len(train),
        "num_val": len(val),
        "parameter_hash": model.parameter_hash(),
    }
    return model, metrics
