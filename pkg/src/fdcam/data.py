"""Annotated image datasets: JSON annotations, VOC import, image loading."""
from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InputError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels; min corner inclusive, max corner exclusive."""

    label: str
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise InputError(f"degenerate or negative box {self}")

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def check_within(self, width: int, height: int) -> None:
        if self.x_max > width or self.y_max > height:
            raise InputError(f"box {self} exceeds image size {width}x{height}")

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(
            self.label,
            math.floor(self.x_min * sx), math.floor(self.y_min * sy),
            max(math.floor(self.x_min * sx) + 1, math.ceil(self.x_max * sx)),
            max(math.floor(self.y_min * sy) + 1, math.ceil(self.y_max * sy)),
        )

    def to_dict(self) -> dict:
        return {"label": self.label, "x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        try:
            return cls(str(d["label"]), int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]))
        except KeyError as exc:
            raise InputError(f"box is missing field {exc}") from None


@dataclass
class Sample:
    name: str
    image: np.ndarray
    boxes: list[BoundingBox] = field(default_factory=list)


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    def class_index(self, label: str) -> int:
        try:
            return self.class_names.index(label)
        except ValueError:
            raise InputError(f"label {label!r} is not one of {self.class_names}") from None


def load_image(path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Read an RGB image as floats in [0, 1], bilinearly resized to ``size=(H, W)``."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def read_annotation(path) -> dict:
    with open(path) as fh:
        ann = json.load(fh)
    if "image" not in ann or "boxes" not in ann:
        raise InputError(f"annotation {path} needs 'image' and 'boxes'")
    return ann


def voc_to_annotation(xml_path) -> dict:
    """Convert a VOC XML file to the JSON annotation layout.

    VOC corners are 1-based and inclusive, so ``xmin`` shifts down by one and
    ``xmax`` is kept as the exclusive bound.
    """
    root = ET.parse(xml_path).getroot()
    boxes = []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        coords = {k: int(round(float(bb.findtext(k)))) for k in ("xmin", "ymin", "xmax", "ymax")}
        boxes.append({
            "label": obj.findtext("name").strip(),
            "x_min": coords["xmin"] - 1, "y_min": coords["ymin"] - 1,
            "x_max": coords["xmax"], "y_max": coords["ymax"],
        })
    return {"image": root.findtext("filename"), "boxes": boxes}


def load_dataset(path, size: Optional[tuple[int, int]] = None, split: Optional[str] = None,
                 limit: Optional[int] = None) -> Dataset:
    """Load a dataset directory described by ``manifest.json``.

    The manifest lists ``classes`` and, optionally, split name -> annotation
    files. Without a split every file under ``annotations/`` is used. Images are
    resized to ``size`` and boxes rescaled with them.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    classes = list(manifest["classes"])
    if split is not None:
        if split not in manifest.get("splits", {}):
            raise InputError(f"dataset has no split {split!r}")
        files = [root / f for f in manifest["splits"][split]]
    else:
        files = sorted((root / "annotations").glob("*.json"))
    if limit is not None:
        files = files[:limit]

    samples = []
    for f in files:
        ann = read_annotation(f)
        img_path = root / ann["image"]
        with Image.open(img_path) as im:
            width, height = im.size
        image = load_image(img_path, size)
        sy, sx = image.shape[0] / height, image.shape[1] / width
        boxes = []
        for d in ann["boxes"]:
            box = BoundingBox.from_dict(d)
            box.check_within(width, height)
            boxes.append(box if (sx, sy) == (1.0, 1.0) else box.scaled(sx, sy))
        samples.append(Sample(Path(f).stem, image, boxes))
    return Dataset(samples, classes)
