"""File outputs: 16-bit saliency PNGs, heatmap overlays, contact sheets, curve plots."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402
from PIL.PngImagePlugin import PngInfo  # noqa: E402

OVERLAY_ALPHA = 0.5
PNG_META_KEY = "fdcam"


def _png_info(meta: Optional[dict]) -> Optional[PngInfo]:
    if meta is None:
        return None
    info = PngInfo()
    info.add_text(PNG_META_KEY, json.dumps(meta, sort_keys=True))
    return info


def save_saliency_png(values: np.ndarray, path, meta: Optional[dict] = None) -> None:
    """Quantize a [0, 1] map to 16-bit grayscale and write it losslessly."""
    q = np.round(np.clip(values, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(q).save(Path(path), pnginfo=_png_info(meta))


def read_saliency_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0


def read_png_meta(path) -> dict:
    with Image.open(path) as im:
        return json.loads(im.text[PNG_META_KEY])


def jet(values: np.ndarray) -> np.ndarray:
    """``H x W`` [0, 1] map -> ``H x W x 3`` float RGB using the jet colormap."""
    return matplotlib.colormaps["jet"](np.clip(values, 0.0, 1.0))[..., :3]


def overlay(image: np.ndarray, values: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Alpha-blend the colored map over an ``H x W x 3`` [0, 1] image, as uint8."""
    blended = alpha * jet(values) + (1 - alpha) * np.asarray(image, dtype=np.float64)
    return np.round(np.clip(blended, 0, 1) * 255).astype(np.uint8)


def save_overlay_png(image, values, path, meta: Optional[dict] = None, scale: int = 1) -> None:
    img = Image.fromarray(overlay(image, values))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(Path(path), pnginfo=_png_info(meta))


def _tile(m: np.ndarray, scale: int) -> np.ndarray:
    lo, hi = m.min(), m.max()
    norm = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    t = np.round(norm * 255).astype(np.uint8)
    return np.kron(t, np.ones((scale, scale), dtype=np.uint8))


def contact_sheet(maps: list[np.ndarray], scale: int = 4) -> np.ndarray:
    """Lay activation maps side by side, each min-max scaled to 8-bit gray."""
    return np.concatenate([_tile(m, scale) for m in maps], axis=1)


def save_contact_sheet(maps, path, meta: Optional[dict] = None, scale: int = 4) -> None:
    Image.fromarray(contact_sheet(maps, scale)).save(Path(path), pnginfo=_png_info(meta))


def plot_curves(deletion: dict, insertion: dict, path, title: str = "", meta: Optional[dict] = None) -> None:
    """Score-vs-fraction plot of a deletion and an insertion curve."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, curve, name in ((axes[0], deletion, "deletion"), (axes[1], insertion, "insertion")):
        x, y = np.asarray(curve["fractions"]), np.asarray(curve["scores"])
        ax.plot(x, y)
        ax.fill_between(x, y, alpha=0.3)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"{name} AUC={np.trapezoid(y, x):.4f}")
        ax.set_xlabel("fraction of pixels")
    axes[0].set_ylabel("class probability")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    info = {"Software": None}
    if meta is not None:
        info[PNG_META_KEY] = json.dumps(meta, sort_keys=True)
    fig.savefig(Path(path), metadata=info)
    plt.close(fig)
