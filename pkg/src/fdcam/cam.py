"""Saliency maps from weighted activation maps, plus the Grad-CAM baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import ActivationStack
from .errors import InputError, NumericError
from .weighting import CombineConfig, WeightTrace, WeightVector, fd_trace, grad_weights

INTERPOLATION = {False: "bilinear-half-pixel", True: "bilinear-align-corners"}


@dataclass(frozen=True)
class SaliencyMap:
    """``H x W`` map in [0, 1] aligned with the input image."""

    values: np.ndarray
    class_index: int
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _axis_coords(n_in: int, n_out: int, align_corners: bool):
    if align_corners:
        if n_in == 1 or n_out == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    else:
        # sample at output pixel centres mapped into input pixel-centre coordinates
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(m: np.ndarray, size: tuple[int, int], align_corners: bool = False) -> np.ndarray:
    """Bilinear resampling of a 2-D map.

    By default pixel centres are aligned (a feature cell lands on the centre
    of the input patch it summarizes, edges are clamped); ``align_corners``
    maps the corner pixels onto each other instead. Written as
    ``a + t * (b - a)`` so constant maps stay exactly constant and resizing to
    the same size is the identity.
    """
    m = np.asarray(m, dtype=np.float64)
    r_lo, r_hi, r_t = _axis_coords(m.shape[0], size[0], align_corners)
    c_lo, c_hi, c_t = _axis_coords(m.shape[1], size[1], align_corners)
    rows = m[r_lo] + r_t[:, None] * (m[r_hi] - m[r_lo])
    return rows[:, c_lo] + c_t[None, :] * (rows[:, c_hi] - rows[:, c_lo])


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return np.clip((m - lo) / (hi - lo), 0.0, 1.0)


def weighted_activation_sum(acts, weights) -> np.ndarray:
    """``sum_k w_k A^k`` at the native feature resolution, before ReLU."""
    data = acts.data if isinstance(acts, ActivationStack) else np.asarray(acts, dtype=np.float64)
    w = weights.values if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if data.ndim != 3:
        raise InputError(f"expected K x h x w activations, got {data.shape}")
    if w.shape != (data.shape[0],):
        raise InputError(f"need {data.shape[0]} weights, got {w.shape}")
    return np.tensordot(w, data, axes=1)


def compose_cam(acts, weights, out_size: tuple[int, int], class_index: int = -1,
                method: str = "cam", align_corners: bool = False) -> SaliencyMap:
    """Weighted sum, ReLU, bilinear upsample, then min-max normalize."""
    raw = weighted_activation_sum(acts, weights)
    if out_size[0] < raw.shape[0] or out_size[1] < raw.shape[1]:
        raise InputError(f"output size {out_size} smaller than feature size {raw.shape}")
    cam = normalize_map(bilinear_resize(np.maximum(raw, 0.0), out_size, align_corners))
    if not np.all(np.isfinite(cam)):
        raise NumericError("saliency map is not finite")
    meta = {"interpolation": INTERPOLATION[align_corners], "normalization": "min-max", "activation": "relu"}
    return SaliencyMap(cam, int(class_index), method, meta)


def _image_size(image) -> tuple[int, int]:
    return tuple(np.asarray(image).shape[:2])


def grad_cam(model, image, class_index: int) -> SaliencyMap:
    acts, grads = model.gradient_pass(image, class_index)
    smap = compose_cam(acts, grad_weights(grads), _image_size(image), class_index, "grad-cam")
    smap.meta["score_mode"] = model.score_mode
    return smap


def fd_cam_traced(model, image, class_index: int,
                  config: CombineConfig = CombineConfig()) -> tuple[SaliencyMap, WeightTrace]:
    trace = fd_trace(model, image, class_index, config)
    smap = compose_cam(trace.activations, trace.omega, _image_size(image), class_index,
                       f"fd-cam({config.tag()})")
    smap.meta["score_mode"] = model.score_mode
    return smap, trace


def fd_cam(model, image, class_index: int, config: CombineConfig = CombineConfig()) -> SaliencyMap:
    return fd_cam_traced(model, image, class_index, config)[0]
