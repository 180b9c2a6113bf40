"""Faithfulness (deletion / insertion AUC) and pointing-game evaluation."""
from __future__ import annotations

import math
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import correlate1d

from .cam import SaliencyMap
from .data import BoundingBox, Dataset
from .errors import InputError

DEFAULT_STEP = 0.036
DIRECTIONS = ("deletion", "insertion")


@dataclass(frozen=True)
class PerturbationCurve:
    fractions: np.ndarray
    scores: np.ndarray
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InputError(f"unknown direction {self.direction!r}")
        f, s = np.asarray(self.fractions, float), np.asarray(self.scores, float)
        if f.shape != s.shape or f.size < 2:
            raise InputError("curve needs at least two matching points")
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise InputError("fractions must increase strictly from 0 to 1")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "scores", s)

    def to_dict(self) -> dict:
        return {"direction": self.direction,
                "fractions": [float(x) for x in self.fractions],
                "scores": [float(x) for x in self.scores]}


def gaussian_blur(image: np.ndarray, kernel_size: int = 11, sigma: float = 5.0) -> np.ndarray:
    """Separable Gaussian blur of an ``H x W x 3`` image with symmetric padding."""
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = correlate1d(np.asarray(image, dtype=np.float64), kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def step_schedule(n_pixels: int, step_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative perturbed-pixel counts and the nominal fraction at each point.

    Every step covers ``floor(step * n)`` pixels; the last step takes whatever
    is left so the final fraction is exactly 1.
    """
    if not 0 < step_fraction < 1:
        raise InputError(f"step fraction must be in (0, 1), got {step_fraction}")
    per_step = math.floor(step_fraction * n_pixels)
    if per_step < 1:
        raise InputError(f"step {step_fraction} covers no pixel of a {n_pixels}-pixel image")
    n_steps = math.ceil(round(1.0 / step_fraction, 9))
    counts = np.minimum(np.arange(n_steps + 1) * per_step, n_pixels)
    counts[-1] = n_pixels
    fractions = np.arange(n_steps + 1) * step_fraction
    fractions[-1] = 1.0
    return counts, fractions


def saliency_order(saliency) -> np.ndarray:
    """Flat pixel indices by descending saliency, ties to the smaller row-major index."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, float)
    return np.argsort(-values.ravel(), kind="stable")


def _curve(model, start, end, saliency, class_index, step_fraction, direction) -> PerturbationCurve:
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, float)
    h, w = start.shape[:2]
    if values.shape != (h, w):
        raise InputError(f"saliency shape {values.shape} != image shape {(h, w)}")
    counts, fractions = step_schedule(h * w, step_fraction)
    order = saliency_order(values)
    current = start.reshape(h * w, -1).copy()
    target = end.reshape(h * w, -1)
    scores = []
    done = 0
    for count in counts:
        idx = order[done:count]
        current[idx] = target[idx]
        done = count
        probs = model.forward_scores(current.reshape(start.shape), score_mode="probability")
        scores.append(float(probs[class_index]))
    return PerturbationCurve(fractions, np.asarray(scores), direction)


def deletion_curve(model, image, saliency, class_index: int, step_fraction: float = DEFAULT_STEP,
                   baseline: Optional[np.ndarray] = None) -> PerturbationCurve:
    """Class probability as the most salient pixels are replaced by ``baseline`` (zeros)."""
    image = np.asarray(image, dtype=np.float64)
    end = np.zeros_like(image) if baseline is None else np.asarray(baseline, dtype=np.float64)
    return _curve(model, image, end, saliency, class_index, step_fraction, "deletion")


def insertion_curve(model, image, saliency, class_index: int, step_fraction: float = DEFAULT_STEP,
                    baseline: Optional[np.ndarray] = None) -> PerturbationCurve:
    """Class probability as the most salient pixels are restored onto ``baseline``.

    The default baseline is the input blurred with an 11x11, sigma=5 Gaussian.
    """
    image = np.asarray(image, dtype=np.float64)
    start = gaussian_blur(image) if baseline is None else np.asarray(baseline, dtype=np.float64)
    return _curve(model, start, image, saliency, class_index, step_fraction, "insertion")


def auc(curve: PerturbationCurve) -> float:
    """Trapezoidal area under the curve over the fraction axis."""
    return float(np.trapezoid(curve.scores, curve.fractions))


def overall_metric(insertion_auc: float, deletion_auc: float) -> float:
    """Insertion AUC minus deletion AUC.

    The difference is taken on the shortest decimal forms of the inputs and
    rounded once, so tabulated values subtract exactly (0.5534 - 0.1001 gives
    0.4533, not 0.45330000000000004). The result stays within one ulp of the
    larger input of plain float subtraction.
    """
    return float(Decimal(repr(float(insertion_auc))) - Decimal(repr(float(deletion_auc))))


# -- pointing game -------------------------------------------------------------

@dataclass
class PointingTally:
    hits: int = 0
    misses: int = 0
    trials: list[dict] = field(default_factory=list)

    def add(self, hit: bool, **info) -> None:
        """Count one trial; keyword ``info`` is kept alongside it in ``trials``."""
        self.trials.append({**info, "hit": bool(hit)})
        if hit:
            self.hits += 1
        else:
            self.misses += 1

    @property
    def accuracy(self) -> float:
        total = self.hits + self.misses
        if total == 0:
            raise InputError("pointing accuracy is undefined without any trials")
        return self.hits / total


def pointing_game(saliency, boxes: list[BoundingBox], label: str) -> bool:
    """True when the saliency maximum lies inside any box of ``label``.

    Ties for the maximum go to the smallest row-major index.
    """
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, float)
    mine = [b for b in boxes if b.label == label]
    if not mine:
        raise InputError(f"no bounding box for label {label!r}")
    y, x = np.unravel_index(int(np.argmax(values)), values.shape)
    return any(b.contains(int(x), int(y)) for b in mine)


Method = Callable[..., object]


def _map_values(result) -> np.ndarray:
    return result.values if isinstance(result, SaliencyMap) else np.asarray(result, float)


def pointing_tally(dataset: Dataset, method: Method, model) -> PointingTally:
    """Pointing game over every annotated class of every image.

    ``method(model, image, class_index)`` returns a saliency map.
    """
    tally = PointingTally()
    for sample in dataset.samples:
        for label in sorted({b.label for b in sample.boxes}):
            smap = _map_values(method(model, sample.image, dataset.class_index(label)))
            y, x = np.unravel_index(int(np.argmax(smap)), smap.shape)
            tally.add(pointing_game(smap, sample.boxes, label), name=sample.name, label=label,
                      x=int(x), y=int(y))
    return tally


def pointing_accuracy(dataset: Dataset, method: Method, model) -> float:
    return pointing_tally(dataset, method, model).accuracy


# -- faithfulness --------------------------------------------------------------

@dataclass
class FaithfulnessReport:
    images: list[dict] = field(default_factory=list)
    step_fraction: float = DEFAULT_STEP
    deletion_baseline: str = "zeros"
    insertion_baseline: str = "gaussian-blur(11x11,sigma=5)"

    @property
    def mean_insertion(self) -> float:
        return float(np.mean([r["insertion_auc"] for r in self.images]))

    @property
    def mean_deletion(self) -> float:
        return float(np.mean([r["deletion_auc"] for r in self.images]))

    @property
    def overall(self) -> float:
        return overall_metric(self.mean_insertion, self.mean_deletion)

    def to_dict(self) -> dict:
        return {
            "step_fraction": self.step_fraction,
            "deletion_baseline": self.deletion_baseline,
            "insertion_baseline": self.insertion_baseline,
            "num_images": len(self.images),
            "mean_insertion_auc": self.mean_insertion,
            "mean_deletion_auc": self.mean_deletion,
            "overall": self.overall,
            "images": self.images,
        }


def evaluate_faithfulness(dataset: Dataset, method: Method, model, step_fraction: float = DEFAULT_STEP,
                          class_index: Optional[int] = None) -> FaithfulnessReport:
    """Deletion and insertion AUCs per image for the top-1 class (or ``class_index``)."""
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    report = FaithfulnessReport(step_fraction=step_fraction)
    for sample in dataset.samples:
        c = class_index
        if c is None:
            c = int(np.argmax(model.forward_scores(sample.image, score_mode="probability")))
        smap = _map_values(method(model, sample.image, c))
        dele = deletion_curve(model, sample.image, smap, c, step_fraction)
        ins = insertion_curve(model, sample.image, smap, c, step_fraction)
        report.images.append({
            "name": sample.name,
            "class_index": c,
            "deletion_auc": auc(dele),
            "insertion_auc": auc(ins),
            "deletion": dele.to_dict(),
            "insertion": ins.to_dict(),
        })
    return report


def uniform_random_method(seed: int = 0) -> Method:
    """Baseline explainer returning i.i.d. uniform noise maps (stateful, seeded)."""
    rng = np.random.default_rng(seed)

    def method(model, image, class_index):
        h, w = np.asarray(image).shape[:2]
        return SaliencyMap(rng.random((h, w)), int(class_index), "random")

    return method
