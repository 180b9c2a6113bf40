"""Channel weights: pooled gradients, grouped switching scores and their combination."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backend import ActivationStack, GradientStack, channel_masks
from .errors import ConfigError, InputError, NumericError
from .grouping import all_groups, similarity_matrix, singleton_groups

SCHEMES = ("exp_bias", "exp_no_bias", "product", "score_only")
WEIGHT_KINDS = ("gradient", "switch_off", "switch_on", "switch_combined", "normalized", "final")


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise InputError(f"unknown weight kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise InputError("weights must be a non-empty vector")
        if not np.all(np.isfinite(values)):
            raise NumericError(f"non-finite {self.kind} weights")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class CombineConfig:
    """How switching scores are computed and merged with gradient weights.

    The defaults are full FD-CAM. ``CombineConfig.ablation()`` gives the
    ungrouped, switch-off-only, score-only reduction whose weights are plain
    single-channel ablation score drops.
    """

    scheme: str = "exp_bias"
    bias: float = 0.5
    theta: float = 5.0
    use_switch_on: bool = True
    use_grouping: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not np.isfinite(self.bias):
            raise ConfigError("bias must be finite")
        if not 0 < self.theta <= 100:
            raise ConfigError(f"theta must be in (0, 100], got {self.theta}")

    @classmethod
    def ablation(cls) -> "CombineConfig":
        return cls(scheme="score_only", use_switch_on=False, use_grouping=False)

    def tag(self) -> str:
        return (f"scheme={self.scheme},theta={self.theta:g},b={self.bias:g},"
                f"grouping={int(self.use_grouping)},switch_on={int(self.use_switch_on)}")


def grad_weights(grads) -> WeightVector:
    """Spatial mean of each channel's gradient map."""
    data = grads.data if isinstance(grads, GradientStack) else np.asarray(grads, dtype=np.float64)
    if data.ndim != 3:
        raise InputError(f"expected K x h x w gradients, got shape {data.shape}")
    return WeightVector(data.mean(axis=(1, 2)), "gradient")


@dataclass(frozen=True)
class SwitchTerms:
    base_score: float
    s_off: np.ndarray
    s_on: Optional[np.ndarray]
    s: np.ndarray


def switch_terms(model, image, groups: Sequence[Sequence[int]], class_index: int,
                 use_switch_on: bool = True) -> SwitchTerms:
    """Switch-off drops, switch-on scores and their mean for every group.

    One unmasked pass plus a single batched call with ``K`` (or ``2K``) masks.
    """
    k = model.num_channels
    if len(groups) != k:
        raise InputError(f"need one group per channel ({k}), got {len(groups)}")
    base = float(model.forward_scores(image)[class_index])
    off = channel_masks(groups, k, keep=False)
    masks = np.concatenate([off, channel_masks(groups, k, keep=True)]) if use_switch_on else off
    scores = model.batch_masked_forward(image, masks)[:, class_index]
    s_off = base - scores[:k]
    if not use_switch_on:
        return SwitchTerms(base, s_off, None, s_off)
    s_on = scores[k:]
    return SwitchTerms(base, s_off, s_on, (s_off + s_on) / 2)


def switch_scores(model, image, groups, class_index: int, config: CombineConfig) -> WeightVector:
    terms = switch_terms(model, image, groups, class_index, config.use_switch_on)
    return WeightVector(terms.s, "switch_combined")


def min_max_normalize(w) -> WeightVector:
    """Affine map onto [0, 1]; an (almost) constant vector maps to zeros."""
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("cannot normalize non-finite weights")
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12:
        return WeightVector(np.zeros_like(values), "normalized")
    return WeightVector(np.clip((values - lo) / (hi - lo), 0.0, 1.0), "normalized")


def combine_weights(alpha_hat, s_hat, config: CombineConfig) -> WeightVector:
    """Merge normalized gradient and score weights according to ``config.scheme``.

    ``score_only`` returns ``s_hat`` untouched (and ignores ``alpha_hat``), so
    raw switching scores can be passed straight through.
    """
    s = s_hat.values if isinstance(s_hat, WeightVector) else np.asarray(s_hat, dtype=np.float64)
    if config.scheme == "score_only":
        return WeightVector(s.copy(), "final")
    a = alpha_hat.values if isinstance(alpha_hat, WeightVector) else np.asarray(alpha_hat, dtype=np.float64)
    if a.shape != s.shape:
        raise InputError(f"length mismatch: {a.shape} vs {s.shape}")
    if config.scheme == "exp_bias":
        out = a * np.exp(s) - config.bias
    elif config.scheme == "exp_no_bias":
        out = a * np.exp(s)
    else:
        out = a * s
    return WeightVector(out, "final")


@dataclass
class WeightTrace:
    """Every intermediate of one weight computation, for debugging dumps."""

    activations: ActivationStack
    class_index: int
    config: CombineConfig
    groups: list
    switch: SwitchTerms
    omega: WeightVector
    alpha: Optional[WeightVector] = None
    alpha_hat: Optional[WeightVector] = None
    s_hat: Optional[WeightVector] = None
    score_mode: str = field(default="probability")

    def to_dict(self) -> dict:
        def vec(v):
            if v is None:
                return None
            return [float(x) for x in (v.values if isinstance(v, WeightVector) else v)]

        return {
            "class_index": self.class_index,
            "score_mode": self.score_mode,
            "config": asdict(self.config),
            "base_score": self.switch.base_score,
            "groups": [list(g) for g in self.groups],
            "alpha": vec(self.alpha),
            "s_off": vec(self.switch.s_off),
            "s_on": vec(self.switch.s_on),
            "s": vec(self.switch.s),
            "alpha_hat": vec(self.alpha_hat),
            "s_hat": vec(self.s_hat),
            "omega": vec(self.omega),
        }


def fd_trace(model, image, class_index: int, config: CombineConfig = CombineConfig()) -> WeightTrace:
    """Run the full weight pipeline and keep all intermediates.

    Budget for the gradient-using schemes: one gradient pass, one unmasked
    forward pass and ``2K`` (or ``K``) masked passes.
    """
    if not 0 <= class_index < model.num_classes:
        raise InputError(f"class index {class_index} out of range [0, {model.num_classes})")
    if config.scheme == "score_only":
        acts, grads = model.capture_activations(image), None
    else:
        acts, grads = model.gradient_pass(image, class_index)
    k = acts.num_channels
    if config.use_grouping:
        groups = all_groups(similarity_matrix(acts), config.theta)
    else:
        groups = singleton_groups(k)
    terms = switch_terms(model, image, groups, class_index, config.use_switch_on)
    trace = WeightTrace(acts, class_index, config, groups, terms, omega=None, score_mode=model.score_mode)
    if grads is None:
        trace.omega = combine_weights(None, terms.s, config)
        return trace
    trace.alpha = grad_weights(grads)
    trace.alpha_hat = min_max_normalize(trace.alpha)
    trace.s_hat = min_max_normalize(terms.s)
    trace.omega = combine_weights(trace.alpha_hat, trace.s_hat, config)
    return trace


def fd_weights(model, image, class_index: int, config: CombineConfig = CombineConfig()) -> WeightVector:
    return fd_trace(model, image, class_index, config).omega
