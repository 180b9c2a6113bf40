"""Classifier backend: scoring, target-layer capture, gradients and channel masking.

All image inputs are ``H x W x 3`` float arrays already in the value range the
network expects. Internally everything runs in float64 on the CPU so repeated
calls are bit-identical.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError

SCORE_MODES = ("probability", "logit")


@dataclass(frozen=True)
class ActivationStack:
    """The ``K x h x w`` feature maps of the target layer for one input."""

    data: np.ndarray
    layer: str

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class GradientStack:
    """Gradients of one class score w.r.t. every target-layer activation."""

    data: np.ndarray
    class_index: int


class ModelHandle:
    """Wraps a torch classifier together with the layer being explained.

    Args:
        net: classifier mapping ``N x 3 x H x W`` to ``N x C`` logits.
        target_layer: dotted module name as reported by ``net.named_modules()``.
        num_classes: number of output classes ``C``.
        input_size: expected ``(H, W)``.
        score_mode: ``"probability"`` (softmax) or ``"logit"``.
        arch: serializable architecture descriptor, used for checkpoints.
        max_batch: largest number of masks pushed through the network at once.
    """

    def __init__(
        self,
        net: nn.Module,
        target_layer: str,
        num_classes: int,
        input_size: tuple[int, int],
        score_mode: str = "probability",
        arch: Optional[dict] = None,
        max_batch: int = 256,
    ) -> None:
        if score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {score_mode!r}; expected one of {SCORE_MODES}")
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        modules = dict(net.named_modules())
        if target_layer not in modules:
            raise ConfigError(f"unknown target layer {target_layer!r}")
        target = modules[target_layer]
        if not any(isinstance(m, nn.Conv2d) for m in target.modules()):
            raise ConfigError(f"target layer {target_layer!r} is not convolutional")

        self.net = net.to(dtype=torch.float64).eval()
        self.target_layer = target_layer
        self.num_classes = int(num_classes)
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.score_mode = score_mode
        self.arch = dict(arch) if arch else {"name": type(net).__name__}
        self.max_batch = int(max_batch)

        self._override: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
        self._captured: Optional[torch.Tensor] = None
        target.register_forward_hook(self._hook)

        zero = np.zeros((*self.input_size, 3))
        shape = self.capture_activations(zero).data.shape
        self.num_channels, self.feature_size = shape[0], shape[1:]

    # -- plumbing ---------------------------------------------------------
    def _hook(self, module, inputs, output):
        if output.dim() != 4:
            raise ConfigError(f"target layer {self.target_layer!r} must produce N x K x h x w maps")
        if self._override is not None:
            output = self._override(output)
        self._captured = output
        return output

    @contextmanager
    def _replacing(self, fn: Optional[Callable[[torch.Tensor], torch.Tensor]]) -> Iterator[None]:
        self._override = fn
        try:
            yield
        finally:
            self._override = None
            self._captured = None

    def _to_tensor(self, image) -> torch.Tensor:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (*self.input_size, 3):
            raise InputError(f"expected image of shape {(*self.input_size, 3)}, got {image.shape}")
        if not np.all(np.isfinite(image)):
            raise InputError("image contains non-finite values")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]

    def _score(self, logits: torch.Tensor, score_mode: Optional[str]) -> torch.Tensor:
        mode = score_mode or self.score_mode
        if mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {mode!r}")
        if logits.shape[-1] != self.num_classes:
            raise ConfigError(f"network produced {logits.shape[-1]} classes, handle expects {self.num_classes}")
        if not torch.isfinite(logits).all():
            raise NumericError("network produced non-finite scores")
        return F.softmax(logits, dim=-1) if mode == "probability" else logits

    def _check_class(self, class_index: int) -> int:
        if not 0 <= int(class_index) < self.num_classes:
            raise InputError(f"class index {class_index} out of range [0, {self.num_classes})")
        return int(class_index)

    def _check_masks(self, masks) -> np.ndarray:
        masks = np.asarray(masks)
        if masks.ndim == 1:
            masks = masks[None]
        if masks.ndim != 2 or masks.shape[0] == 0:
            raise InputError("expected a non-empty list of channel masks")
        if masks.shape[1] != self.num_channels:
            raise InputError(f"mask length {masks.shape[1]} != K={self.num_channels}")
        return masks.astype(bool)

    # -- public operations ------------------------------------------------
    def forward_scores(self, image, score_mode: Optional[str] = None) -> np.ndarray:
        """Class scores for one image, in the handle's score mode unless overridden."""
        x = self._to_tensor(image)
        with torch.no_grad(), self._replacing(None):
            logits = self.net(x)
        return self._score(logits, score_mode)[0].numpy()

    def capture_activations(self, image) -> ActivationStack:
        x = self._to_tensor(image)
        with torch.no_grad(), self._replacing(None):
            self.net(x)
            acts = self._captured[0].numpy().copy()
        if not np.all(np.isfinite(acts)):
            raise NumericError("non-finite activations at target layer")
        return ActivationStack(acts, self.target_layer)

    def gradient_pass(self, image, class_index: int) -> tuple[ActivationStack, GradientStack]:
        """One forward/backward pass returning the activations and their gradients."""
        c = self._check_class(class_index)
        x = self._to_tensor(image)
        # cutting the graph at the target layer skips the upstream backward
        with torch.enable_grad(), self._replacing(lambda out: out.detach().requires_grad_(True)):
            logits = self.net(x)
            acts = self._captured
            score = self._score(logits, None)[0, c]
            (grad,) = torch.autograd.grad(score, acts)
        a = acts.detach()[0].numpy().copy()
        g = grad[0].numpy().copy()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise NumericError("non-finite activations or gradients")
        return ActivationStack(a, self.target_layer), GradientStack(g, c)

    def activation_gradients(self, image, class_index: int) -> GradientStack:
        return self.gradient_pass(image, class_index)[1]

    def batch_masked_forward(self, image, masks) -> np.ndarray:
        """Scores for each channel mask; row ``i`` belongs to ``masks[i]``.

        Off channels are zeroed at the target layer output. The upstream part
        of the network runs once per chunk of ``max_batch`` masks.
        """
        masks = self._check_masks(masks)
        x = self._to_tensor(image)
        out = []
        with torch.no_grad():
            for start in range(0, len(masks), self.max_batch):
                chunk = torch.from_numpy(masks[start:start + self.max_batch].astype(np.float64))
                chunk = chunk[:, :, None, None]
                with self._replacing(lambda a, m=chunk: a.expand(m.shape[0], -1, -1, -1) * m):
                    logits = self.net(x)
                out.append(self._score(logits, None).numpy())
        return np.concatenate(out)

    def masked_forward(self, image, mask) -> np.ndarray:
        mask = np.asarray(mask)
        if mask.ndim != 1:
            raise InputError("a single mask must be one-dimensional")
        return self.batch_masked_forward(image, mask[None])[0]

    def scores_from_activations(self, image, activations, score_mode: Optional[str] = None) -> np.ndarray:
        """Replay the network with the target-layer output replaced by ``activations``.

        ``activations`` is ``K x h x w`` or ``N x K x h x w``; returns ``C`` or
        ``N x C`` scores accordingly. Mainly useful for independent checks.
        """
        acts = np.asarray(activations, dtype=np.float64)
        single = acts.ndim == 3
        replacement = torch.from_numpy(np.ascontiguousarray(acts[None] if single else acts))
        if replacement.shape[1:] != (self.num_channels, *self.feature_size):
            raise InputError(f"activations have shape {tuple(replacement.shape[1:])}")
        x = self._to_tensor(image)
        with torch.no_grad(), self._replacing(lambda a: replacement):
            logits = self.net(x)
        scores = self._score(logits, score_mode).numpy()
        return scores[0] if single else scores

    def parameter_hash(self) -> str:
        """SHA-256 over every parameter and buffer, in state-dict order."""
        h = hashlib.sha256()
        for name, tensor in self.net.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class RowwiseLinear(nn.Linear):
    """``nn.Linear`` evaluated as a broadcast product and row reduction.

    Unlike a BLAS matmul, every output row is reduced in the same order no
    matter how many rows are in the batch, so batched masked passes are
    bit-identical to sequential ones.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = (x.unsqueeze(-2) * self.weight).sum(-1)
        return y if self.bias is None else y + self.bias


class TinyCNN(nn.Module):
    """32x32 reference network: two conv blocks, global average pool, linear head."""

    def __init__(self, num_classes: int = 3, bias: bool = False) -> None:
        super().__init__()
        self.conv1 = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1, bias=bias), nn.ReLU(), nn.MaxPool2d(2))
        self.conv2 = nn.Sequential(nn.Conv2d(8, 16, 3, padding=1, bias=bias), nn.ReLU(), nn.MaxPool2d(2))
        self.head = RowwiseLinear(16, num_classes, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv2(self.conv1(x))
        return self.head(x.mean(dim=(2, 3)))


def make_tiny_test_cnn(
    seed: int,
    num_classes: int = 3,
    bias: bool = False,
    score_mode: str = "probability",
    target_layer: str = "conv2",
) -> ModelHandle:
    """Build the reference tiny CNN with weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = TinyCNN(num_classes, bias=bias)
    arch = {"name": "tiny", "seed": int(seed), "num_classes": int(num_classes), "bias": bool(bias)}
    return ModelHandle(net, target_layer, num_classes, (32, 32), score_mode=score_mode, arch=arch)


def save_checkpoint(model: ModelHandle, path) -> None:
    if model.arch.get("name") != "tiny":
        raise ConfigError("only tiny-CNN handles can be checkpointed")
    payload = {
        "arch": model.arch,
        "target_layer": model.target_layer,
        "input_size": list(model.input_size),
        "state_dict": {k: v.detach().clone() for k, v in model.net.state_dict().items()},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path, score_mode: str = "probability", target_layer: Optional[str] = None) -> ModelHandle:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    arch = payload["arch"]
    if arch.get("name") != "tiny":
        raise ConfigError(f"unsupported architecture {arch.get('name')!r}")
    model = make_tiny_test_cnn(
        arch["seed"], arch["num_classes"], arch["bias"], score_mode,
        target_layer or payload["target_layer"],
    )
    model.net.load_state_dict(payload["state_dict"])
    model.net.to(dtype=torch.float64)
    return model


def load_model(spec: str, layer: Optional[str] = None, score_mode: str = "probability") -> ModelHandle:
    """Resolve ``"tiny:<seed>"`` or a checkpoint path into a handle."""
    if spec.startswith("tiny:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad model spec {spec!r}") from None
        return make_tiny_test_cnn(seed, score_mode=score_mode, target_layer=layer or "conv2")
    return load_checkpoint(spec, score_mode=score_mode, target_layer=layer)


def channel_masks(groups: Sequence[Sequence[int]], num_channels: int, keep: bool) -> np.ndarray:
    """One mask per group; ``keep=False`` switches the group off, ``True`` keeps only it."""
    masks = np.zeros((len(groups), num_channels), dtype=bool)
    for row, members in zip(masks, groups):
        row[list(members)] = True
    return masks if keep else ~masks
