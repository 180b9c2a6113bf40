"""Small stand-in models shared by the tests."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from fdcam.backend import ModelHandle, RowwiseLinear


class GapLinearNet(nn.Module):
    """One conv layer (the target), global average pool and a fixed linear head."""

    def __init__(self, coeffs: np.ndarray, in_ch: int = 3, seed: int = 0):
        super().__init__()
        k = coeffs.shape[1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(nn.Conv2d(in_ch, k, 3, padding=1, bias=False), nn.ReLU())
        self.head = RowwiseLinear(k, coeffs.shape[0], bias=False)
        with torch.no_grad():
            self.head.weight.copy_(torch.as_tensor(coeffs, dtype=torch.float32))

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def gap_linear_model(coeffs, size=(8, 8), score_mode="logit") -> ModelHandle:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    net = GapLinearNet(coeffs)
    handle = ModelHandle(net, "features", coeffs.shape[0], size, score_mode=score_mode)
    with torch.no_grad():
        handle.net.head.weight.copy_(torch.from_numpy(coeffs))
    return handle


class CountingModel:
    """Wraps a ModelHandle and counts the network passes each call implies."""

    def __init__(self, model: ModelHandle):
        self._model = model
        self.forward_passes = 0
        self.masked_passes = 0
        self.gradient_passes = 0

    def __getattr__(self, name):
        return getattr(self._model, name)

    def forward_scores(self, image, score_mode=None):
        self.forward_passes += 1
        return self._model.forward_scores(image, score_mode)

    def capture_activations(self, image):
        self.forward_passes += 1
        return self._model.capture_activations(image)

    def batch_masked_forward(self, image, masks):
        self.masked_passes += len(np.atleast_2d(masks))
        return self._model.batch_masked_forward(image, masks)

    def masked_forward(self, image, mask):
        self.masked_passes += 1
        return self._model.masked_forward(image, mask)

    def gradient_pass(self, image, class_index):
        self.gradient_passes += 1
        return self._model.gradient_pass(image, class_index)

    def activation_gradients(self, image, class_index):
        return self.gradient_pass(image, class_index)[1]


class ProbeModel:
    """Scores depend only on the pixels: class 0 gets ``fn(image)``, class 1 the rest."""

    score_mode = "probability"
    num_classes = 2

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def forward_scores(self, image, score_mode=None):
        image = np.array(image, dtype=np.float64)
        self.calls.append(image)
        p = float(self.fn(image))
        return np.array([p, 1.0 - p])
