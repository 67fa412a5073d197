"""Per-ray radiance head and the training loss.

The head is an 8-layer, 256-wide perceptron over the encoded ray direction
concatenated with the per-ray feature; colors come out of a logistic so they
stay inside (0, 1). An atomic counter tracks how many rays the head has ever
evaluated, which is how the one-evaluation-per-ray property is asserted.
"""

from __future__ import annotations

import threading

import numpy as np
import torch
import torch.nn as nn

from . import geometry

HEAD_LAYERS = 8
HEAD_WIDTH = 256


class LightFieldHead(nn.Module):
    """Maps (encoded direction, ray feature) to RGB, once per ray."""

    def __init__(self, feature_dim: int = 128, direction_dim: int = 30):
        super().__init__()
        self.feature_dim = feature_dim
        self.direction_dim = direction_dim
        dims = [direction_dim + feature_dim] + [HEAD_WIDTH] * (HEAD_LAYERS - 1) + [3]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(HEAD_LAYERS)
        )
        self.act = nn.ReLU()
        self._eval_lock = threading.Lock()
        self._evaluations = 0

    @property
    def evaluations(self) -> int:
        with self._eval_lock:
            return self._evaluations

    def reset_evaluations(self):
        with self._eval_lock:
            self._evaluations = 0

    def forward(self, dirs_encoded: torch.Tensor, ray_features: torch.Tensor) -> torch.Tensor:
        if dirs_encoded.shape[0] != ray_features.shape[0]:
            raise ValueError("direction and feature batches disagree")
        if not (torch.isfinite(dirs_encoded).all() and torch.isfinite(ray_features).all()):
            raise ValueError("non-finite input to the radiance head")
        h = torch.cat([dirs_encoded, ray_features], dim=1)
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
        rgb = torch.sigmoid(self.layers[-1](h))
        with self._eval_lock:
            self._evaluations += len(rgb)
        return rgb


def predict_color(ray_dirs, ray_features: torch.Tensor, params: LightFieldHead,
                  bands: int = 4) -> torch.Tensor:
    """Radiance for raw world directions; increments the counter per ray."""
    dirs = np.atleast_2d(np.asarray(ray_dirs, dtype=np.float64))
    if not np.isfinite(dirs).all():
        raise ValueError("non-finite ray direction")
    enc = torch.as_tensor(geometry.positional_encode(dirs, bands),
                          dtype=ray_features.dtype)
    if ray_features.ndim == 1:
        ray_features = ray_features[None]
    return params(enc, ray_features)


def image_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum over the ray batch of squared color-error norms."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).sum()
