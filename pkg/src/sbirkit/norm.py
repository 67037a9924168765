"""Embedding heads: per-domain batch normalization and row-wise l2 normalization."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, clamp_min, sqrt


class BatchNormHead:
    """Batch normalization over the embedding dimension with running statistics.

    Normalization uses the biased batch variance; the running variance is
    updated with that same biased estimate.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        if dim < 1:
            raise ValueError("dim must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.mode = "train"
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def train(self) -> "BatchNormHead":
        self.mode = "train"
        return self

    def eval(self) -> "BatchNormHead":
        self.mode = "eval"
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return bn_forward(self, x)


def bn_forward(head: BatchNormHead, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != head.dim:
        raise ShapeError(f"batchnorm: expected (bs, {head.dim}), got {x.shape}")
    # a frozen head never touches its statistics
    if head.mode == "eval" or head.frozen:
        scale = 1.0 / np.sqrt(head.running_var + head.eps)
        xhat = (x - head.running_mean) * scale
        return xhat * head.gamma + head.beta

    if x.shape[0] < 2:
        raise ValueError("batchnorm in train mode needs a batch of at least 2")
    mu = x.mean(axis=0)
    centered = x - mu
    var = centered.square().mean(axis=0)
    xhat = centered / sqrt(var, head.eps)
    m = head.momentum
    head.running_mean = (1.0 - m) * head.running_mean + m * mu.data
    head.running_var = (1.0 - m) * head.running_var + m * var.data
    return xhat * head.gamma + head.beta


def l2_normalize(x) -> Tensor:
    """Scale each row to unit euclidean norm; all-zero rows stay zero."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize: expected a matrix, got {x.shape}")
    norm = sqrt(x.square().sum(axis=1, keepdims=True), 1e-30)
    return x / clamp_min(norm, 1e-12)
