"""Training objectives: distance matrices, triplet / relative triplet loss,
distillation losses and the double-guidance composite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .tensor import SQRT_EPS, ShapeError, Tensor, clamp_min, minimum, pairwise_sq_dist, relu, sqrt

_SQRT_EPS_ROOT = math.sqrt(SQRT_EPS)


class RtlConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    margin: float = Field(3.0, ge=0.0)
    distance: Literal["euclidean", "squared"] = "euclidean"
    reduction: Literal["sum", "mean_nonzero"] = "sum"
    max_guard_eps: float = Field(1e-8, gt=0.0)
    # stop-gradient through the photo-photo weighting; False differentiates the loss as written
    detach_weighting: bool = True


@dataclass
class LossReport:
    loss: Tensor
    dist_ap: np.ndarray
    dist_an: np.ndarray
    tl_matrix: np.ndarray
    w_matrix: np.ndarray
    rtl_matrix: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def guarded_distance(squared: Tensor) -> Tensor:
    """Euclidean distance from squared distance: exactly 0 at coincident points,
    with a finite derivative there."""
    return sqrt(squared, SQRT_EPS) - _SQRT_EPS_ROOT


def pairwise_distance_matrix(a, b, distance: str = "euclidean") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distance_matrix: shapes {a.shape} and {b.shape} do not conform")
    sq = pairwise_sq_dist(a, b)
    if distance == "squared":
        return sq
    if distance != "euclidean":
        raise ValueError(f"unknown distance {distance!r}")
    return guarded_distance(sq)


def _check_batch(photo: Tensor, sketch: Tensor) -> int:
    if photo.ndim != 2 or sketch.ndim != 2:
        raise ShapeError(f"expected matrices, got {photo.shape} and {sketch.shape}")
    if photo.shape != sketch.shape:
        raise ShapeError(f"batch mismatch: photos {photo.shape} vs sketches {sketch.shape}")
    if photo.shape[0] < 2:
        raise ValueError("triplet losses need a batch of at least 2 pairs")
    return photo.shape[0]


def _reduce(matrix: Tensor, reduction: str) -> Tensor:
    total = matrix.sum()
    if reduction == "sum":
        return total
    if reduction == "mean_nonzero":
        active = int(np.count_nonzero(matrix.data > 0))
        return total * (1.0 / max(active, 1))
    raise ValueError(f"unknown reduction {reduction!r}")


def _triplet_terms(photo: Tensor, sketch: Tensor, cfg: RtlConfig):
    bs = _check_batch(photo, sketch)
    eye = np.eye(bs)
    d = pairwise_distance_matrix(photo, sketch, cfg.distance)
    d_ap = (d * eye).sum(axis=1)
    tl = relu(d_ap.reshape(bs, 1) - d + cfg.margin) * (1.0 - eye)
    return d, d_ap, tl


def triplet_loss_matrix(photo_embs, sketch_embs, cfg: RtlConfig | None = None) -> LossReport:
    """Classic triplet loss with photos as anchors, the matching sketch as positive
    and every other sketch in the batch as a negative."""
    cfg = cfg or RtlConfig()
    photo, sketch = _as_tensor(photo_embs), _as_tensor(sketch_embs)
    d, d_ap, tl = _triplet_terms(photo, sketch, cfg)
    ones = np.ones(d.shape)
    return LossReport(
        loss=_reduce(tl, cfg.reduction),
        dist_ap=d_ap.numpy(),
        dist_an=d.numpy(),
        tl_matrix=tl.numpy(),
        w_matrix=ones,
        rtl_matrix=tl.numpy(),
    )


def relative_weighting_matrix(photo_embs, cfg: RtlConfig | None = None) -> Tensor:
    """Photo-photo distances divided by their maximum (guarded against an all-zero batch)."""
    cfg = cfg or RtlConfig()
    photo = _as_tensor(photo_embs)
    if photo.ndim != 2 or photo.shape[0] < 2:
        raise ValueError("weighting needs at least 2 photo embeddings")
    if cfg.detach_weighting:
        photo = photo.detach()
    m = pairwise_distance_matrix(photo, photo, cfg.distance)
    return m / clamp_min(m.max(), cfg.max_guard_eps)


def rtl_loss(photo_embs, sketch_embs, cfg: RtlConfig | None = None) -> LossReport:
    cfg = cfg or RtlConfig()
    photo, sketch = _as_tensor(photo_embs), _as_tensor(sketch_embs)
    d, d_ap, tl = _triplet_terms(photo, sketch, cfg)
    w = relative_weighting_matrix(photo, cfg)
    rtl = tl * w
    return LossReport(
        loss=_reduce(rtl, cfg.reduction),
        dist_ap=d_ap.numpy(),
        dist_an=d.numpy(),
        tl_matrix=tl.numpy(),
        w_matrix=w.numpy(),
        rtl_matrix=rtl.numpy(),
    )


# -- distillation -------------------------------------------------------------
DistillVariant = Literal["mse", "mae", "mse+mae", "huber", "kl", "kl+softmax"]
DISTILL_VARIANTS: tuple[str, ...] = ("mse", "mae", "mse+mae", "huber", "kl", "kl+softmax")


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: DistillVariant = "huber"
    delta: float = Field(1.0, gt=0.0)
    temperature: float = Field(1.0, gt=0.0)
    mse_weight: float = Field(0.5, ge=0.0)
    mae_weight: float = Field(0.5, ge=0.0)


def huber(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: quadratic inside ``|r| <= delta``, linear outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = residual.abs()
    q = minimum(a, delta)
    return 0.5 * q.square() + delta * (a - q)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis).exp()


def _kl_terms(student: Tensor, teacher: Tensor, tau: float) -> Tensor:
    log_p_t = log_softmax(teacher * (1.0 / tau), axis=1)
    log_p_s = log_softmax(student * (1.0 / tau), axis=1)
    return log_p_t.exp() * (log_p_t - log_p_s)


def distill_loss(student_embs, teacher_embs, variant: str | DistillConfig = "huber", **kw) -> Tensor:
    """Response-based distillation loss of student embeddings against a fixed teacher.

    ``variant`` is either a name or a :class:`DistillConfig`; extra keyword
    arguments (``delta``, ``temperature``, weights) build the config.
    """
    cfg = variant if isinstance(variant, DistillConfig) else DistillConfig(variant=variant, **kw)
    student = _as_tensor(student_embs)
    teacher = _as_tensor(teacher_embs).detach()
    if student.shape != teacher.shape:
        raise ShapeError(f"distill_loss: student {student.shape} vs teacher {teacher.shape}")
    r = student - teacher
    v = cfg.variant
    if v == "mse":
        return r.square().mean()
    if v == "mae":
        return r.abs().mean()
    if v == "mse+mae":
        return (cfg.mse_weight * r.square() + cfg.mae_weight * r.abs()).mean()
    if v == "huber":
        return huber(r, cfg.delta).mean()
    if v == "kl":
        return _kl_terms(student, teacher, cfg.temperature).mean()
    if v == "kl+softmax":
        # per-sample KL summed over the distribution, batch-averaged, tau^2 scaled
        tau = cfg.temperature
        kl = _kl_terms(student, teacher, tau).sum(axis=1).mean()
        return kl * (tau * tau)
    raise ValueError(f"unknown distillation variant {v!r}")


def double_guidance_loss(
    student_sketch_embs,
    frozen_photo_embs,
    teacher_sketch_embs,
    cfg: RtlConfig | None = None,
    lam: float = 1.0,
    delta: float = 1.0,
) -> Tensor:
    """RTL against frozen photo embeddings plus ``lam`` times Huber to the sketch teacher."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    photo = _as_tensor(frozen_photo_embs).detach()
    rtl = rtl_loss(photo, student_sketch_embs, cfg).loss
    if lam == 0:
        return rtl
    return rtl + lam * distill_loss(student_sketch_embs, teacher_sketch_embs, "huber", delta=delta)
