"""MLP encoders of configurable capacity and their binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .norm import BatchNormHead, bn_forward, l2_normalize
from .tensor import ShapeError, Tensor, matmul, no_grad

# Stand-ins for the backbone ladder; ratios are reported, never asserted.
CAPACITY_LADDER: dict[str, list[int]] = {
    "tiny": [64],
    "small": [128, 128],
    "base": [256, 256],
    "large": [512, 512, 512],
}

CHECKPOINT_MAGIC = b"SBIRCKPT"
CHECKPOINT_VERSION = 1


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(64, ge=1)
    hidden_dims: list[int] = Field(default_factory=lambda: list(CAPACITY_LADDER["base"]))
    embedding_dim: int = Field(512, ge=1)
    activation: Literal["relu"] = "relu"
    head: Literal["batchnorm", "l2", "none"] = "batchnorm"
    capacity_tag: str = "base"
    bn_momentum: float = Field(0.1, gt=0.0, lt=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    @field_validator("hidden_dims")
    @classmethod
    def _non_empty(cls, v: list[int]) -> list[int]:
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")
        return v


def capacity_config(tag: str, input_dim: int = 64, **overrides) -> EncoderConfig:
    """Default config for one rung of the capacity ladder."""
    if tag not in CAPACITY_LADDER:
        raise ValueError(f"unknown capacity tag {tag!r}; choose from {sorted(CAPACITY_LADDER)}")
    return EncoderConfig(
        input_dim=input_dim, hidden_dims=list(CAPACITY_LADDER[tag]), capacity_tag=tag, **overrides
    )


class Encoder:
    def __init__(self, cfg: EncoderConfig, weights: list[Tensor], biases: list[Tensor]):
        self.cfg = cfg
        self.weights = weights
        self.biases = biases
        self.head: BatchNormHead | None = None
        if cfg.head == "batchnorm":
            self.head = BatchNormHead(cfg.embedding_dim, cfg.bn_momentum, cfg.bn_eps)
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        if self.head is not None:
            params += self.head.parameters()
        return params

    def freeze(self) -> "Encoder":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
        if self.head is not None:
            self.head.frozen = True
            self.head.eval()
        return self

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return encode_batch(self, x, mode)

    def clone(self) -> "Encoder":
        twin = Encoder(
            self.cfg,
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )
        if self.head is not None:
            _copy_head(self.head, twin.head)
        return twin


def _copy_head(src: BatchNormHead, dst: BatchNormHead) -> None:
    dst.gamma = Tensor(src.gamma.data.copy(), requires_grad=True)
    dst.beta = Tensor(src.beta.data.copy(), requires_grad=True)
    dst.running_mean = src.running_mean.copy()
    dst.running_var = src.running_var.copy()


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    """Seeded init: weights and biases uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    dims = [cfg.input_dim, *cfg.hidden_dims, cfg.embedding_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))
    return Encoder(cfg, weights, biases)


def encode_batch(enc: Encoder, x, mode: str = "eval") -> Tensor:
    """Linear layers with ReLU between them, no activation after the last one,
    then the configured head."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim != 2 or h.shape[1] != enc.cfg.input_dim:
        raise ShapeError(f"encoder expects (bs, {enc.cfg.input_dim}), got {h.shape}")
    last = len(enc.weights) - 1
    for k, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        h = matmul(h, w.T) + b
        if k < last:
            h = h.relu()
    if enc.head is not None:
        enc.head.mode = "eval" if enc.frozen else mode
        h = bn_forward(enc.head, h)
    elif enc.cfg.head == "l2":
        h = l2_normalize(h)
    return h


def embed(enc: Encoder, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode embeddings as a plain array, without graph recording."""
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            out.append(encode_batch(enc, x[start : start + batch_size], "eval").data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, enc.cfg.embedding_dim))


def param_count(enc: Encoder) -> int:
    return int(sum(p.size for p in enc.parameters()))


def _state_arrays(enc: Encoder) -> list[np.ndarray]:
    arrays = [p.data for p in enc.parameters()]
    if enc.head is not None:
        arrays += [enc.head.running_mean, enc.head.running_var]
    return arrays


def param_checksum(enc: Encoder) -> str:
    """SHA-256 over parameters and running statistics."""
    h = hashlib.sha256()
    for arr in _state_arrays(enc):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoints --------------------------------------------------------------
def save_checkpoint(path: str | Path, encoders: dict[str, Encoder], meta: dict | None = None) -> None:
    """Write ``magic | version u32 | header_len u32 | header json | float64 arrays``.

    Arrays follow the header's encoder order; per encoder: (weight, bias) per
    layer, then gamma, beta, running_mean, running_var for a batchnorm head.
    """
    order = list(encoders)
    header = {
        "order": order,
        "configs": {name: encoders[name].cfg.model_dump() for name in order},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in order:
            for arr in _state_arrays(encoders[name]):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Encoder], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    encoders: dict[str, Encoder] = {}

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    for name in header["order"]:
        cfg = EncoderConfig(**header["configs"][name])
        enc = build_encoder(cfg, seed=0)
        for w, b in zip(enc.weights, enc.biases):
            w.data = take(w.shape)
            b.data = take(b.shape)
        if enc.head is not None:
            d = cfg.embedding_dim
            enc.head.gamma.data = take((d,))
            enc.head.beta.data = take((d,))
            enc.head.running_mean = take((d,))
            enc.head.running_var = take((d,))
        encoders[name] = enc
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    return encoders, header["meta"]
