"""Training procedures: dual-encoder RTL training, teacher->student distillation
and double-guidance finetuning, plus run artifacts and checkpoint evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import CrossDomainDataset
from .encoders import Encoder, embed, encode_batch, load_checkpoint, save_checkpoint
from .losses import DistillConfig, RtlConfig, distill_loss, double_guidance_loss, rtl_loss, triplet_loss_matrix
from .optim import OptimizerState, optimizer_step
from .retrieval import build_index, metrics_record, recall_at_k
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "loss", "recall@1", "lr")


class TrainingError(RuntimeError):
    pass


class TrainSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs_total: int = Field(200, ge=0)
    lr_stage1: float = Field(1e-3, gt=0.0)
    lr_stage2: float = Field(1e-5, gt=0.0)
    stage_boundary_epoch: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=2)
    seed: int = 0
    eval_every: int = Field(10, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"

    @model_validator(mode="after")
    def _check(self) -> "TrainSchedule":
        if self.epochs_total > 0 and self.stage_boundary_epoch > self.epochs_total:
            raise ValueError("stage_boundary_epoch must not exceed epochs_total")
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; stage 2 starts after the boundary epoch."""
        return self.lr_stage1 if epoch <= self.stage_boundary_epoch else self.lr_stage2


@dataclass
class RunArtifacts:
    kind: str
    config: dict
    columns: tuple[str, ...] = METRICS_COLUMNS
    metrics: list[dict] = field(default_factory=list)
    checkpoints: dict[str, dict[str, Encoder]] = field(default_factory=dict)
    seed_trace: list[int] = field(default_factory=list)
    initial_recall: float | None = None
    best_recall: float | None = None
    best_epoch: int = 0

    @property
    def final_recall(self) -> float | None:
        for row in reversed(self.metrics):
            if row.get("recall@1") is not None:
                return row["recall@1"]
        return self.initial_recall

    @property
    def lr_log(self) -> list[float]:
        return [row["lr"] for row in self.metrics]

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "epochs": len(self.metrics),
            "initial_recall@1": self.initial_recall,
            "final_recall@1": self.final_recall,
            "best_recall@1": self.best_recall,
            "best_epoch": self.best_epoch,
            "seed_trace": self.seed_trace,
        }


# -- serialization --------------------------------------------------------------
def format_float(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.9g}"


def metrics_csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_float(row.get(c)) for c in columns])
    return buf.getvalue()


def write_run(art: RunArtifacts, run_dir: str | Path) -> Path:
    """config.json, metrics.csv, summary.json and checkpoints/<name>.bin."""
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(art.config, indent=2, sort_keys=True) + "\n")
    (run_dir / "metrics.csv").write_text(metrics_csv_text(art.columns, art.metrics))
    (run_dir / "summary.json").write_text(json.dumps(art.summary(), indent=2, sort_keys=True) + "\n")
    for name, encs in art.checkpoints.items():
        save_checkpoint(run_dir / "checkpoints" / f"{name}.bin", encs, {"run": art.kind, "stage": name})
    return run_dir


# -- helpers ----------------------------------------------------------------------
def evaluate_encoders(
    photo_enc: Encoder, sketch_enc: Encoder, ds: CrossDomainDataset, k: int = 1, split: str = "test"
) -> float:
    """Recall@k with the split's photos as gallery and its sketches as queries."""
    photos = ds.photo_indices(split)
    sketches = ds.sketch_indices(split)
    index = build_index(embed(photo_enc, ds.photos[photos]), photos.tolist())
    queries = embed(sketch_enc, ds.sketches[sketches])
    return recall_at_k(index, queries, ds.sketch_photo[sketches].tolist(), k)


def _batches(rng: np.random.Generator, items: np.ndarray, bs: int) -> list[np.ndarray]:
    perm = rng.permutation(items)
    return [perm[i : i + bs] for i in range(0, len(perm) - bs + 1, bs)]


def _trainable(*encoders: Encoder) -> list[Tensor]:
    return [p for enc in encoders if not enc.frozen for p in enc.parameters()]


def _step(loss: Tensor, params: list[Tensor], lr: float, state: OptimizerState, what: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"{what}: non-finite loss {value}")
    grads = backward(loss, wrt=params)
    optimizer_step(params, [grads[p.node_id] for p in params], lr, state)
    return value


@contextmanager
def _epoch_guard(what: str, epoch: int):
    try:
        yield
    except NonFiniteError as exc:
        raise TrainingError(f"{what}: epoch {epoch}: {exc}") from exc


def _snapshot(**encoders: Encoder) -> dict[str, Encoder]:
    out = {}
    for name, enc in encoders.items():
        twin = enc.clone()
        if enc.frozen:
            twin.freeze()
        out[name] = twin
    return out


class _Tracker:
    """Per-epoch metric rows, periodic evaluation and best-by-recall snapshots."""

    def __init__(self, art: RunArtifacts, sched: TrainSchedule, evaluate, encoders: dict[str, Encoder]):
        self.art, self.sched, self.evaluate, self.encoders = art, sched, evaluate, encoders
        art.initial_recall = evaluate()
        art.best_recall = art.initial_recall
        art.checkpoints["initial"] = _snapshot(**encoders)
        art.checkpoints["best"] = art.checkpoints["initial"]

    def end_epoch(self, epoch: int, row: dict) -> None:
        due = epoch % self.sched.eval_every == 0 or epoch == self.sched.epochs_total
        row["recall@1"] = self.evaluate() if due else None
        if due and row["recall@1"] > self.art.best_recall:
            self.art.best_recall = row["recall@1"]
            self.art.best_epoch = epoch
            self.art.checkpoints["best"] = _snapshot(**self.encoders)
        self.art.metrics.append(row)
        log.debug("%s epoch %d: %s", self.art.kind, epoch, row)

    def finish(self) -> RunArtifacts:
        self.art.checkpoints["final"] = _snapshot(**self.encoders)
        return self.art


# -- pipeline A: dual-encoder RTL training ------------------------------------------
def train_rtl(
    ds: CrossDomainDataset,
    photo_enc: Encoder,
    sketch_enc: Encoder,
    cfg: RtlConfig | None = None,
    sched: TrainSchedule | None = None,
    loss: Literal["rtl", "triplet"] = "rtl",
    run_dir: str | Path | None = None,
) -> RunArtifacts:
    """Each epoch visits every training (sketch, photo) pair once in a seeded
    shuffle; row i of the photo batch and row i of the sketch batch match."""
    cfg = cfg or RtlConfig()
    sched = sched or TrainSchedule()
    pairs = ds.sketch_indices("train")
    if sched.batch_size > len(pairs):
        raise ValueError(f"batch size {sched.batch_size} exceeds {len(pairs)} training pairs")
    params = _trainable(photo_enc, sketch_enc)
    if not params:
        raise ValueError("both encoders are frozen; nothing to train")
    loss_fn = rtl_loss if loss == "rtl" else triplet_loss_matrix
    art = RunArtifacts(
        kind="train-rtl",
        config={
            "loss": loss,
            "rtl": cfg.model_dump(),
            "schedule": sched.model_dump(),
            "photo_encoder": photo_enc.cfg.model_dump(),
            "sketch_encoder": sketch_enc.cfg.model_dump(),
        },
        seed_trace=[sched.seed],
    )
    tracker = _Tracker(
        art, sched, lambda: evaluate_encoders(photo_enc, sketch_enc, ds), {"photo": photo_enc, "sketch": sketch_enc}
    )
    rng = np.random.default_rng(sched.seed)
    state = OptimizerState(kind=sched.optimizer)
    for epoch in range(1, sched.epochs_total + 1):
        lr = sched.lr_at(epoch)
        losses = []
        with _epoch_guard("train_rtl", epoch):
            for sk in _batches(rng, pairs, sched.batch_size):
                p = encode_batch(photo_enc, ds.photos[ds.sketch_photo[sk]], "train")
                s = encode_batch(sketch_enc, ds.sketches[sk], "train")
                losses.append(_step(loss_fn(p, s, cfg).loss, params, lr, state, "train_rtl"))
        tracker.end_epoch(epoch, {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
    art = tracker.finish()
    if run_dir is not None:
        write_run(art, run_dir)
    return art


# -- pipeline B: knowledge distillation -------------------------------------------------
def distill(
    ds: CrossDomainDataset,
    teacher: Encoder,
    student: Encoder,
    variant: str | DistillConfig = "huber",
    sched: TrainSchedule | None = None,
    domain: Literal["sketch", "photo"] = "sketch",
    counterpart: Encoder | None = None,
    run_dir: str | Path | None = None,
) -> RunArtifacts:
    """Regress the frozen teacher's eval-mode embeddings on the training inputs
    of ``domain``. ``counterpart`` is the other domain's encoder, used only to
    report recall@1."""
    dcfg = variant if isinstance(variant, DistillConfig) else DistillConfig(variant=variant)
    sched = sched or TrainSchedule()
    if not teacher.frozen:
        raise ValueError("the teacher must be frozen before distillation")
    if teacher.cfg.embedding_dim != student.cfg.embedding_dim:
        raise ValueError(
            f"teacher/student embedding dims differ: {teacher.cfg.embedding_dim} vs {student.cfg.embedding_dim}"
        )
    if domain == "sketch":
        inputs = ds.sketches[ds.sketch_indices("train")]
        held_out = ds.sketches[ds.sketch_indices("test")]
    else:
        inputs = ds.photos[ds.photo_indices("train")]
        held_out = ds.photos[ds.photo_indices("test")]
    if sched.batch_size > len(inputs):
        raise ValueError(f"batch size {sched.batch_size} exceeds {len(inputs)} training inputs")
    targets = embed(teacher, inputs)
    held_targets = embed(teacher, held_out)
    params = _trainable(student)

    def evaluate() -> float | None:
        if counterpart is None:
            return None
        if domain == "sketch":
            return evaluate_encoders(counterpart, student, ds)
        return evaluate_encoders(student, counterpart, ds)

    art = RunArtifacts(
        kind="distill",
        config={
            "domain": domain,
            "distill": dcfg.model_dump(),
            "schedule": sched.model_dump(),
            "teacher": teacher.cfg.model_dump(),
            "student": student.cfg.model_dump(),
        },
        columns=METRICS_COLUMNS + ("mse_to_teacher",),
        seed_trace=[sched.seed],
    )
    encoders = {"student": student}
    if counterpart is not None:
        encoders = {domain: student, ("photo" if domain == "sketch" else "sketch"): counterpart}
    art.initial_recall = evaluate()
    art.best_recall = art.initial_recall
    art.checkpoints["initial"] = _snapshot(**encoders)
    art.checkpoints["best"] = art.checkpoints["initial"]
    rng = np.random.default_rng(sched.seed)
    state = OptimizerState(kind=sched.optimizer)
    order = np.arange(len(inputs))
    for epoch in range(1, sched.epochs_total + 1):
        lr = sched.lr_at(epoch)
        losses = []
        with _epoch_guard("distill", epoch):
            for batch in _batches(rng, order, sched.batch_size):
                out = encode_batch(student, inputs[batch], "train")
                losses.append(_step(distill_loss(out, targets[batch], dcfg), params, lr, state, "distill"))
        mse = float(np.mean((embed(student, held_out) - held_targets) ** 2))
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "mse_to_teacher": mse}
        due = counterpart is not None and (epoch % sched.eval_every == 0 or epoch == sched.epochs_total)
        row["recall@1"] = evaluate() if due else None
        if due and row["recall@1"] > art.best_recall:
            art.best_recall, art.best_epoch = row["recall@1"], epoch
            art.checkpoints["best"] = _snapshot(**encoders)
        art.metrics.append(row)
    art.checkpoints["final"] = _snapshot(**encoders)
    if run_dir is not None:
        write_run(art, run_dir)
    return art


# -- pipeline C: double-guidance finetuning ---------------------------------------------
def finetune_double_guidance(
    ds: CrossDomainDataset,
    frozen_photo_enc: Encoder,
    frozen_sketch_teacher: Encoder,
    student: Encoder,
    cfg: RtlConfig | None = None,
    lam: float = 1.0,
    sched: TrainSchedule | None = None,
    delta: float = 1.0,
    run_dir: str | Path | None = None,
) -> RunArtifacts:
    """Finetune a sketch student with RTL against the frozen photo encoder plus
    a Huber pull towards the frozen sketch teacher."""
    cfg = cfg or RtlConfig()
    sched = sched or TrainSchedule()
    if not (frozen_photo_enc.frozen and frozen_sketch_teacher.frozen):
        raise ValueError("both guides must be frozen")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    pairs = ds.sketch_indices("train")
    if sched.batch_size > len(pairs):
        raise ValueError(f"batch size {sched.batch_size} exceeds {len(pairs)} training pairs")
    photo_embs = embed(frozen_photo_enc, ds.photos)
    teacher_embs = embed(frozen_sketch_teacher, ds.sketches)
    params = _trainable(student)
    art = RunArtifacts(
        kind="finetune-dg",
        config={
            "rtl": cfg.model_dump(),
            "lambda": lam,
            "huber_delta": delta,
            "schedule": sched.model_dump(),
            "photo_encoder": frozen_photo_enc.cfg.model_dump(),
            "teacher": frozen_sketch_teacher.cfg.model_dump(),
            "student": student.cfg.model_dump(),
        },
        columns=METRICS_COLUMNS + ("rtl_term", "huber_term"),
        seed_trace=[sched.seed],
    )
    tracker = _Tracker(
        art,
        sched,
        lambda: evaluate_encoders(frozen_photo_enc, student, ds),
        {"photo": frozen_photo_enc, "sketch": student},
    )
    rng = np.random.default_rng(sched.seed)
    state = OptimizerState(kind=sched.optimizer)
    for epoch in range(1, sched.epochs_total + 1):
        lr = sched.lr_at(epoch)
        totals, rtl_terms, huber_terms = [], [], []
        with _epoch_guard("finetune_double_guidance", epoch):
            for sk in _batches(rng, pairs, sched.batch_size):
                s = encode_batch(student, ds.sketches[sk], "train")
                p = Tensor(photo_embs[ds.sketch_photo[sk]])
                t = Tensor(teacher_embs[sk])
                total = double_guidance_loss(s, p, t, cfg, lam, delta)
                rtl_terms.append(rtl_loss(p, Tensor(s.data), cfg).value)
                huber_terms.append(distill_loss(Tensor(s.data), t, "huber", delta=delta).item())
                totals.append(_step(total, params, lr, state, "finetune_double_guidance"))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(totals)),
            "lr": lr,
            "rtl_term": float(np.mean(rtl_terms)),
            "huber_term": float(np.mean(huber_terms)),
        }
        tracker.end_epoch(epoch, row)
    art = tracker.finish()
    if run_dir is not None:
        write_run(art, run_dir)
    return art


# -- evaluation ----------------------------------------------------------------------
def evaluate_checkpoint(
    ckpt: str | Path, ds: CrossDomainDataset, k: int = 1, run_id: str | None = None, seed: int = 0
) -> dict:
    """Recall@k of a checkpoint holding ``photo`` and ``sketch`` encoders."""
    encoders, _meta = load_checkpoint(ckpt)
    missing = {"photo", "sketch"} - set(encoders)
    if missing:
        raise ValueError(f"{ckpt}: checkpoint lacks encoders {sorted(missing)}")
    photo, sketch = encoders["photo"], encoders["sketch"]
    if photo.cfg.input_dim != ds.photos.shape[1] or sketch.cfg.input_dim != ds.sketches.shape[1]:
        raise ValueError(
            f"{ckpt}: encoder input dims ({photo.cfg.input_dim}, {sketch.cfg.input_dim}) do not match "
            f"dataset ({ds.photos.shape[1]}, {ds.sketches.shape[1]})"
        )
    n_gallery = len(ds.photo_indices("test"))
    n_queries = len(ds.sketch_indices("test"))
    recall = evaluate_encoders(photo, sketch, ds, k)
    return metrics_record(run_id or Path(ckpt).stem, k, recall, n_gallery, n_queries, seed)
