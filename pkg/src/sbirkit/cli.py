"""``sbirkit`` command line: one subcommand per tool, JSON configs with flag overrides.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SynthSpec, generate_dataset, load_dataset, photo_feature_maps, save_dataset
from .encoders import CAPACITY_LADDER, EncoderConfig, build_encoder, capacity_config, load_checkpoint
from .losses import DistillConfig, RtlConfig
from .pipelines import (
    TrainSchedule,
    distill,
    evaluate_checkpoint,
    finetune_double_guidance,
    format_float,
    metrics_csv_text,
    train_rtl,
)
from .retrieval import write_metrics_json
from .rmac import RmacConfig, find_ambiguous_pairs, load_descriptors, multires_rmac, save_descriptors, write_pair_report

log = logging.getLogger("sbirkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    """Bad arguments or configuration, detected before any compute."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderChoice(_Strict):
    capacity: str = "base"
    hidden_dims: list[int] | None = None
    embedding_dim: int = Field(512, ge=1)
    head: Literal["batchnorm", "l2", "none"] = "batchnorm"

    @model_validator(mode="after")
    def _known_capacity(self) -> "EncoderChoice":
        if self.hidden_dims is None and self.capacity not in CAPACITY_LADDER:
            raise ValueError(f"unknown capacity {self.capacity!r}; choose from {sorted(CAPACITY_LADDER)}")
        return self

    def build(self, input_dim: int) -> EncoderConfig:
        if self.hidden_dims is None:
            return capacity_config(self.capacity, input_dim, embedding_dim=self.embedding_dim, head=self.head)
        return EncoderConfig(
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            embedding_dim=self.embedding_dim,
            head=self.head,
            capacity_tag=self.capacity,
        )


class GenDataConfig(_Strict):
    out: str
    spec: SynthSpec = Field(default_factory=SynthSpec)
    descriptors: bool = True
    rmac: RmacConfig = Field(default_factory=RmacConfig)


class TrainRtlConfig(_Strict):
    data: str
    out: str
    loss: Literal["rtl", "triplet"] = "rtl"
    photo_encoder: EncoderChoice = Field(default_factory=EncoderChoice)
    sketch_encoder: EncoderChoice = Field(default_factory=EncoderChoice)
    rtl: RtlConfig = Field(default_factory=RtlConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)


class DistillRunConfig(_Strict):
    data: str
    out: str
    teacher: str
    domain: Literal["sketch", "photo"] = "sketch"
    student: EncoderChoice = Field(default_factory=EncoderChoice)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)


class FinetuneDgConfig(_Strict):
    data: str
    out: str
    guides: str
    student: str
    lam: float = Field(1.0, ge=0.0)
    huber_delta: float = Field(1.0, gt=0.0)
    rtl: RtlConfig = Field(default_factory=RtlConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)


class EvalConfig(_Strict):
    data: str
    checkpoint: str
    k: int = Field(1, ge=1)
    out: str | None = None
    run_id: str | None = None
    seed: int = 0


class RmacAuditConfig(_Strict):
    features: str
    out: str
    top_k: int = Field(100, ge=1)


class ExportConfig(_Strict):
    run: str
    format: Literal["csv", "json"] = "csv"
    out: str | None = None


# -- argument parsing ---------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="seed for data generation, shuffling and initialization")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbirkit", description="Sketch-based retrieval experiments on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and RMAC descriptor dump")
    _add_common(p)
    p.add_argument("--spec", help="JSON file with dataset spec fields")
    p.add_argument("--out")
    p.add_argument("--ambiguity-rate", type=float)
    p.add_argument("--no-descriptors", action="store_true")

    p = sub.add_parser("train-rtl", help="train photo and sketch encoders with RTL or triplet loss")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--loss", choices=["rtl", "triplet"])
    p.add_argument("--head", choices=["batchnorm", "l2", "none"], help="head for both encoders")
    p.add_argument("--photo-capacity")
    p.add_argument("--sketch-capacity")
    p.add_argument("--margin", type=float)
    _add_schedule(p)

    p = sub.add_parser("distill", help="distill a frozen teacher encoder into a student")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--teacher", help="checkpoint holding the teacher (and its counterpart)")
    p.add_argument("--variant", choices=["mse", "mae", "mse+mae", "huber", "kl", "kl+softmax"])
    p.add_argument("--student-capacity")
    _add_schedule(p)

    p = sub.add_parser("finetune-dg", help="double-guidance finetuning of a distilled sketch student")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--guides", help="checkpoint with the frozen photo encoder and sketch teacher")
    p.add_argument("--student", help="checkpoint with the distilled sketch student")
    p.add_argument("--lam", type=float)
    _add_schedule(p)

    p = sub.add_parser("eval", help="recall@k of a checkpoint on the held-out split")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    p.add_argument("--run-id")

    p = sub.add_parser("rmac-audit", help="rank the closest descriptor pairs of a dump")
    _add_common(p)
    p.add_argument("--features")
    p.add_argument("--top-k", type=int)
    p.add_argument("--out")

    p = sub.add_parser("export", help="re-serialize a run's metrics as csv or json")
    _add_common(p)
    p.add_argument("--run")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--out")
    return parser


# -- config assembly ------------------------------------------------------------------
def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def _put(cfg: dict, dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    node = cfg
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {key!r} must be an object")
    node[leaf] = value


def _add_schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="stage boundary moves to epochs//2 if it would exceed this")
    p.add_argument("--batch-size", type=int)


def _schedule(cfg: dict, args: argparse.Namespace) -> None:
    _put(cfg, "schedule.seed", args.seed)
    _put(cfg, "schedule.batch_size", args.batch_size)
    epochs = args.epochs
    if epochs is None:
        return
    sched = cfg.setdefault("schedule", {})
    sched["epochs_total"] = epochs
    boundary = sched.get("stage_boundary_epoch", TrainSchedule().stage_boundary_epoch)
    if epochs > 0 and boundary > epochs:
        sched["stage_boundary_epoch"] = max(1, epochs // 2)


def _need_dir(path: str, what: str) -> None:
    if not Path(path).is_dir():
        raise ConfigError(f"{what} directory not found: {path}")


def _need_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def _assemble(args: argparse.Namespace) -> BaseModel:
    raw = _read_json(args.config)
    cmd = args.command
    if cmd == "gen-data":
        if args.spec is not None:
            raw["spec"] = {**raw.get("spec", {}), **_read_json(args.spec)}
        _put(raw, "out", args.out)
        _put(raw, "spec.seed", args.seed)
        _put(raw, "spec.ambiguity_rate", args.ambiguity_rate)
        if args.no_descriptors:
            raw["descriptors"] = False
        return GenDataConfig(**raw)
    if cmd == "train-rtl":
        for key in ("data", "out", "loss"):
            _put(raw, key, getattr(args, key))
        _put(raw, "rtl.margin", args.margin)
        _put(raw, "photo_encoder.head", args.head)
        _put(raw, "sketch_encoder.head", args.head)
        _put(raw, "photo_encoder.capacity", args.photo_capacity)
        _put(raw, "sketch_encoder.capacity", args.sketch_capacity)
        _schedule(raw, args)
        cfg = TrainRtlConfig(**raw)
        _need_dir(cfg.data, "dataset")
        return cfg
    if cmd == "distill":
        for key in ("data", "out", "teacher"):
            _put(raw, key, getattr(args, key))
        _put(raw, "distill.variant", args.variant)
        _put(raw, "student.capacity", args.student_capacity)
        _schedule(raw, args)
        cfg = DistillRunConfig(**raw)
        _need_dir(cfg.data, "dataset")
        _need_file(cfg.teacher, "teacher checkpoint")
        return cfg
    if cmd == "finetune-dg":
        for key in ("data", "out", "guides", "student", "lam"):
            _put(raw, key, getattr(args, key))
        _schedule(raw, args)
        cfg = FinetuneDgConfig(**raw)
        _need_dir(cfg.data, "dataset")
        _need_file(cfg.guides, "guide checkpoint")
        _need_file(cfg.student, "student checkpoint")
        return cfg
    if cmd == "eval":
        for key in ("data", "checkpoint", "k", "out", "run_id", "seed"):
            _put(raw, key, getattr(args, key))
        cfg = EvalConfig(**raw)
        _need_dir(cfg.data, "dataset")
        _need_file(cfg.checkpoint, "checkpoint")
        return cfg
    if cmd == "rmac-audit":
        _put(raw, "features", args.features)
        _put(raw, "top_k", args.top_k)
        _put(raw, "out", args.out)
        cfg = RmacAuditConfig(**raw)
        _need_file(cfg.features, "descriptor dump")
        return cfg
    if cmd == "export":
        _put(raw, "run", args.run)
        _put(raw, "format", args.format)
        _put(raw, "out", args.out)
        cfg = ExportConfig(**raw)
        _need_file(str(Path(cfg.run) / "metrics.csv"), "metrics file")
        return cfg
    raise ConfigError(f"unknown command {cmd!r}")


def _echo(cfg: BaseModel, directory: Path, name: str = "effective_config.json") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")


def _echo_beside(cfg: BaseModel, out: str) -> None:
    p = Path(out)
    _echo(cfg, p.parent, f"{p.stem}.config.json")


def _seeds(seed: int) -> tuple[int, int]:
    """Initialization seeds for the photo and sketch encoders of a run."""
    return 2 * seed + 1, 2 * seed + 2


# -- subcommands ----------------------------------------------------------------------
def cmd_gen_data(cfg: GenDataConfig) -> None:
    out = Path(cfg.out)
    ds = generate_dataset(cfg.spec)
    save_dataset(ds, out)
    if cfg.descriptors:
        desc = np.stack(
            [
                multires_rmac(photo_feature_maps(photo, cfg.rmac.resolutions, cfg.spec.seed, i), cfg.rmac)
                for i, photo in enumerate(ds.photos)
            ]
        )
        save_descriptors(out / "descriptors.bin", desc)
    _echo(cfg, out)
    log.info("wrote %d photos and %d sketches to %s", ds.n_photos, len(ds.sketches), out)


def cmd_train_rtl(cfg: TrainRtlConfig) -> None:
    ds = load_dataset(cfg.data)
    ps, ss = _seeds(cfg.schedule.seed)
    photo = build_encoder(cfg.photo_encoder.build(ds.photos.shape[1]), ps)
    sketch = build_encoder(cfg.sketch_encoder.build(ds.sketches.shape[1]), ss)
    _echo(cfg, Path(cfg.out))
    art = train_rtl(ds, photo, sketch, cfg.rtl, cfg.schedule, cfg.loss, run_dir=cfg.out)
    log.info("final recall@1 %.4f (best %.4f at epoch %d)", art.final_recall, art.best_recall, art.best_epoch)


def cmd_distill(cfg: DistillRunConfig) -> None:
    ds = load_dataset(cfg.data)
    encoders, _ = load_checkpoint(cfg.teacher)
    if cfg.domain not in encoders:
        raise ValueError(f"{cfg.teacher}: no {cfg.domain!r} encoder to distill from")
    teacher = encoders[cfg.domain].freeze()
    other = "photo" if cfg.domain == "sketch" else "sketch"
    counterpart = encoders[other].freeze() if other in encoders else None
    inputs = ds.sketches if cfg.domain == "sketch" else ds.photos
    seed = _seeds(cfg.schedule.seed)[1 if cfg.domain == "sketch" else 0]
    student = build_encoder(cfg.student.build(inputs.shape[1]), seed)
    _echo(cfg, Path(cfg.out))
    distill(ds, teacher, student, cfg.distill, cfg.schedule, cfg.domain, counterpart, run_dir=cfg.out)


def cmd_finetune_dg(cfg: FinetuneDgConfig) -> None:
    ds = load_dataset(cfg.data)
    guides, _ = load_checkpoint(cfg.guides)
    students, _ = load_checkpoint(cfg.student)
    for name, found in (("photo", guides), ("sketch", guides)):
        if name not in found:
            raise ValueError(f"{cfg.guides}: missing {name!r} encoder")
    if "sketch" not in students:
        raise ValueError(f"{cfg.student}: missing 'sketch' encoder")
    photo, teacher = guides["photo"].freeze(), guides["sketch"].freeze()
    _echo(cfg, Path(cfg.out))
    finetune_double_guidance(
        ds, photo, teacher, students["sketch"], cfg.rtl, cfg.lam, cfg.schedule, cfg.huber_delta, run_dir=cfg.out
    )


def cmd_eval(cfg: EvalConfig) -> None:
    record = evaluate_checkpoint(cfg.checkpoint, load_dataset(cfg.data), cfg.k, cfg.run_id, cfg.seed)
    if cfg.out is None:
        sys.stdout.write(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return
    _echo_beside(cfg, cfg.out)
    write_metrics_json(cfg.out, record)


def cmd_rmac_audit(cfg: RmacAuditConfig) -> None:
    desc = load_descriptors(cfg.features)
    pairs = find_ambiguous_pairs(desc, min(cfg.top_k, len(desc) * (len(desc) - 1) // 2))
    _echo_beside(cfg, cfg.out)
    write_pair_report(cfg.out, pairs)


def read_metrics(run_dir: str | Path) -> tuple[list[str], list[dict]]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise ValueError(f"{run_dir}: metrics.csv is empty") from None
        rows = [dict(zip(columns, r)) for r in reader]
    return columns, rows


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def export_metrics(run_dir: str | Path, fmt: str, out: str | Path | None = None) -> Path:
    """Write metrics as csv (9 significant digits) or json with the same values."""
    columns, rows = read_metrics(run_dir)
    parsed = [{c: _parse_cell(r.get(c, "")) for c in columns} for r in rows]
    out = Path(out) if out is not None else Path(run_dir) / f"metrics_export.{fmt}"
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        out.write_text(metrics_csv_text(columns, parsed))
    else:
        norm = [{c: (None if v is None else _parse_cell(format_float(v))) for c, v in row.items()} for row in parsed]
        out.write_text(json.dumps({"columns": columns, "rows": norm}, indent=2) + "\n")
    return out


def cmd_export(cfg: ExportConfig) -> None:
    out = export_metrics(cfg.run, cfg.format, cfg.out)
    _echo_beside(cfg, str(out))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rtl": cmd_train_rtl,
    "distill": cmd_distill,
    "finetune-dg": cmd_finetune_dg,
    "eval": cmd_eval,
    "rmac-audit": cmd_rmac_audit,
    "export": cmd_export,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _assemble(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
