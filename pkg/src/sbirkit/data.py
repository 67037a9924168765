"""Deterministic synthetic photo/sketch benchmark and synthetic feature volumes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .rmac import FeatureVolume

DATASET_FORMAT = "sbirkit-dataset"
DATASET_VERSION = 1
_ARRAYS = ("photos", "sketches", "sketch_photo", "photo_category", "train_mask", "ambiguous_pairs")


class DomainGap(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    projection_seed: int = 7
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    noise_sigma: float = Field(0.5, ge=0.0)


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_categories: int = Field(25, ge=1)
    photos_per_category: int = Field(20, ge=2)
    sketches_per_photo: int = Field(5, ge=1)
    photo_dim: int = Field(64, ge=1)
    sketch_dim: int = Field(48, ge=1)
    category_spread: float = Field(1.0, gt=0.0)
    instance_sigma: float = Field(0.2, ge=0.0)
    domain_gap: DomainGap = Field(default_factory=DomainGap)
    ambiguity_rate: float = Field(0.1, ge=0.0, lt=1.0)
    sigma_dup: float = Field(0.01, ge=0.0)
    split_fraction: float = Field(0.9, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        n_train = round(self.split_fraction * self.photos_per_category)
        if not 1 <= n_train < self.photos_per_category:
            raise ValueError("split_fraction leaves a category without train or test photos")
        return self


@dataclass
class CrossDomainDataset:
    spec: SynthSpec
    photos: np.ndarray
    sketches: np.ndarray
    sketch_photo: np.ndarray
    photo_category: np.ndarray
    train_mask: np.ndarray
    ambiguous_pairs: np.ndarray
    _sketches_of: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        order = np.argsort(self.sketch_photo, kind="stable")
        bounds = np.searchsorted(self.sketch_photo[order], np.arange(len(self.photos) + 1))
        self._sketches_of = [order[bounds[i] : bounds[i + 1]] for i in range(len(self.photos))]

    @property
    def test_mask(self) -> np.ndarray:
        return ~self.train_mask

    @property
    def n_photos(self) -> int:
        return len(self.photos)

    def photo_indices(self, split: str) -> np.ndarray:
        mask = self.train_mask if split == "train" else self.test_mask
        return np.flatnonzero(mask)

    def sketch_indices(self, split: str) -> np.ndarray:
        mask = self.train_mask[self.sketch_photo]
        return np.flatnonzero(mask if split == "train" else ~mask)

    def sketches_of(self, photo: int) -> np.ndarray:
        return self._sketches_of[photo]


def inject_ambiguity(
    photos: np.ndarray, rate: float, sigma_dup: float, seed: int
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Append ``round(rate * n)`` perturbed copies of randomly chosen photos.

    Returns the augmented array and ``(source, duplicate)`` index pairs.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("ambiguity rate must lie in [0, 1)")
    n = len(photos)
    k = int(round(rate * n))
    if k == 0:
        return photos.copy(), []
    rng = np.random.default_rng(seed)
    sources = np.sort(rng.choice(n, size=k, replace=False))
    dups = photos[sources] + rng.normal(0.0, 1.0, (k, photos.shape[1])) * sigma_dup
    pairs = [(int(s), n + t) for t, s in enumerate(sources)]
    return np.concatenate([photos, dups], axis=0), pairs


def projection_matrix(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.domain_gap.projection_seed)
    return rng.normal(0.0, 1.0, (spec.sketch_dim, spec.photo_dim)) / np.sqrt(spec.photo_dim)


def make_sketches(photos: np.ndarray, count: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """``count`` sketches per photo: projection, coordinate dropout, gaussian noise."""
    gap = spec.domain_gap
    proj = projection_matrix(spec)
    base = np.repeat(photos @ proj.T, count, axis=0)
    keep = rng.random(base.shape) >= gap.dropout
    noise = rng.normal(0.0, 1.0, base.shape) * gap.noise_sigma
    return base * keep + noise


def generate_dataset(spec: SynthSpec) -> CrossDomainDataset:
    """Photos around per-category centres, a category-stratified split,
    near-duplicates injected into the training split, then sketches projected
    from every photo."""
    rng = np.random.default_rng(spec.seed)
    n_cat, per = spec.n_categories, spec.photos_per_category
    centers = rng.normal(0.0, spec.category_spread, (n_cat, spec.photo_dim))
    category = np.repeat(np.arange(n_cat), per)
    photos = centers[category] + rng.normal(0.0, spec.instance_sigma, (n_cat * per, spec.photo_dim))

    n_train = round(spec.split_fraction * per)
    train_mask = np.zeros(n_cat * per, dtype=bool)
    for c in range(n_cat):
        members = np.flatnonzero(category == c)
        train_mask[rng.permutation(members)[:n_train]] = True

    train_idx = np.flatnonzero(train_mask)
    dup_seed = int(rng.integers(2**31))
    augmented, local_pairs = inject_ambiguity(photos[train_idx], spec.ambiguity_rate, spec.sigma_dup, dup_seed)
    n_base = len(photos)
    pairs = np.array(
        [(train_idx[s], n_base + (d - len(train_idx))) for s, d in local_pairs], dtype=np.int64
    ).reshape(-1, 2)
    photos = np.concatenate([photos, augmented[len(train_idx) :]], axis=0)
    category = np.concatenate([category, category[pairs[:, 0]]])
    train_mask = np.concatenate([train_mask, np.ones(len(pairs), dtype=bool)])

    s = spec.sketches_per_photo
    sketches = make_sketches(photos, s, spec, rng)
    sketch_photo = np.repeat(np.arange(len(photos)), s)
    return CrossDomainDataset(
        spec=spec,
        photos=photos,
        sketches=sketches,
        sketch_photo=sketch_photo,
        photo_category=category,
        train_mask=train_mask,
        ambiguous_pairs=pairs,
    )


def save_dataset(ds: CrossDomainDataset, directory: str | Path) -> None:
    """``header.json`` (format, version, spec echo) plus one ``.npy`` per array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "spec": ds.spec.model_dump()}
    (directory / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    for name in _ARRAYS:
        np.save(directory / f"{name}.npy", getattr(ds, name), allow_pickle=False)


def load_dataset(directory: str | Path) -> CrossDomainDataset:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.is_file():
        raise FileNotFoundError(f"{header_path} not found")
    header = json.loads(header_path.read_text())
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ValueError(f"{directory}: unsupported dataset format")
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in _ARRAYS}
    return CrossDomainDataset(spec=SynthSpec(**header["spec"]), **arrays)


# -- feature volumes for the RMAC audit ----------------------------------------
def synth_feature_maps(channels: int, sizes: list[int], seed: int) -> list[FeatureVolume]:
    """Half-normal (post-ReLU looking) random volumes, one per square size."""
    if any(s < 1 for s in sizes):
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    return [
        FeatureVolume(np.abs(rng.normal(0.0, 1.0, (channels, s, s))), source_id=seed, resolution_tag=str(s))
        for s in sizes
    ]


def photo_feature_maps(
    photo: np.ndarray, sizes: list[int], texture_seed: int = 0, source_id=None
) -> list[FeatureVolume]:
    """Volumes whose channel c is ``relu(photo[c] * (1 + texture))`` over a fixed
    random texture, so near-identical photos give near-identical volumes."""
    out = []
    for s in sizes:
        tex = np.random.default_rng([texture_seed, s]).normal(0.0, 0.5, (len(photo), s, s))
        data = np.maximum(photo[:, None, None] * (1.0 + tex), 0.0)
        out.append(FeatureVolume(data, source_id=source_id, resolution_tag=str(s)))
    return out
