"""Synthetic annotator populations with planted truth, and label-flip noise.

Annotators are grouped into factions. Faction ``f`` labels with the teacher
hyperplane rotated by ``f * faction_boundary_angle`` (systematic
disagreement), then every annotator flips each of its labels independently
with ``per_annotator_flip_rate`` (random variation).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .annotations import MISSING, AnnotationMatrix, Dataset

NOISE_MODES = ("sample", "annotation")
DEFAULT_NOISE_RATE = 0.20


@dataclass(frozen=True)
class SynthConfig:
    num_samples: int = 1000
    num_annotators: int = 8
    feature_dim: int = 4
    num_factions: int = 1
    faction_boundary_angle: float = 0.0
    per_annotator_flip_rate: float = 0.0
    annotations_per_sample: int = 4
    seed: int = 0

    def validate(self):
        for name in ("num_samples", "num_annotators", "feature_dim", "num_factions",
                     "annotations_per_sample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_factions > self.num_annotators:
            raise ValueError("num_factions must not exceed num_annotators")
        if self.annotations_per_sample > self.num_annotators:
            raise ValueError("annotations_per_sample must not exceed num_annotators")
        if not 0.0 <= self.per_annotator_flip_rate < 0.5:
            raise ValueError("per_annotator_flip_rate must be in [0, 0.5)")
        if not np.isfinite(self.faction_boundary_angle):
            raise ValueError("faction_boundary_angle must be finite")
        if self.feature_dim < 2 and self.num_factions > 1 and self.faction_boundary_angle != 0.0:
            raise ValueError("rotated faction boundaries need feature_dim >= 2")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PlantedGeometry:
    teacher: np.ndarray
    faction_normals: np.ndarray
    annotator_faction: np.ndarray


@dataclass(frozen=True)
class NoiseRecord:
    flipped: tuple
    rate: float
    seed: int
    mode: str = "sample"

    @property
    def flipped_samples(self):
        return sorted({i for i, _ in self.flipped})

    def flipped_mask(self, num_samples, num_annotators):
        out = np.zeros((num_samples, num_annotators), dtype=bool)
        for i, a in self.flipped:
            out[i, a] = True
        return out

    def to_json(self) -> str:
        return json.dumps({"rate": self.rate, "seed": self.seed, "mode": self.mode,
                           "flipped": [list(p) for p in self.flipped]})

    @classmethod
    def from_json(cls, text: str) -> "NoiseRecord":
        d = json.loads(text)
        return cls(tuple((int(i), int(a)) for i, a in d["flipped"]), float(d["rate"]),
                   int(d["seed"]), d.get("mode", "sample"))


def planted_geometry(config: SynthConfig) -> PlantedGeometry:
    """Teacher normal and per-faction normals drawn from ``config.seed``."""
    rng = np.random.default_rng([config.seed, 1])
    d = config.feature_dim
    teacher = rng.standard_normal(d)
    teacher /= np.linalg.norm(teacher)
    if d > 1:
        ortho = rng.standard_normal(d)
        ortho -= ortho.dot(teacher) * teacher
        ortho /= np.linalg.norm(ortho)
    else:
        ortho = np.zeros(d)
    angles = config.faction_boundary_angle * np.arange(config.num_factions)
    normals = np.cos(angles)[:, None] * teacher + np.sin(angles)[:, None] * ortho
    factions = np.arange(config.num_annotators) % config.num_factions
    return PlantedGeometry(teacher, normals, factions)


def generate_synthetic(config: SynthConfig) -> Dataset:
    config.validate()
    geo = planted_geometry(config)
    n, A = config.num_samples, config.num_annotators
    rng = np.random.default_rng([config.seed, 2])
    X = rng.standard_normal((n, config.feature_dim))
    truth = (X @ geo.teacher > 0).astype(np.int64)
    faction_labels = (X @ geo.faction_normals.T > 0).astype(np.int64)

    labels = np.full((n, A), MISSING, dtype=np.int64)
    k = config.annotations_per_sample
    for i in range(n):
        chosen = np.sort(rng.choice(A, size=k, replace=False))
        labels[i, chosen] = faction_labels[i, geo.annotator_faction[chosen]]
    flips = (rng.random((n, A)) < config.per_annotator_flip_rate) & (labels != MISSING)
    labels[flips] = 1 - labels[flips]

    width = len(str(n - 1))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    annotator_ids = [f"a{a:02d}" for a in range(A)]
    ds = Dataset(X, AnnotationMatrix(labels, 2), ids, truth, annotator_ids)
    return ds


def inject_noise(dataset: Dataset, rate: float = DEFAULT_NOISE_RATE, seed: int = 0,
                 mode: str = "sample"):
    """Flip binary labels; returns ``(noisy_dataset, NoiseRecord)``.

    ``mode="sample"`` picks ``round(rate * N)`` samples and flips every present
    annotation on each. ``mode="annotation"`` picks ``round(rate * cells)``
    individual annotated cells instead. Missing cells are never touched.
    """
    if dataset.num_classes != 2:
        raise ValueError("label flip noise is defined for binary labels only")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    if mode not in NOISE_MODES:
        raise ValueError(f"noise mode must be one of {NOISE_MODES}")
    labels = dataset.annotations.labels.copy()
    present = labels != MISSING
    rng = np.random.default_rng([seed, 3])
    flip = np.zeros_like(present)
    if mode == "sample":
        n = dataset.num_samples
        picked = rng.choice(n, size=int(round(rate * n)), replace=False)
        flip[picked] = present[picked]
    else:
        cells = np.argwhere(present)
        picked = rng.choice(len(cells), size=int(round(rate * len(cells))), replace=False)
        flip[cells[picked, 0], cells[picked, 1]] = True
    labels[flip] = 1 - labels[flip]
    flipped = tuple((int(i), int(a)) for i, a in np.argwhere(flip))
    record = NoiseRecord(flipped, float(rate), int(seed), mode)
    return dataset.with_annotations(AnnotationMatrix(labels, 2)), record


def train_test_split(dataset: Dataset, test_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 4])
    order = rng.permutation(dataset.num_samples)
    n_test = int(round(test_fraction * dataset.num_samples))
    test, train = np.sort(order[:n_test]), np.sort(order[n_test:])
    return dataset.subset(train), dataset.subset(test)
