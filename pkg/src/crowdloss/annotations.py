"""Multi-annotator datasets with explicit missingness, majority votes and I/O.

Annotations are stored densely as an ``(N, A)`` integer array where
``MISSING`` (-1) marks a cell nobody annotated. A missing cell is never
class 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = -1


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed into a valid Dataset."""


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AnnotationMatrix:
    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D (samples x annotators) array")
        object.__setattr__(self, "labels", labels)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @classmethod
    def from_entries(cls, entries: Mapping, num_samples: int, num_annotators: int,
                     num_classes: int = 2) -> "AnnotationMatrix":
        labels = np.full((num_samples, num_annotators), MISSING, dtype=np.int64)
        for (i, a), c in entries.items():
            labels[i, a] = c
        return cls(labels, num_classes)

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def num_annotators(self) -> int:
        return self.labels.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.labels != MISSING

    @property
    def entries(self) -> dict:
        idx = np.argwhere(self.mask)
        return {(int(i), int(a)): int(self.labels[i, a]) for i, a in idx}

    def row(self, i: int) -> list:
        """Present labels of sample ``i`` in annotator order."""
        r = self.labels[i]
        return [int(c) for c in r[r != MISSING]]

    def majorities(self):
        """Majority label, vote fraction and tie flag for every sample."""
        out = [compute_majority(self.row(i), self.num_classes) for i in range(self.num_samples)]
        labels = np.array([o[0] for o in out], dtype=np.int64)
        fracs = np.array([o[1] for o in out], dtype=float)
        ties = np.array([o[2] for o in out], dtype=bool)
        return labels, fracs, ties

    def __eq__(self, other):
        if not isinstance(other, AnnotationMatrix):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.labels.shape == other.labels.shape
                and bool(np.array_equal(self.labels, other.labels)))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    annotations: AnnotationMatrix
    sample_ids: tuple
    ground_truth: np.ndarray | None = None
    annotator_ids: tuple = field(default=())

    def __post_init__(self):
        feats = _frozen(self.features, np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D array")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", _frozen(self.ground_truth, np.int64))
        if not self.annotator_ids:
            ids = tuple(f"a{k}" for k in range(self.annotations.num_annotators))
            object.__setattr__(self, "annotator_ids", ids)
        else:
            object.__setattr__(self, "annotator_ids", tuple(str(s) for s in self.annotator_ids))

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_annotators(self) -> int:
        return self.annotations.num_annotators

    @property
    def num_classes(self) -> int:
        return self.annotations.num_classes

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        gt = None if self.ground_truth is None else self.ground_truth[index]
        return Dataset(self.features[index],
                       AnnotationMatrix(self.annotations.labels[index], self.num_classes),
                       [self.sample_ids[i] for i in index], gt, self.annotator_ids)

    def with_annotations(self, annotations: AnnotationMatrix) -> "Dataset":
        return Dataset(self.features, annotations, self.sample_ids, self.ground_truth,
                       self.annotator_ids)

    def canonical(self) -> "Dataset":
        """Reorder annotators by first appearance and drop unused ones.

        Within a sample, annotators are visited in id order, matching the key
        order ``dumps_dataset`` writes. This is the form ``load_dataset`` produces, so ``load(save(d.canonical()))``
        reproduces ``d.canonical()`` exactly.
        """
        order = []
        seen = set()
        labels = self.annotations.labels
        for i in range(self.num_samples):
            present = np.flatnonzero(labels[i] != MISSING)
            for a in sorted(present, key=lambda k: self.annotator_ids[k]):
                if a not in seen:
                    seen.add(a)
                    order.append(int(a))
        ann = AnnotationMatrix(labels[:, order], self.num_classes)
        return Dataset(self.features, ann, self.sample_ids, self.ground_truth,
                       tuple(self.annotator_ids[a] for a in order))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.ground_truth is None) != (other.ground_truth is None):
            return False
        if self.ground_truth is not None and not np.array_equal(self.ground_truth, other.ground_truth):
            return False
        return (self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features))
                and self.annotations == other.annotations
                and self.sample_ids == other.sample_ids
                and self.annotator_ids == other.annotator_ids)

    __hash__ = None


def compute_majority(row: Sequence[int], num_classes: int | None = None):
    """Modal class of one sample's present labels.

    Returns ``(label, vote_fraction, tie)``; ties go to the lowest class index.
    ``MISSING`` entries in ``row`` are skipped.
    """
    present = [int(c) for c in row if c != MISSING]
    if not present:
        raise ValueError("no annotations")
    size = max(present) + 1 if num_classes is None else max(num_classes, max(present) + 1)
    counts = np.bincount(present, minlength=size)
    top = counts.max()
    winners = np.flatnonzero(counts == top)
    return int(winners[0]), float(top) / len(present), bool(len(winners) > 1)


def annotation_variance(row: Sequence[int], num_classes: int = 2) -> float:
    """count(1) * count(0) / total**2 over the present binary labels of a sample."""
    if num_classes != 2:
        raise ValueError("variance formula defined for binary labels")
    present = [int(c) for c in row if c != MISSING]
    if not present:
        raise ValueError("no annotations")
    ones = sum(1 for c in present if c == 1)
    zeros = len(present) - ones
    return ones * zeros / len(present) ** 2


def validate(dataset: Dataset) -> list[str]:
    """All invariant violations found in ``dataset``; an empty list means valid."""
    problems = []
    ann = dataset.annotations
    labels = ann.labels
    n = dataset.features.shape[0]
    if n == 0:
        problems.append("dataset has no samples")
    if ann.num_annotators == 0:
        problems.append("dataset has no annotators")
    if labels.shape[0] != n:
        problems.append(f"feature rows ({n}) != annotation samples ({labels.shape[0]})")
    if len(dataset.sample_ids) != labels.shape[0]:
        problems.append(f"{len(dataset.sample_ids)} sample ids for {labels.shape[0]} samples")
    if len(dataset.annotator_ids) != ann.num_annotators:
        problems.append(f"{len(dataset.annotator_ids)} annotator ids for {ann.num_annotators} annotators")
    bad = (labels != MISSING) & ((labels < 0) | (labels >= ann.num_classes))
    for i, a in np.argwhere(bad):
        problems.append(f"sample {_sid(dataset, i)} annotator {a}: class {labels[i, a]} "
                        f"outside [0, {ann.num_classes})")
    for i in np.flatnonzero((labels == MISSING).all(axis=1)):
        problems.append(f"sample {_sid(dataset, i)} has no annotations")
    finite = np.isfinite(dataset.features)
    for r in np.flatnonzero(~finite.all(axis=1)):
        problems.append(f"row {r} (sample {_sid(dataset, r)}) has non-finite features")
    gt = dataset.ground_truth
    if gt is not None:
        if gt.shape != (labels.shape[0],):
            problems.append("ground_truth length does not match sample count")
        elif ((gt < 0) | (gt >= ann.num_classes)).any():
            problems.append("ground_truth has class indices outside range")
    return problems


def _sid(dataset, i):
    return dataset.sample_ids[i] if i < len(dataset.sample_ids) else f"#{i}"


def _line_record(dataset: Dataset, i: int) -> dict:
    rec = {
        "id": dataset.sample_ids[i],
        "features": [float(v) for v in dataset.features[i]],
        "annotations": dict(sorted((dataset.annotator_ids[a], int(c))
                                   for a, c in enumerate(dataset.annotations.labels[i]) if c != MISSING)),
    }
    if dataset.ground_truth is not None:
        rec["truth"] = int(dataset.ground_truth[i])
    return rec


def dumps_dataset(dataset: Dataset) -> str:
    return "".join(json.dumps(_line_record(dataset, i)) + "\n" for i in range(dataset.num_samples))


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(dataset))


class _DuplicateKey(ValueError):
    pass


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise _DuplicateKey(key)
        out[key] = value
    return out


def parse_dataset_lines(lines: Iterable[str], num_classes: int | None = None) -> Dataset:
    ids, feats, truths, rows = [], [], [], []
    annotator_index: dict[str, int] = {}
    dim = None
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw, object_pairs_hook=_reject_duplicates)
        except _DuplicateKey as exc:
            raise DatasetFormatError(f"line {lineno}: duplicate key {exc.args[0]!r}") from None
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "features" not in rec or "annotations" not in rec:
            raise DatasetFormatError(f"line {lineno}: expected an object with 'features' and 'annotations'")
        x = rec["features"]
        if not isinstance(x, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x):
            raise DatasetFormatError(f"line {lineno}: 'features' must be a list of numbers")
        if dim is None:
            dim = len(x)
        elif len(x) != dim:
            raise DatasetFormatError(f"line {lineno}: feature dimension {len(x)} != {dim}")
        ann = rec["annotations"]
        if not isinstance(ann, dict):
            raise DatasetFormatError(f"line {lineno}: 'annotations' must be an object")
        row = {}
        for key, c in ann.items():
            if not isinstance(c, int) or isinstance(c, bool) or c < 0 or (num_classes is not None and c >= num_classes):
                raise DatasetFormatError(f"line {lineno}: unknown class label {c!r} for annotator {key!r}")
            a = annotator_index.setdefault(key, len(annotator_index))
            if a in row:
                raise DatasetFormatError(f"line {lineno}: duplicate annotation for annotator {key!r}")
            row[a] = c
        truth = rec.get("truth")
        if truth is not None and (not isinstance(truth, int) or isinstance(truth, bool) or truth < 0):
            raise DatasetFormatError(f"line {lineno}: unknown truth label {truth!r}")
        ids.append(str(rec.get("id", len(ids))))
        feats.append([float(v) for v in x])
        rows.append(row)
        truths.append(truth)
    if not rows:
        raise DatasetFormatError("empty dataset file")
    if len(set(ids)) != len(ids):
        raise DatasetFormatError("duplicate sample ids")
    has_truth = [t is not None for t in truths]
    if any(has_truth) and not all(has_truth):
        raise DatasetFormatError("'truth' must be present on all lines or none")

    max_label = max((c for row in rows for c in row.values()), default=0)
    if any(has_truth):
        max_label = max(max_label, max(truths))
    if num_classes is None:
        num_classes = max(2, max_label + 1)
    labels = np.full((len(rows), len(annotator_index)), MISSING, dtype=np.int64)
    for i, row in enumerate(rows):
        for a, c in row.items():
            labels[i, a] = c
    gt = np.array(truths, dtype=np.int64) if all(has_truth) else None
    ds = Dataset(np.array(feats, dtype=float).reshape(len(rows), dim),
                 AnnotationMatrix(labels, num_classes), ids, gt, tuple(annotator_index))
    problems = validate(ds)
    if problems:
        raise DatasetFormatError("; ".join(problems))
    return ds


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read a JSONL dataset. Annotator ids get dense indices in first-appearance order.

    ``num_classes`` defaults to ``max(2, largest label + 1)``.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_dataset_lines(fh, num_classes)


def majority_dataset(dataset: Dataset) -> Dataset:
    """Collapse annotations to a single virtual annotator holding the majority label."""
    maj, _, _ = dataset.annotations.majorities()
    ann = AnnotationMatrix(maj[:, None], dataset.num_classes)
    return Dataset(dataset.features, ann, dataset.sample_ids, dataset.ground_truth, ("majority",))
