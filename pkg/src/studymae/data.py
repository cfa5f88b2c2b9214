"""Study-centric data model, manifest ingestion, labels, and splits.

A *study* is the unit of everything downstream: it groups the views
acquired in one patient encounter, an optional free-text report, and an
optional 14-way binary label vector. Every view carries a projection
family tag (frontal / lateral / unknown); studies with at least one valid
view are always retained and repeated families are allowed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, ValidationError

LABEL_NAMES = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
NUM_LABELS = len(LABEL_NAMES)

LABEL_STATES = ("positive", "negative", "uncertain", "not_mentioned")

MANIFEST_COLUMNS = (
    "study_id", "patient_id", "dataset_tag", "family_token", "instance_index",
    "image_path", "label_states", "report_path",
)
ABSENT = "-"

# Resize target before the center crop scales with the requested side so
# the crop keeps the same relative margin at every resolution.
RESIZE_CROP_RATIO = 256 / 224


class ProjectionFamily(IntEnum):
    """The three projection families every view maps into."""

    FRONTAL = 0
    LATERAL = 1
    UNKNOWN = 2

    @classmethod
    def from_token(cls, token: str) -> "ProjectionFamily":
        t = token.strip().lower()
        if t in ("pa", "ap", "frontal", "f"):
            return cls.FRONTAL
        if t in ("ll", "lateral", "l"):
            return cls.LATERAL
        # Low-prevalence or undeclared projections all land in the
        # unknown bucket rather than being dropped.
        return cls.UNKNOWN


@dataclass
class View:
    """One projection: a square intensity grid in [0, 1] plus its family."""

    image: np.ndarray
    family: ProjectionFamily
    instance_index: int


@dataclass
class Study:
    study_id: str
    patient_id: str
    views: list[View]
    report: str | None = None
    labels: np.ndarray | None = None
    dataset_tag: str = ""

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass(frozen=True)
class SplitSpec:
    """Patient-stratified split fractions; remainder patients go to train."""

    train: float = 0.97
    val: float = 0.015
    test: float = 0.015
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions sum to {total!r}, expected 1")
        if min(self.train, self.val, self.test) < 0:
            raise ValidationError("split fractions must be nonnegative")


class LabelSpace:
    """The 14 target categories plus a source-label mapping table."""

    DROP = "drop"

    def __init__(self, mapping: dict[str, str] | None = None):
        self.names = LABEL_NAMES
        self.index = {name: i for i, name in enumerate(LABEL_NAMES)}
        self.mapping: dict[str, str] = {}
        for source, target in (mapping or {}).items():
            if target != self.DROP and target not in self.index:
                raise ValidationError(
                    f"mapping target {target!r} is not one of the {NUM_LABELS} categories")
            self.mapping[source.strip().lower()] = target

    @classmethod
    def from_csv(cls, path: str | Path) -> "LabelSpace":
        """Two-column CSV ``source_label,target_category``; 'drop' discards."""
        mapping = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                if row[0].strip().lower() == "source_label":
                    continue
                if len(row) != 2:
                    raise ValidationError(f"mapping row needs 2 columns, got {row!r}")
                mapping[row[0]] = row[1].strip()
        return cls(mapping)


def binarize_labels(states) -> np.ndarray:
    """Collapse per-category states to bits: positive -> 1, all else -> 0."""
    states = list(states)
    if len(states) != NUM_LABELS:
        raise ValidationError(f"expected {NUM_LABELS} label states, got {len(states)}")
    out = np.zeros(NUM_LABELS, dtype=np.int8)
    for i, state in enumerate(states):
        s = state.strip().lower()
        if s not in LABEL_STATES:
            raise ValidationError(f"unknown label state {state!r}")
        out[i] = 1 if s == "positive" else 0
    return out


def harmonize_labels(source_labels, space: LabelSpace) -> np.ndarray:
    """OR the mapped categories of every source label into a bit vector."""
    out = np.zeros(NUM_LABELS, dtype=np.int8)
    for raw in source_labels:
        key = raw.strip().lower()
        if key not in space.mapping:
            raise ValidationError(f"source label {raw!r} is not in the mapping table")
        target = space.mapping[key]
        if target == LabelSpace.DROP:
            continue
        out[space.index[target]] = 1
    return out


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


# ---------------------------------------------------------------------------
# Image preprocessing
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resampling on half-pixel-centered grids."""
    h, w = img.shape
    img = img.astype(np.float64, copy=False)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top:top + side, left:left + side]


def rescale_unit(img: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float64)
    return (img - lo) / (hi - lo)


def preprocess_image(raw: np.ndarray, side: int = 224) -> np.ndarray:
    """Resize the shorter side, center-crop to ``side``, rescale to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or min(raw.shape) < 2:
        raise ValidationError(f"degenerate image of shape {raw.shape}")
    if side < 16:
        raise ValidationError(f"side must be >= 16, got {side}")
    target_short = int(round(side * RESIZE_CROP_RATIO))
    scale = target_short / min(raw.shape)
    out_h = max(int(round(raw.shape[0] * scale)), side)
    out_w = max(int(round(raw.shape[1] * scale)), side)
    resized = bilinear_resize(raw, out_h, out_w)
    return rescale_unit(center_crop(resized, side))


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale raster (PNG and similar via Pillow) or a .npy dump."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:  # collapse accidental channel axes
        arr = arr.mean(axis=2)
    return arr


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

@dataclass
class _StudyAccumulator:
    patient_id: str
    dataset_tag: str
    label_field: str
    report_path: str
    views: list[View] = field(default_factory=list)
    keys: set = field(default_factory=set)


def load_manifest(path: str | Path, image_side: int = 224,
                  label_space: LabelSpace | None = None) -> list[Study]:
    """Parse a tab-separated view manifest into grouped, preprocessed studies.

    One row per view; study-level fields repeat on every row and must agree.
    ``label_states`` holds 14 semicolon-joined per-category states, or — when
    ``label_space`` is given — a semicolon-joined list of source labels to
    harmonize. ``"-"`` marks an absent report or label field.
    """
    path = Path(path)
    base = path.parent
    order: list[str] = []
    acc: dict[str, _StudyAccumulator] = {}

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != list(MANIFEST_COLUMNS):
            raise ManifestError(
                f"{path}: line 1: header must be {chr(9).join(MANIFEST_COLUMNS)!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"{path}: line {lineno}: expected {len(MANIFEST_COLUMNS)} "
                    f"columns, got {len(parts)}")
            (study_id, patient_id, dataset_tag, family_token, instance_index,
             image_path, label_field, report_path) = parts
            try:
                instance = int(instance_index)
            except ValueError:
                raise ManifestError(
                    f"{path}: line {lineno}: instance_index {instance_index!r} "
                    "is not an integer")
            family = ProjectionFamily.from_token(family_token)

            img_file = base / image_path
            if not img_file.exists():
                raise OSError(f"{path}: line {lineno}: image file not found: {img_file}")
            raw = load_image(img_file)
            if raw.shape == (image_side, image_side):
                # Already at the target side (e.g. cached output): only rescale.
                image = rescale_unit(np.asarray(raw, dtype=np.float64))
            else:
                image = preprocess_image(raw, side=image_side)

            if study_id not in acc:
                acc[study_id] = _StudyAccumulator(patient_id, dataset_tag,
                                                  label_field, report_path)
                order.append(study_id)
            entry = acc[study_id]
            if (entry.patient_id, entry.dataset_tag, entry.label_field,
                    entry.report_path) != (patient_id, dataset_tag, label_field,
                                           report_path):
                raise ManifestError(
                    f"{path}: line {lineno}: study-level fields differ across "
                    f"rows of study {study_id!r}")
            key = (instance, family)
            if key in entry.keys:
                raise ValidationError(
                    f"{path}: line {lineno}: duplicate view (study {study_id!r}, "
                    f"instance {instance}, family {family.name.lower()})")
            entry.keys.add(key)
            entry.views.append(View(image=image, family=family,
                                    instance_index=instance))

    studies = []
    for study_id in order:
        entry = acc[study_id]
        labels = None
        if entry.label_field != ABSENT:
            tokens = [t for t in entry.label_field.split(";") if t != ""]
            if label_space is not None:
                labels = harmonize_labels(tokens, label_space)
            else:
                labels = binarize_labels(tokens)
        report = None
        if entry.report_path != ABSENT:
            report_file = base / entry.report_path
            if not report_file.exists():
                raise OSError(f"report file not found: {report_file}")
            report = normalize_text(report_file.read_text(encoding="utf-8"))
        studies.append(Study(study_id=study_id, patient_id=entry.patient_id,
                             views=entry.views, report=report, labels=labels,
                             dataset_tag=entry.dataset_tag))
    return studies


# ---------------------------------------------------------------------------
# Patient-stratified splitting
# ---------------------------------------------------------------------------

def split_studies(studies, spec: SplitSpec):
    """Partition studies into patient-disjoint (train, val, test)."""
    patients: list[str] = []
    seen = set()
    for study in studies:
        if study.patient_id not in seen:
            seen.add(study.patient_id)
            patients.append(study.patient_id)

    nonzero = sum(1 for f in (spec.train, spec.val, spec.test) if f > 0)
    if len(patients) < nonzero:
        raise ValidationError(
            f"{len(patients)} distinct patients cannot fill {nonzero} splits")

    rng = np.random.default_rng(spec.seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    n = len(shuffled)
    n_val = int(np.floor(spec.val * n))
    n_test = int(np.floor(spec.test * n))
    n_train = n - n_val - n_test  # remainder patients stay in train
    train_set = set(shuffled[:n_train])
    val_set = set(shuffled[n_train:n_train + n_val])
    test_set = set(shuffled[n_train + n_val:])

    train = [s for s in studies if s.patient_id in train_set]
    val = [s for s in studies if s.patient_id in val_set]
    test = [s for s in studies if s.patient_id in test_set]
    return train, val, test
