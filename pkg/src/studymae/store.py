"""Dataset directory layout: manifest + images + reports + split lists.

A dataset directory is the unit every command consumes, so synthetic and
prepared real data are interchangeable downstream::

    <dir>/manifest.tsv
    <dir>/images/<study>_<index>.png|.npy
    <dir>/reports/<study>.txt
    <dir>/splits/{train,val,test}.txt     (study ids, one per line)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import (ABSENT, MANIFEST_COLUMNS, LabelSpace, SplitSpec, Study,
                   load_manifest, split_studies)
from .errors import ValidationError

FAMILY_TOKENS = ("frontal", "lateral", "unknown")
SPLIT_NAMES = ("train", "val", "test")


def _states_field(labels: np.ndarray | None) -> str:
    if labels is None:
        return ABSENT
    return ";".join("positive" if b else "negative" for b in labels)


def write_image(path: Path, image: np.ndarray) -> None:
    if path.suffix == ".npy":
        np.save(path, image.astype(np.float32))
    else:
        quantized = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16)
        Image.fromarray(quantized).save(path)


def write_dataset(studies: list[Study], out_dir: str | Path,
                  image_format: str = "png") -> Path:
    """Materialize studies as a dataset directory; returns the manifest path."""
    if image_format not in ("png", "npy"):
        raise ValidationError(f"unsupported image format {image_format!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    rows = []
    for study in studies:
        report_field = ABSENT
        if study.report is not None:
            report_rel = f"reports/{study.study_id}.txt"
            (out / report_rel).write_text(study.report + "\n", encoding="utf-8")
            report_field = report_rel
        labels_field = _states_field(study.labels)
        for view in study.views:
            image_rel = f"images/{study.study_id}_{view.instance_index}.{image_format}"
            write_image(out / image_rel, view.image)
            rows.append((study.study_id, study.patient_id, study.dataset_tag,
                         FAMILY_TOKENS[view.family], str(view.instance_index),
                         image_rel, labels_field, report_field))

    manifest = out / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    return manifest


def write_splits(out_dir: str | Path, studies: list[Study], spec: SplitSpec) -> None:
    """Split by patient and persist the study-id lists."""
    parts = split_studies(studies, spec)
    splits_dir = Path(out_dir) / "splits"
    splits_dir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLIT_NAMES, parts):
        text = "".join(s.study_id + "\n" for s in part)
        (splits_dir / f"{name}.txt").write_text(text, encoding="utf-8")


def load_split(data_dir: str | Path, split: str, image_side: int,
               label_space: LabelSpace | None = None) -> list[Study]:
    """Load the studies of one split (or 'all') from a dataset directory."""
    data_dir = Path(data_dir)
    studies = load_manifest(data_dir / "manifest.tsv", image_side=image_side,
                            label_space=label_space)
    if split == "all":
        return studies
    if split not in SPLIT_NAMES:
        raise ValidationError(f"unknown split {split!r}")
    split_file = data_dir / "splits" / f"{split}.txt"
    if not split_file.exists():
        raise ValidationError(f"split file not found: {split_file}")
    wanted = set(split_file.read_text(encoding="utf-8").split())
    return [s for s in studies if s.study_id in wanted]
