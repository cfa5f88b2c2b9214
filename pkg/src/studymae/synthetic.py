"""Deterministic synthetic multi-view study generator.

Each study draws a latent 14-bit condition vector. Views render those bits
as family-dependent low-frequency intensity blobs on top of a smooth
background field shared by all views of the study, plus view-local noise —
the cheapest construction where views of one study share signal that
cross-view alignment can exploit. Reports are templated word sequences
naming the positive conditions, and labels equal the condition vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LABEL_NAMES, NUM_LABELS, ProjectionFamily, Study, View, bilinear_resize
from .errors import ValidationError

REPORT_PREFIX = "study shows"
EMPTY_FINDING_TOKEN = "nothing"

# One report word per category; doubles as the vocabulary the text head learns.
CATEGORY_TOKENS = tuple(name.lower().replace(" ", "_") for name in LABEL_NAMES)


@dataclass(frozen=True)
class SyntheticConfig:
    image_side: int = 32
    condition_rate: float = 0.25
    view_count_weights: tuple = (0.25, 0.55, 0.20)  # P(1 view), P(2), P(3)
    studies_per_patient: int = 1
    report_rate: float = 1.0
    blob_amplitude: float = 0.55
    blob_sigma_frac: float = 0.10
    background_scale: float = 0.18
    noise_scale: float = 0.06
    dataset_tag: str = "synthetic"


def _blob_centers(side: int, family: ProjectionFamily) -> np.ndarray:
    """Fixed per-category blob centers; the layout depends on the family."""
    cells = np.arange(NUM_LABELS)
    rows = cells // 4
    cols = cells % 4
    if family == ProjectionFamily.LATERAL:
        rows, cols = cols, rows
    elif family == ProjectionFamily.UNKNOWN:
        cols = 3 - cols
    centers = np.stack([(rows + 0.5) / 4.0, (cols + 0.5) / 4.0], axis=1)
    return centers * side


def _render_view(side: int, bits: np.ndarray, family: ProjectionFamily,
                 background: np.ndarray, rng: np.random.Generator,
                 cfg: SyntheticConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = 0.4 + cfg.background_scale * background
    sigma = cfg.blob_sigma_frac * side
    for k, center in enumerate(_blob_centers(side, family)):
        if bits[k]:
            d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
            img += cfg.blob_amplitude * np.exp(-d2 / (2.0 * sigma * sigma))
    img += cfg.noise_scale * rng.normal(size=(side, side))
    return np.clip(img, 0.0, 1.0)


def _smooth_field(side: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency field: a coarse noise grid upsampled bilinearly."""
    coarse = rng.normal(size=(4, 4))
    return bilinear_resize(coarse, side, side)


def make_report(bits: np.ndarray) -> str:
    tokens = [CATEGORY_TOKENS[k] for k in range(NUM_LABELS) if bits[k]]
    if not tokens:
        tokens = [EMPTY_FINDING_TOKEN]
    return f"{REPORT_PREFIX} {' '.join(tokens)}"


def generate_synthetic_studies(count: int, config: SyntheticConfig | None = None,
                               seed: int = 0) -> list[Study]:
    """Generate ``count`` studies, byte-identical for identical arguments."""
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    cfg = config or SyntheticConfig()
    weights = np.asarray(cfg.view_count_weights, dtype=np.float64)
    weights = weights / weights.sum()
    streams = np.random.SeedSequence(seed).spawn(count)

    studies = []
    for i in range(count):
        rng = np.random.default_rng(streams[i])
        bits = (rng.random(NUM_LABELS) < cfg.condition_rate).astype(np.int8)
        n_views = int(rng.choice(len(weights), p=weights)) + 1
        background = _smooth_field(cfg.image_side, rng)

        views = []
        for v in range(n_views):
            if v == 0:
                family = ProjectionFamily.FRONTAL
            elif v == 1:
                family = ProjectionFamily.LATERAL
            else:
                family = ProjectionFamily(int(rng.integers(0, 3)))
            image = _render_view(cfg.image_side, bits, family, background, rng, cfg)
            views.append(View(image=image, family=family, instance_index=v))

        has_report = rng.random() < cfg.report_rate
        studies.append(Study(
            study_id=f"s{i:05d}",
            patient_id=f"p{i // max(cfg.studies_per_patient, 1):05d}",
            views=views,
            report=make_report(bits) if has_report else None,
            labels=bits,
            dataset_tag=cfg.dataset_tag,
        ))
    return studies
