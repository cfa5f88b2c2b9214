"""Pretraining objectives: masked reconstruction, cross-view alignment,
weight annealing, and their composition.

All losses are pure functions of tensors and return scalar graph nodes.
Reconstruction is summed over pixels within each masked patch; alignment
uses the per-dimension mean squared distance between position-matched
rows of the per-view encodings, summed over ordered view pairs. Both
normalizations follow the masking ratio nominally (1/alpha and 1/(1-alpha)),
not the realized floor counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Encoding, MaskSpec
from .errors import NumericalError, ShapeError, ValidationError


@dataclass(frozen=True)
class LossWeights:
    """Linear ramp of the alignment weight from 0 to its target."""

    beta_target: float = 1.0
    anneal_steps: int = 0


def beta_at(weights: LossWeights, step: int) -> float:
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    if weights.anneal_steps <= 0:
        # Degenerate schedule: the target applies immediately.
        return weights.beta_target
    return weights.beta_target * min(1.0, step / weights.anneal_steps)


def _rows(encoding, include_cls: bool) -> Tensor:
    tokens = encoding.tokens if isinstance(encoding, Encoding) else encoding
    return tokens if include_cls else tokens[1:]


def loss_rec(originals, reconstructions, mask: MaskSpec) -> Tensor:
    """Masked-patch reconstruction error, averaged over views.

    ``originals`` are per-view (T, patch²) pixel matrices, ``reconstructions``
    the matching decoder outputs. Only masked rows contribute, so gradients
    at visible positions are exactly zero.
    """
    n_views = len(originals)
    if n_views == 0:
        raise ValidationError("loss_rec needs at least one view")
    if len(reconstructions) != n_views:
        raise ShapeError(f"{n_views} originals vs {len(reconstructions)} reconstructions")
    if mask.alpha <= 0:
        raise ValidationError("loss_rec needs a mask with alpha > 0")
    total = None
    for orig, recon in zip(originals, reconstructions):
        orig = np.asarray(orig)
        if tuple(orig.shape) != tuple(recon.shape):
            raise ShapeError(f"original {orig.shape} vs reconstruction {recon.shape}")
        diff = ad.take(recon, mask.masked, axis=0) - Tensor(orig[mask.masked])
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total * (1.0 / (mask.alpha * n_views))


def loss_align(encodings, mask: MaskSpec, include_cls: bool = True) -> Tensor:
    """Average pairwise distance between per-view encodings.

    Sums the per-dimension MSE between rows at matching visible positions
    over all *ordered* pairs of distinct views, scaled by 1/(1-alpha) and
    the pair count. Single-view studies contribute exactly zero. The CLS row
    participates as one extra aligned position unless ``include_cls`` is off.
    """
    n = len(encodings)
    if n == 0:
        raise ValidationError("loss_align needs at least one encoding")
    if n == 1:
        return Tensor(0.0)
    rows = [_rows(e, include_cls) for e in encodings]
    for r in rows[1:]:
        if r.shape != rows[0].shape:
            raise ShapeError(f"encoding rows {r.shape} vs {rows[0].shape}")
    dim = rows[0].shape[1]
    total = None
    for u in range(n):
        for v in range(n):
            if u == v:
                continue
            diff = rows[u] - rows[v]
            term = (diff * diff).sum() * (1.0 / dim)  # d_MSE over embedding dims
            total = term if total is None else total + term
    pairs = n * (n - 1)
    return total * (1.0 / ((1.0 - mask.alpha) * pairs))


@dataclass
class LossBundle:
    """Per-study (or per-batch) objective terms; ``total`` stays in-graph."""

    l_rec: Tensor
    l_align: Tensor
    beta_used: float
    total: Tensor
    l_ce: Tensor | None = None

    def scalars(self) -> dict:
        return {
            "l_rec": self.l_rec.item(),
            "l_align": self.l_align.item(),
            "l_ce": None if self.l_ce is None else self.l_ce.item(),
            "beta": self.beta_used,
            "total": self.total.item(),
        }


def loss_total(l_rec: Tensor, l_align: Tensor, beta: float,
               l_ce: Tensor | None = None) -> LossBundle:
    """Compose the study objective: rec + beta * align (+ ce when present)."""
    for name, term in (("l_rec", l_rec), ("l_align", l_align), ("l_ce", l_ce)):
        if term is not None and not np.isfinite(term.data).all():
            raise NumericalError(f"{name} is not finite")
    total = l_rec + l_align * beta
    if l_ce is not None:
        total = total + l_ce
    return LossBundle(l_rec=l_rec, l_align=l_align, beta_used=beta,
                      total=total, l_ce=l_ce)
