"""Vision backbone: patchification, shared masking, and the encoder/decoder.

The encoder sees only the visible patch tokens plus a CLS summary token.
Patch tokens are shifted by a fixed 2-D sinusoidal position table and by a
learnable per-family modality embedding shared across every view instance
of that family. The lightweight decoder re-inserts a learnable mask token
at hidden positions and regresses raw patch pixels.

One mask is sampled per *study* and applied to all of its views, so token
positions stay index-aligned across views (the cross-view alignment loss
sums over matching visible positions).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .data import ProjectionFamily, View
from .errors import ShapeError, ValidationError

NUM_FAMILIES = 3


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 224
    patch_side: int = 16
    embed_dim: int = 768
    encoder_layers: int = 12
    encoder_heads: int = 12
    decoder_dim: int = 512
    decoder_layers: int = 8
    decoder_heads: int = 16
    mask_ratio: float = 0.9

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValidationError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        t = self.tokens
        n_masked = int(np.floor(self.mask_ratio * t))
        if n_masked < 1 or t - n_masked < 1:
            raise ValidationError(
                f"mask_ratio {self.mask_ratio} with T={t} leaves no masked or "
                "no visible tokens")
        if self.encoder_layers < 1 or self.decoder_layers < 0:
            raise ValidationError("encoder needs >=1 layers, decoder >=0")
        for dim, heads, label in ((self.embed_dim, self.encoder_heads, "encoder"),
                                  (self.decoder_dim, self.decoder_heads, "decoder")):
            if dim % heads != 0:
                raise ValidationError(f"{label} dim {dim} not divisible by heads {heads}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_pixels(self) -> int:
        return self.patch_side ** 2


PRESETS = {
    # The full-scale recipe: 12x12x768 over 16-pixel patches, 90% masking.
    "vit-base-16": BackboneConfig(),
    # Desk-scale preset used by the whole test suite.
    "vit-micro": BackboneConfig(image_side=32, patch_side=8, embed_dim=32,
                                encoder_layers=2, encoder_heads=2,
                                decoder_dim=16, decoder_layers=1, decoder_heads=2,
                                mask_ratio=0.75),
}


def config_from_preset(name: str, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


@dataclass(frozen=True)
class MaskSpec:
    """Per-study random mask: which token indices stay visible."""

    alpha: float
    total: int
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        vis, msk = set(self.visible.tolist()), set(self.masked.tolist())
        if vis & msk or vis | msk != set(range(self.total)):
            raise ValidationError("visible/masked sets must partition the token range")

    @property
    def n_visible(self) -> int:
        return len(self.visible)

    @classmethod
    def sample(cls, total: int, alpha: float, rng: np.random.Generator) -> "MaskSpec":
        n_masked = int(np.floor(alpha * total))
        if n_masked < 1 or total - n_masked < 1:
            raise ValidationError(
                f"alpha {alpha} with T={total} leaves no masked or no visible tokens")
        perm = rng.permutation(total)
        masked = np.sort(perm[:n_masked])
        visible = np.sort(perm[n_masked:])
        return cls(alpha=alpha, total=total, visible=visible, masked=masked)

    @classmethod
    def full(cls, total: int) -> "MaskSpec":
        """Everything visible — used for probing/finetuning forward passes."""
        return cls(alpha=0.0, total=total,
                   visible=np.arange(total), masked=np.arange(0))


def patchify(image: np.ndarray, patch_side: int) -> np.ndarray:
    """Split a square image into raster-ordered (T, patch²) rows."""
    h, w = image.shape
    if h != w or h % patch_side != 0:
        raise ShapeError(f"image {image.shape} not square-divisible by {patch_side}")
    g = h // patch_side
    return (image.reshape(g, patch_side, g, patch_side)
                 .transpose(0, 2, 1, 3)
                 .reshape(g * g, patch_side * patch_side))


def unpatchify(patches: np.ndarray, patch_side: int) -> np.ndarray:
    t, pp = patches.shape
    g = int(round(np.sqrt(t)))
    if g * g != t or pp != patch_side * patch_side:
        raise ShapeError(f"patch matrix {patches.shape} is not a square grid")
    return (patches.reshape(g, g, patch_side, patch_side)
                   .transpose(0, 2, 1, 3)
                   .reshape(g * patch_side, g * patch_side))


@dataclass
class PatchSequence:
    """All T tokens of one view after embedding + positional/modality shifts."""

    tokens: Tensor
    family: int


@dataclass
class Encoding:
    """Encoder output: CLS row first, then visible tokens by ascending index."""

    tokens: Tensor
    mask: MaskSpec
    family: int

    @property
    def cls(self) -> Tensor:
        return self.tokens[0:1]

    @property
    def visible_tokens(self) -> Tensor:
        return self.tokens[1:]


def _check_family(family) -> int:
    family = int(family)
    if family not in (0, 1, 2):
        raise ValidationError(f"family index {family} not in {{0, 1, 2}}")
    return family


class VisionEncoder:
    """ViT over visible patch tokens with modality-aware embedding shifts."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_pixels, d, rng)
        self.cls_token = Parameter(nn.trunc_normal(rng, (1, d)))
        self.modality = Parameter(nn.trunc_normal(rng, (NUM_FAMILIES, d)))
        self.pos = nn.sincos_2d(config.grid_side, d)
        self.blocks = [nn.EncoderBlock(d, config.encoder_heads, rng)
                       for _ in range(config.encoder_layers)]
        self.norm = nn.LayerNorm(d)

    def embed_patches(self, view: View | np.ndarray, family=None) -> PatchSequence:
        """Patchify and apply h_t = patch_embed_t + pos_t + modality[family]."""
        if isinstance(view, View):
            image, family = view.image, view.family
        else:
            image = view
        family = _check_family(family)
        if image.shape != (self.config.image_side, self.config.image_side):
            raise ShapeError(f"view shape {image.shape} does not match configured "
                             f"side {self.config.image_side}")
        patches = Tensor(patchify(image, self.config.patch_side))
        tokens = self.patch_embed(patches) + Tensor(self.pos) + self.modality[family]
        return PatchSequence(tokens=tokens, family=family)

    def forward_tokens(self, rows: Tensor) -> Tensor:
        """Transformer trunk: CLS + visible rows in, normalized rows out."""
        for block in self.blocks:
            rows = block(rows)
        return self.norm(rows)

    def encode(self, view: View | np.ndarray, mask: MaskSpec, family=None) -> Encoding:
        seq = self.embed_patches(view, family)
        if mask.total != self.config.tokens:
            raise ShapeError(f"mask covers {mask.total} tokens, config has "
                             f"{self.config.tokens}")
        visible = ad.take(seq.tokens, mask.visible, axis=0)
        rows = ad.concat([self.cls_token, visible], axis=0)
        return Encoding(tokens=self.forward_tokens(rows), mask=mask,
                        family=seq.family)

    def parameters(self, prefix: str = "encoder") -> dict:
        groups = [self.patch_embed.parameters(f"{prefix}.patch_embed"),
                  {f"{prefix}.cls_token": self.cls_token,
                   f"{prefix}.modality": self.modality}]
        groups += [blk.parameters(f"{prefix}.block{i}")
                   for i, blk in enumerate(self.blocks)]
        groups.append(self.norm.parameters(f"{prefix}.norm"))
        return nn.merge_params(*groups)


class ReconstructionDecoder:
    """Lightweight decoder regressing pixels at every patch position."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        d = config.decoder_dim
        self.proj = nn.Linear(config.embed_dim, d, rng)
        self.mask_token = Parameter(nn.trunc_normal(rng, (1, d)))
        # Same family index selects the decoder-width modality embedding.
        self.modality = Parameter(nn.trunc_normal(rng, (NUM_FAMILIES, d)))
        self.pos = nn.sincos_2d(config.grid_side, d)
        self.blocks = [nn.EncoderBlock(d, config.decoder_heads, rng)
                       for _ in range(config.decoder_layers)]
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.patch_pixels, rng)

    def decode(self, encoding: Encoding, mask: MaskSpec | None = None,
               family=None) -> Tensor:
        mask = encoding.mask if mask is None else mask
        family = _check_family(encoding.family if family is None else family)
        if encoding.tokens.shape[0] != 1 + mask.n_visible:
            raise ShapeError(f"encoding has {encoding.tokens.shape[0]} rows, mask "
                             f"implies {1 + mask.n_visible}")
        x = self.proj(encoding.tokens)
        cls_row = x[0:1]
        visible_rows = x[1:]
        # Row 0 of the source is the shared mask token; visible rows follow.
        # gather_index sends each position to its source row.
        gather_index = np.zeros(mask.total, dtype=np.int64)
        gather_index[mask.visible] = 1 + np.arange(mask.n_visible)
        source = ad.concat([self.mask_token, visible_rows], axis=0)
        grid = ad.take(source, gather_index, axis=0)
        grid = grid + Tensor(self.pos) + self.modality[family]
        rows = ad.concat([cls_row, grid], axis=0)
        for block in self.blocks:
            rows = block(rows)
        out = self.head(self.norm(rows))
        return out[1:]  # CLS row dropped from the output

    def parameters(self, prefix: str = "decoder") -> dict:
        groups = [self.proj.parameters(f"{prefix}.proj"),
                  {f"{prefix}.mask_token": self.mask_token,
                   f"{prefix}.modality": self.modality}]
        groups += [blk.parameters(f"{prefix}.block{i}")
                   for i, blk in enumerate(self.blocks)]
        groups.append(self.norm.parameters(f"{prefix}.norm"))
        groups.append(self.head.parameters(f"{prefix}.head"))
        return nn.merge_params(*groups)
