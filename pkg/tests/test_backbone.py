"""Backbone checks: patch geometry, masking arithmetic, encoder/decoder."""

import numpy as np
import pytest

from studymae import autodiff as ad
from studymae.autodiff import Tensor, grad_check
from studymae.backbone import (BackboneConfig, MaskSpec, PRESETS,
                               ReconstructionDecoder, VisionEncoder,
                               config_from_preset, patchify, unpatchify)
from studymae.data import ProjectionFamily, View
from studymae.errors import ShapeError, ValidationError
from studymae.losses import loss_align, loss_rec, loss_total

TINY = BackboneConfig(image_side=16, patch_side=8, embed_dim=8,
                      encoder_layers=1, encoder_heads=2,
                      decoder_dim=8, decoder_layers=1, decoder_heads=2,
                      mask_ratio=0.5)


def make_view(rng, side, family=ProjectionFamily.FRONTAL):
    return View(image=rng.random((side, side)), family=family, instance_index=0)


class TestPatchify:
    def test_raster_order_on_4x4(self):
        img = np.arange(16, dtype=float).reshape(4, 4)
        patches = patchify(img, 2)
        assert patches.shape == (4, 4)
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_unpatchify_inverts(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32))
        np.testing.assert_array_equal(unpatchify(patchify(img, 8), 8), img)

    def test_constant_image_identical_rows(self):
        patches = patchify(np.full((8, 8), 0.3), 4)
        assert np.all(patches == patches[0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            patchify(np.ones((10, 12)), 4)


class TestMaskSpec:
    def test_paper_ratio_arithmetic(self):
        rng = np.random.default_rng(0)
        mask = MaskSpec.sample(196, 0.9, rng)
        assert len(mask.masked) == 176
        assert mask.n_visible == 20

    def test_single_visible_boundary(self):
        rng = np.random.default_rng(1)
        mask = MaskSpec.sample(16, 15 / 16, rng)
        assert mask.n_visible == 1

    def test_fixed_rng_reproducible(self):
        a = MaskSpec.sample(64, 0.75, np.random.default_rng(5))
        b = MaskSpec.sample(64, 0.75, np.random.default_rng(5))
        np.testing.assert_array_equal(a.visible, b.visible)

    def test_cardinality_exact_over_range(self):
        rng = np.random.default_rng(2)
        for total in (4, 9, 16, 49, 196):
            for alpha in (0.3, 0.5, 0.75, 0.9):
                if int(np.floor(alpha * total)) < 1 or total - int(np.floor(alpha * total)) < 1:
                    continue
                mask = MaskSpec.sample(total, alpha, rng)
                assert len(mask.masked) == int(np.floor(alpha * total))
                assert sorted(mask.visible.tolist() + mask.masked.tolist()) == list(range(total))

    def test_full_mask_for_probing(self):
        mask = MaskSpec.full(9)
        assert mask.n_visible == 9 and len(mask.masked) == 0


class TestConfig:
    def test_presets_exist(self):
        base = PRESETS["vit-base-16"]
        assert (base.encoder_layers, base.encoder_heads, base.embed_dim) == (12, 12, 768)
        assert base.mask_ratio == 0.9
        micro = config_from_preset("vit-micro")
        assert micro.tokens == 16 and micro.embed_dim == 32

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValidationError):
            BackboneConfig(image_side=30, patch_side=8)
        with pytest.raises(ValidationError):
            BackboneConfig(image_side=32, patch_side=8, mask_ratio=0.01)
        with pytest.raises(ValidationError):
            config_from_preset("vit-enormous")


class TestEncoder:
    def test_deterministic_for_same_inputs(self):
        rng = np.random.default_rng(3)
        enc = VisionEncoder(TINY, rng)
        view = make_view(np.random.default_rng(0), 16)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        a = enc.encode(view, mask)
        b = enc.encode(view, mask)
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)

    def test_family_changes_encoding(self):
        rng = np.random.default_rng(4)
        enc = VisionEncoder(TINY, rng)
        image = np.random.default_rng(0).random((16, 16))
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        a = enc.encode(image, mask, family=ProjectionFamily.FRONTAL)
        b = enc.encode(image, mask, family=ProjectionFamily.LATERAL)
        assert not np.allclose(a.tokens.data, b.tokens.data)

    def test_row_count_is_one_plus_visible(self):
        rng = np.random.default_rng(5)
        cfg = config_from_preset("vit-micro", image_side=112, patch_side=8,
                                 mask_ratio=0.9)  # T=196 -> 20 visible
        enc = VisionEncoder(cfg, rng)
        view = make_view(np.random.default_rng(0), 112)
        mask = MaskSpec.sample(cfg.tokens, cfg.mask_ratio, np.random.default_rng(2))
        out = enc.encode(view, mask)
        assert out.tokens.shape == (21, cfg.embed_dim)

    def test_family_out_of_range_rejected(self):
        enc = VisionEncoder(TINY, np.random.default_rng(0))
        view = np.random.default_rng(0).random((16, 16))
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        with pytest.raises(ValidationError):
            enc.encode(view, mask, family=5)

    def test_modality_gradients_accumulate_across_frontal_views(self):
        """Two frontal views: the frontal row collects both views' gradients,
        the other family rows get exactly zero."""
        rng = np.random.default_rng(6)
        enc = VisionEncoder(TINY, rng)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        img_rng = np.random.default_rng(7)
        total = None
        for _ in range(2):
            e = enc.encode(img_rng.random((16, 16)), mask,
                           family=ProjectionFamily.FRONTAL)
            term = e.tokens.sum()
            total = term if total is None else total + term
        total.backward()
        grad = enc.modality.grad
        assert np.abs(grad[0]).max() > 0
        np.testing.assert_array_equal(grad[1], np.zeros_like(grad[1]))
        np.testing.assert_array_equal(grad[2], np.zeros_like(grad[2]))

    def test_permutation_equivariance_of_trunk(self):
        """Permuting non-CLS input rows permutes output rows to match."""
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(8)
            enc = VisionEncoder(TINY, rng)
            rows = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
            perm = np.array([0, 3, 1, 4, 2])  # keeps CLS at row 0
            out = enc.forward_tokens(rows).data
            out_perm = enc.forward_tokens(rows[perm]).data
            np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestDecoder:
    def test_output_shape_always_full_grid(self):
        rng = np.random.default_rng(9)
        enc = VisionEncoder(TINY, rng)
        dec = ReconstructionDecoder(TINY, rng)
        view = make_view(np.random.default_rng(0), 16)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        recon = dec.decode(enc.encode(view, mask))
        assert recon.shape == (4, 64)

    def test_zero_head_gives_zero_reconstruction(self):
        rng = np.random.default_rng(10)
        enc = VisionEncoder(TINY, rng)
        dec = ReconstructionDecoder(TINY, rng)
        dec.head.w.data[:] = 0.0
        dec.head.b.data[:] = 0.0
        view = make_view(np.random.default_rng(0), 16)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        recon = dec.decode(enc.encode(view, mask))
        np.testing.assert_array_equal(recon.data, np.zeros((4, 64)))

    def test_mask_token_reaches_only_masked_positions(self):
        """With no mixing blocks, perturbing the mask token moves outputs at
        masked positions and leaves visible positions untouched."""
        cfg = BackboneConfig(image_side=16, patch_side=8, embed_dim=8,
                             encoder_layers=1, encoder_heads=2,
                             decoder_dim=8, decoder_layers=0, decoder_heads=2,
                             mask_ratio=0.5)
        rng = np.random.default_rng(11)
        enc = VisionEncoder(cfg, rng)
        dec = ReconstructionDecoder(cfg, rng)
        view = make_view(np.random.default_rng(0), 16)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        encoding = enc.encode(view, mask)
        before = dec.decode(encoding).data.copy()
        # single-coordinate bump (a uniform shift would be erased by the norm)
        dec.mask_token.data[0, 0] += 0.5
        after = dec.decode(encoding).data
        np.testing.assert_array_equal(after[mask.visible], before[mask.visible])
        assert np.abs(after[mask.masked] - before[mask.masked]).max() > 1e-6

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        enc = VisionEncoder(TINY, rng)
        dec = ReconstructionDecoder(TINY, rng)
        view = make_view(np.random.default_rng(0), 16)
        mask = MaskSpec.sample(4, 0.5, np.random.default_rng(1))
        encoding = enc.encode(view, mask)
        other = MaskSpec.sample(4, 0.75, np.random.default_rng(2))  # 1 visible
        with pytest.raises(ShapeError):
            dec.decode(encoding, mask=other)


class TestEndToEndGradients:
    def test_mvmae_loss_grad_check_tiny(self):
        """Reconstruction + alignment through encoder and decoder."""
        with ad.use_dtype(np.float64):
            rng = np.random.default_rng(13)
            enc = VisionEncoder(TINY, rng)
            dec = ReconstructionDecoder(TINY, rng)
            params = {**enc.parameters(), **dec.parameters()}
            img_rng = np.random.default_rng(3)
            views = [
                View(img_rng.random((16, 16)), ProjectionFamily.FRONTAL, 0),
                View(img_rng.random((16, 16)), ProjectionFamily.LATERAL, 1),
            ]
            mask = MaskSpec.sample(4, 0.5, np.random.default_rng(4))
            originals = [patchify(v.image, 8) for v in views]

            def f():
                encodings = [enc.encode(v, mask) for v in views]
                recons = [dec.decode(e) for e in encodings]
                bundle = loss_total(loss_rec(originals, recons, mask),
                                    loss_align(encodings, mask), beta=0.7)
                return bundle.total

            report = grad_check(f, params, epsilon=1e-5, tolerance=1e-3,
                                max_components=4)
        assert report.passed, f"{report.worst}: {report.max_rel_error:.3e}"
