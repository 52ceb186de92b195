import numpy as np
import pytest

from picovlm import tensor as T
from picovlm.encoder import (EncoderConfig, LayerSelection, VisionEncoder,
                             select_layers)
from picovlm.errors import ConfigError, SelectionError, ShapeError


def make_encoder(seed=0, dtype=np.float64, **kw):
    cfg = EncoderConfig(**kw)
    return VisionEncoder(cfg, np.random.default_rng(seed), dtype=dtype), cfg


class TestPatchify:
    def test_token_count_small(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=1, patch_size=4,
                              d_v=8, depth=1, heads=2)
        out = enc.patchify(np.zeros((8, 8, 1)))
        assert out.tokens.shape == (4, 8) and out.n_patches == 4

    def test_token_count_32x32(self):
        enc, _ = make_encoder(image_h=32, image_w=32, channels=3, patch_size=4,
                              d_v=16, depth=1, heads=2)
        assert enc.patchify(np.zeros((32, 32, 3))).tokens.shape[0] == 64

    def test_zero_image_gives_positional_embeddings(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=1, heads=2)
        out = enc.patchify(np.zeros((8, 8, 3)))
        # projection bias starts at zero, so only the positions remain
        assert np.array_equal(out.tokens.data, enc.pos.data)

    def test_class_token_prepended(self):
        enc, cfg = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                                d_v=8, depth=1, heads=2, use_class_token=True)
        out = enc.patchify(np.zeros((8, 8, 3)))
        assert out.tokens.shape == (cfg.n_patches + 1, 8)

    def test_non_divisible_dims_config_error(self):
        with pytest.raises(ConfigError):
            EncoderConfig(image_h=10, image_w=8, patch_size=4)

    def test_wrong_image_shape(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=1, heads=2)
        with pytest.raises(ShapeError):
            enc.patchify(np.zeros((8, 8, 1)))


class TestSelectLayers:
    def test_uniform_rule_24_quarter(self):
        sel = select_layers(24, 16, 0.25, "uniform")
        assert sel.encoder_layers == [4, 8, 12, 16, 20, 24]
        assert sel.n_selected == 6  # round(0.25 * 24)

    def test_tail_rule_24_quarter(self):
        sel = select_layers(24, 16, 0.25, "tail")
        assert sel.encoder_layers == [19, 20, 21, 22, 23, 24]

    def test_full_density_selects_all(self):
        sel = select_layers(6, 12, 1.0, "uniform")
        assert sel.encoder_layers == [1, 2, 3, 4, 5, 6]
        assert sel.llm_layers == [2, 4, 6, 8, 10, 12]

    def test_eight_at_quarter_gives_two_taps(self):
        sel = select_layers(8, 4, 0.25, "uniform")
        assert sel.n_selected == 2 and sel.encoder_layers == [4, 8]

    def test_final_layer_always_selected(self):
        for depth in (3, 7, 12, 24):
            for density in (0.2, 0.25, 0.5):
                sel = select_layers(depth, depth, density, "uniform")
                assert sel.encoder_layers[-1] == depth

    def test_tiny_density_clamped_to_one(self):
        sel = select_layers(8, 8, 0.01, "uniform")
        assert sel.n_selected == 1

    def test_final_only_single_pair(self):
        sel = select_layers(8, 4, 0.25, "final-only")
        assert sel.pairs == [(8, 4)]

    def test_uniform_vs_tail_differ(self):
        uni = select_layers(24, 24, 0.25, "uniform")
        tail = select_layers(24, 24, 0.25, "tail")
        assert set(uni.encoder_layers) != set(tail.encoder_layers)

    def test_llm_too_shallow_raises(self):
        with pytest.raises(SelectionError):
            select_layers(8, 2, 1.0, "uniform")

    def test_bad_density(self):
        with pytest.raises(SelectionError):
            select_layers(8, 8, 0.0, "uniform")
        with pytest.raises(SelectionError):
            select_layers(8, 8, 1.5, "uniform")

    def test_unknown_strategy(self):
        with pytest.raises(SelectionError):
            select_layers(8, 8, 0.25, "zigzag")

    def test_pairs_strictly_increasing_enforced(self):
        with pytest.raises(SelectionError):
            LayerSelection(0.5, "uniform", [(4, 2), (2, 3)])


class TestEncodeHierarchical:
    def test_depth_one_selected_equals_forward(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=1, heads=2)
        sel = select_layers(1, 1, 1.0, "uniform")
        tokens = enc.patchify(np.random.default_rng(0).random((8, 8, 3)))
        feats = enc.encode_hierarchical(tokens, sel)
        direct = enc.block_forward(1, tokens.tokens)
        assert np.array_equal(feats.taps[0].data, direct.data)

    def test_identity_blocks_pass_input_through(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=3, heads=2)
        for blk in enc.blocks:  # zero both residual-branch outputs
            blk.attn.wo.w.data[:] = 0
            blk.attn.wo.b.data[:] = 0
            blk.mlp.fc2.w.data[:] = 0
            blk.mlp.fc2.b.data[:] = 0
        sel = select_layers(3, 3, 1.0, "uniform")
        tokens = enc.patchify(np.random.default_rng(1).random((8, 8, 3)))
        feats = enc.encode_hierarchical(tokens, sel, keep_all=True)
        for l in range(1, 4):
            assert np.array_equal(feats.layers[l].data, tokens.tokens.data)

    def test_recurrence_bit_exact(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=4, heads=2)
        sel = select_layers(4, 4, 1.0, "uniform")
        tokens = enc.patchify(np.random.default_rng(2).random((8, 8, 3)))
        feats = enc.encode_hierarchical(tokens, sel, keep_all=True)
        prev = tokens.tokens
        for l in range(1, 5):
            redo = enc.block_forward(l, prev)
            assert np.array_equal(redo.data, feats.layers[l].data)
            prev = feats.layers[l]

    def test_tap_completeness_and_shape(self):
        enc, cfg = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                                d_v=8, depth=4, heads=2)
        sel = select_layers(4, 4, 0.5, "uniform")
        feats = enc.encode_hierarchical(enc.patchify(np.zeros((8, 8, 3))), sel)
        assert len(feats.taps) == len(sel.pairs)
        for tap in feats.taps:
            assert tap.shape == (cfg.n_tokens, cfg.d_v)

    def test_class_token_row_counts(self):
        for use_cls in (False, True):
            enc, cfg = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                                    d_v=8, depth=2, heads=2, use_class_token=use_cls)
            sel = select_layers(2, 2, 1.0, "uniform")
            feats = enc.encode_hierarchical(enc.patchify(np.zeros((8, 8, 3))), sel)
            expected = cfg.n_patches + (1 if use_cls else 0)
            assert all(t.shape[0] == expected for t in feats.taps)

    def test_stop_gradient_cuts_backbone(self):
        enc, _ = make_encoder(image_h=8, image_w=8, channels=3, patch_size=4,
                              d_v=8, depth=3, heads=2)
        sel = select_layers(3, 3, 1.0, "uniform")
        img = T.Tensor(np.random.default_rng(3).random((8, 8, 3)),
                       requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            feats = enc.encode_hierarchical(enc.patchify(img), sel,
                                            keep_all=True, stop_grad_after=1)
            tape.backward(T.sum_all(feats.layers[3]))
        # layer 1's only tape consumer would be block 2, which is cut
        assert feats.layers[1].grad is None
        assert feats.layers[2].grad is not None
