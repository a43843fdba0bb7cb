"""Backbone tests: config validation, layouts, positional lookup, patch
embedding, attention, and the full forward."""

import numpy as np
import pytest

from cft.config import ModelConfig
from cft.errors import ConfigError, ConsistencyError, ShapeError
from cft.model import (
    CoarseSlot,
    FineSlot,
    TokenSequence,
    coarse_layout,
    embed_patches,
    encoder_forward,
    fine_cell,
    forward,
    full_fine_layout,
    mixed_layout,
    positional_lookup,
    self_attention,
)
from cft.tensor import DenseTensor, OpCounter


class TestModelConfig:
    def test_defaults_give_standard_sizes(self):
        cfg = ModelConfig()
        assert cfg.n_coarse == 49
        assert cfg.fine_grid == 14
        assert cfg.n_fine_full == 196
        assert cfg.image_px == 224
        assert cfg.head_dim == 64
        assert cfg.ffn_dim == 1536
        assert cfg.patch_inputs == 768

    def test_head_divisibility_named_in_error(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(embed_dim=30, heads=4)

    @pytest.mark.parametrize("field,value", [
        ("coarse_grid", 0), ("patch_px", 0), ("embed_dim", 0), ("depth", 0),
        ("heads", 0), ("num_classes", 0), ("mlp_ratio", 0),
        ("alpha", -0.1), ("alpha", 1.5), ("beta", 2.0),
        ("ema_start", 0), ("ema_start", 13),
    ])
    def test_rejects_bad_field(self, field, value):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value})


class TestLayouts:
    def test_coarse_layout_is_raster(self, tiny_cfg):
        assert coarse_layout(tiny_cfg) == tuple(CoarseSlot(i) for i in range(4))

    def test_full_fine_layout_is_fine_raster(self, tiny_cfg):
        layout = full_fine_layout(tiny_cfg)
        assert len(layout) == tiny_cfg.n_fine_full
        cells = [fine_cell(s, tiny_cfg) for s in layout]
        assert cells == list(range(tiny_cfg.n_fine_full))

    def test_fine_cell_child_order(self, tiny_cfg):
        # children walk the parent's 2x2 block: TL, TR, BL, BR
        g = tiny_cfg.fine_grid
        assert fine_cell(FineSlot(0, 0), tiny_cfg) == 0
        assert fine_cell(FineSlot(0, 1), tiny_cfg) == 1
        assert fine_cell(FineSlot(0, 2), tiny_cfg) == g
        assert fine_cell(FineSlot(0, 3), tiny_cfg) == g + 1

    def test_mixed_layout_splits_in_place(self, tiny_cfg):
        layout = mixed_layout((2,), tiny_cfg)
        assert layout == (
            CoarseSlot(0),
            FineSlot(1, 0), FineSlot(1, 1), FineSlot(1, 2), FineSlot(1, 3),
            CoarseSlot(2), CoarseSlot(3),
        )

    def test_mixed_layout_children_contiguous(self, tiny_cfg):
        layout = mixed_layout((1, 4), tiny_cfg)
        fine_positions = [i for i, s in enumerate(layout) if isinstance(s, FineSlot)]
        # each split parent contributes a contiguous run of 4 slots
        for start in range(0, len(fine_positions), 4):
            run = fine_positions[start:start + 4]
            assert run == list(range(run[0], run[0] + 4))
            parents = {layout[i].parent for i in run}
            children = [layout[i].child for i in run]
            assert len(parents) == 1 and children == [0, 1, 2, 3]

    def test_mixed_layout_rejects_bad_ids(self, tiny_cfg):
        with pytest.raises(ConsistencyError):
            mixed_layout((0,), tiny_cfg)  # ids are 1-based
        with pytest.raises(ConsistencyError):
            mixed_layout((5,), tiny_cfg)


class TestPositionalLookup:
    def test_class_slot_is_row_zero(self, tiny_cfg, tiny_weights):
        row = positional_lookup(None, tiny_cfg, tiny_weights)
        assert (row.array == tiny_weights.pos_table.array[0]).all()

    def test_first_fine_child_is_row_one(self, tiny_cfg, tiny_weights):
        row = positional_lookup(FineSlot(0, 0), tiny_cfg, tiny_weights)
        assert (row.array == tiny_weights.pos_table.array[1]).all()

    def test_coarse_is_mean_of_children(self, tiny_cfg, tiny_weights):
        got = positional_lookup(CoarseSlot(1), tiny_cfg, tiny_weights).array
        child_rows = np.stack([
            positional_lookup(FineSlot(1, c), tiny_cfg, tiny_weights).array
            for c in range(4)
        ])
        np.testing.assert_allclose(got, child_rows.astype(np.float64).mean(0),
                                   atol=1e-7)

    def test_out_of_grid_rejected(self, tiny_cfg, tiny_weights):
        with pytest.raises(ConsistencyError):
            positional_lookup(CoarseSlot(4), tiny_cfg, tiny_weights)
        with pytest.raises(ConsistencyError):
            positional_lookup(FineSlot(0, 4), tiny_cfg, tiny_weights)


class TestEmbedPatches:
    def test_coarse_shape_and_layout(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights)
        assert seq.tokens.shape == (1 + tiny_cfg.n_coarse, tiny_cfg.embed_dim)
        assert seq.layout == coarse_layout(tiny_cfg)

    def test_full_fine_shape(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "fine", None, tiny_cfg, tiny_weights)
        assert seq.tokens.shape == (1 + tiny_cfg.n_fine_full, tiny_cfg.embed_dim)

    def test_mixed_length_matches_selection(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "fine", (1, 3), tiny_cfg, tiny_weights)
        assert seq.length == 1 + (4 * 2 + 2)

    def test_wrong_image_size_rejected(self, tiny_cfg, tiny_weights):
        bad = DenseTensor(np.zeros((3, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            embed_patches(bad, "coarse", None, tiny_cfg, tiny_weights)

    def test_selection_with_coarse_rejected(self, tiny_cfg, tiny_weights, make_image):
        with pytest.raises(ConsistencyError):
            embed_patches(make_image(), "coarse", (1,), tiny_cfg, tiny_weights)

    def test_constant_image_pools_to_same_token(self, tiny_cfg, tiny_weights):
        """On a constant image, pooled coarse pixels equal fine pixels, so
        coarse and fine patch tokens differ only by position."""
        img = DenseTensor(np.full((3, 16, 16), 0.25, dtype=np.float32))
        coarse = embed_patches(img, "coarse", None, tiny_cfg, tiny_weights)
        fine = embed_patches(img, "fine", None, tiny_cfg, tiny_weights)
        pos_c = positional_lookup(CoarseSlot(0), tiny_cfg, tiny_weights).array
        pos_f = positional_lookup(FineSlot(0, 0), tiny_cfg, tiny_weights).array
        bare_coarse = coarse.tokens.array[1] - pos_c
        bare_fine = fine.tokens.array[1] - pos_f
        np.testing.assert_allclose(bare_coarse, bare_fine, atol=1e-5)

    def test_embed_mul_adds_counted(self, tiny_cfg, tiny_weights, make_image):
        counter = OpCounter()
        embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights, counter)
        expected = tiny_cfg.n_coarse * tiny_cfg.patch_inputs * tiny_cfg.embed_dim
        assert counter.sections["embed"] == expected
        assert counter.mul_adds == expected


class TestAttentionAndForward:
    def test_attention_shapes(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights)
        out, attn = self_attention(seq.tokens, tiny_weights.encoders[0],
                                   tiny_cfg.heads)
        assert out.shape == seq.tokens.shape
        assert attn.shape == (tiny_cfg.heads, seq.length, seq.length)
        np.testing.assert_allclose(attn.array.sum(axis=2), 1.0, atol=1e-6)

    def test_encoder_emits_class_attention(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights)
        out, class_attn = encoder_forward(seq.tokens, tiny_weights.encoders[0],
                                          tiny_cfg.heads)
        assert out.shape == seq.tokens.shape
        assert class_attn.shape == (seq.length,)
        assert abs(float(class_attn.array.sum()) - 1.0) <= 1e-6

    def test_forward_trace(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights)
        logits, trace = forward(seq, tiny_cfg, tiny_weights)
        assert logits.shape == (tiny_cfg.num_classes,)
        assert np.isfinite(logits.array).all()
        assert len(trace.per_encoder_class_attention) == tiny_cfg.depth
        assert trace.global_attention.value is not None
        assert trace.final_tokens.shape == seq.tokens.shape

    def test_forward_is_deterministic(self, tiny_cfg, tiny_weights, make_image):
        seq = embed_patches(make_image(), "coarse", None, tiny_cfg, tiny_weights)
        a, _ = forward(seq, tiny_cfg, tiny_weights)
        b, _ = forward(seq, tiny_cfg, tiny_weights)
        assert (a.array == b.array).all()


def test_token_sequence_length_checked(tiny_cfg):
    with pytest.raises(ConsistencyError):
        TokenSequence(DenseTensor(np.zeros((3, 8), dtype=np.float32)),
                      (CoarseSlot(0),))


def test_weights_validate_catches_shape_drift(tiny_cfg, tiny_weights):
    import dataclasses

    broken = dataclasses.replace(
        tiny_weights, class_token=DenseTensor(np.zeros(5, dtype=np.float32))
    )
    with pytest.raises(ConsistencyError, match="class_token"):
        broken.validate(tiny_cfg)
