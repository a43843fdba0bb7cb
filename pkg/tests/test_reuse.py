"""Warm-start (feature reuse) masking and invariance tests."""

import numpy as np
import pytest

from cft.errors import ConsistencyError
from cft.model import FineSlot, embed_patches, forward
from cft.reuse import build_reuse_tokens
from cft.tensor import DenseTensor


@pytest.fixture()
def stages(tiny_cfg, tiny_weights, make_image):
    """A coarse run plus a mixed fine sequence for selection (1, 3)."""
    img = make_image(21)
    coarse_seq = embed_patches(img, "coarse", None, tiny_cfg, tiny_weights)
    _, trace = forward(coarse_seq, tiny_cfg, tiny_weights)
    selection = (1, 3)
    fine_seq = embed_patches(img, "fine", selection, tiny_cfg, tiny_weights)
    return coarse_seq, trace.final_tokens, fine_seq, selection


def _full_fine(cfg, weights):
    img = DenseTensor(np.zeros((3, cfg.image_px, cfg.image_px), dtype=np.float32))
    return embed_patches(img, "fine", None, cfg, weights)


def test_empty_selection_is_all_zeros(tiny_cfg, tiny_weights, stages):
    coarse_seq, final_tokens, _, _ = stages
    fine_seq = _full_fine(tiny_cfg, tiny_weights)
    out = build_reuse_tokens(final_tokens, coarse_seq.layout, fine_seq, (),
                             tiny_weights.reuse, tiny_cfg)
    assert not out.array.any()


def test_nonzero_rows_are_exactly_selected_children(tiny_cfg, tiny_weights, stages):
    coarse_seq, final_tokens, fine_seq, selection = stages
    out = build_reuse_tokens(final_tokens, coarse_seq.layout, fine_seq,
                             selection, tiny_weights.reuse, tiny_cfg)
    nonzero = {i for i in range(out.shape[0]) if out.array[i].any()}
    expected = {
        1 + i for i, slot in enumerate(fine_seq.layout)
        if isinstance(slot, FineSlot) and slot.parent + 1 in selection
    }
    assert nonzero == expected
    assert len(nonzero) == 4 * len(selection)
    assert not out.array[0].any()  # class row always zero


def test_four_children_bitwise_identical(tiny_cfg, tiny_weights, stages):
    coarse_seq, final_tokens, fine_seq, selection = stages
    out = build_reuse_tokens(final_tokens, coarse_seq.layout, fine_seq,
                             selection, tiny_weights.reuse, tiny_cfg)
    by_parent = {}
    for i, slot in enumerate(fine_seq.layout):
        if isinstance(slot, FineSlot) and slot.parent + 1 in selection:
            by_parent.setdefault(slot.parent, []).append(out.array[1 + i])
    for rows in by_parent.values():
        assert len(rows) == 4
        for row in rows[1:]:
            assert (row == rows[0]).all()


def test_invariant_to_unselected_coarse_tokens(tiny_cfg, tiny_weights, stages):
    coarse_seq, final_tokens, fine_seq, selection = stages
    base = build_reuse_tokens(final_tokens, coarse_seq.layout, fine_seq,
                              selection, tiny_weights.reuse, tiny_cfg)
    mutated = final_tokens.array.copy()
    mutated[0] += 100.0   # class token: never reused
    mutated[2] -= 50.0    # patch 2, not selected
    mutated[4] *= -3.0    # patch 4, not selected
    again = build_reuse_tokens(DenseTensor(mutated), coarse_seq.layout,
                               fine_seq, selection, tiny_weights.reuse,
                               tiny_cfg)
    assert (base.array == again.array).all()


def test_selection_outside_layout_rejected(tiny_cfg, tiny_weights, stages):
    coarse_seq, final_tokens, fine_seq, _ = stages
    with pytest.raises(ConsistencyError):
        build_reuse_tokens(final_tokens, coarse_seq.layout, fine_seq, (9,),
                           tiny_weights.reuse, tiny_cfg)


def test_row_count_mismatch_rejected(tiny_cfg, tiny_weights, stages):
    coarse_seq, _, fine_seq, selection = stages
    short = DenseTensor(np.zeros((3, tiny_cfg.embed_dim), dtype=np.float32))
    with pytest.raises(ConsistencyError):
        build_reuse_tokens(short, coarse_seq.layout, fine_seq, selection,
                           tiny_weights.reuse, tiny_cfg)
