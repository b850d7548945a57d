"""Tiling search space, frame placement, and the similarity metrics."""

import numpy as np
import pytest

from framekv import kvmodel as KV
from framekv.layout import (
    AXES,
    PAD_BYTE,
    RESOLUTION_GRIDS,
    RESOLUTION_TILES,
    FramePlan,
    LayoutConfig,
    apply_layout,
    assemble_frames,
    dimension_similarity_report,
    disassemble_frames,
    identity_layout,
    inverse_layout,
    plan_inter_frame,
    psnr,
    search_intra_layout,
    slice_tokens,
    ssim,
    tiling_candidates,
    unslice_tokens,
)


def test_candidate_counts():
    assert len(tiling_candidates(32, 128)) == 48
    assert len(tiling_candidates(8, 32)) == 24
    assert len(tiling_candidates(1, 1)) == 1
    keys = [c.key() for c in tiling_candidates(32, 128)]
    assert len(set(keys)) == 48


def test_candidate_invariants():
    for cfg in tiling_candidates(16, 64):
        assert cfg.a_h * cfg.b_h == 16
        assert cfg.a_d * cfg.b_d == 64
        assert cfg.tile_h * cfg.tile_w == 16 * 64


def test_layout_config_validation():
    with pytest.raises(ValueError):
        LayoutConfig(12, 64, 3, 4, 8, 8)
    with pytest.raises(ValueError):
        LayoutConfig(16, 64, 2, 4, 8, 8)
    with pytest.raises(ValueError):
        tiling_candidates(24, 64)


def test_layout_config_json_round_trip():
    cfg = LayoutConfig(16, 64, 4, 4, 8, 8)
    obj = cfg.to_json()
    assert obj["tile_h"] == 32 and obj["tile_w"] == 32
    assert obj["resolution_tiles"] == RESOLUTION_TILES
    assert LayoutConfig.from_json(obj) == cfg


def test_apply_inverse_bijection_all_candidates():
    rng = np.random.default_rng(11)
    for cfg in tiling_candidates(8, 16):
        t = rng.integers(-127, 128, size=(1, 3, 128)).astype(np.int8)
        tile = apply_layout(t, cfg)
        assert tile.shape == (3, cfg.tile_h, cfg.tile_w)
        back = inverse_layout(tile, cfg)
        assert np.array_equal(back, t)


def test_identity_layout_is_flat_row():
    cfg = identity_layout(4, 8)
    assert (cfg.tile_h, cfg.tile_w) == (1, 32)
    t = np.arange(3 * 32, dtype=np.int8).reshape(1, 3, 32)
    tile = apply_layout(t, cfg)
    assert np.array_equal(tile[:, 0, :], t[0])


def test_slice_tokens_views():
    q = KV.quantize(KV.gen_synthetic_kv(5, 6, 2, 4, 0.5, seed=0), group_size=8)
    flat = slice_tokens(q, triplet_index=1)
    assert flat.shape == (5, 3, 8)
    assert np.array_equal(flat, q.values[:, 3:6].reshape(5, 3, 8))
    assert np.array_equal(unslice_tokens(flat, 2, 4), q.values[:, 3:6])
    # a 3-layer slab passes straight through regardless of the index arg
    slab = q.layer_triplet(0)
    assert np.array_equal(slice_tokens(slab), q.values[:, :3].reshape(5, 3, 8))


def test_placement_small_plan_by_hand():
    # 2 tiles per frame, groups of F=2: worked out on paper for T=10
    cfg = identity_layout(2, 2)
    plan = FramePlan(10, 2, cfg, F=2)
    expected = {
        0: (0, 0, 0),
        1: (1, 0, 0),
        2: (0, 0, 1),
        3: (1, 0, 1),
        4: (2, 0, 0),
        5: (3, 0, 0),
        6: (2, 0, 1),
        7: (3, 0, 1),
        8: (4, 0, 0),
        9: (5, 0, 0),
    }
    for i, want in expected.items():
        assert plan.placement(i) == want
    assert plan.frame_count == 6
    assert plan.frame_slots(4) == [(8, 0, 0)]
    assert plan.frame_slots(5) == [(9, 0, 0)]
    with pytest.raises(ValueError):
        plan.placement(10)


def test_placement_r240_corners():
    cfg = identity_layout(32, 128)
    plan = FramePlan(64, "R240", cfg, F=4)
    assert plan.frame_count == 4
    assert (plan.grid_rows, plan.grid_cols) == RESOLUTION_GRIDS["R240"]
    assert plan.placement(0) == (0, 0, 0)
    assert plan.placement(1) == (1, 0, 0)
    assert plan.placement(4) == (0, 0, 1)
    assert plan.placement(63) == (3, 3, 3)


def test_frame_count_matches_enumeration():
    cfg = identity_layout(2, 2)
    for T in (1, 3, 4, 7, 16, 33, 100):
        for tpf in (1, 2, 4):
            for F in (1, 2, 4):
                plan = FramePlan(T, tpf, cfg, F=F)
                seen = {plan.placement(i)[0] for i in range(T)}
                assert plan.frame_count == max(seen) + 1
                # every tensor appears exactly once across all frame_slots
                cover = []
                for f in range(plan.frame_count):
                    cover.extend(i for i, _, _ in plan.frame_slots(f))
                assert sorted(cover) == list(range(T))


def test_placement_bijective_within_frame():
    cfg = identity_layout(4, 4)
    plan = FramePlan(50, "R240", cfg)
    spots = [plan.placement(i) for i in range(50)]
    assert len(set(spots)) == 50


def test_assemble_disassemble_round_trip():
    rng = np.random.default_rng(5)
    cfg = LayoutConfig(4, 8, 2, 2, 4, 2)
    for T in (1, 5, 11, 32):
        plan = FramePlan(T, 4, cfg, F=3)
        tensors = rng.integers(-127, 128, size=(T, 3, 32)).astype(np.int8)
        frames = assemble_frames(tensors, plan)
        assert frames.dtype == np.uint8
        assert frames.shape == (plan.frame_count, 3, plan.frame_h, plan.frame_w)
        assert np.array_equal(disassemble_frames(frames, plan), tensors)


def test_assemble_pads_unused_tiles():
    cfg = identity_layout(2, 2)
    plan = FramePlan(5, 2, cfg, F=2)
    tensors = np.full((5, 3, 4), 50, np.int8)
    frames = assemble_frames(tensors, plan)
    # frame 2 holds only tensor 4 in slot 0; slot 1 is padding
    pad_region = frames[2, :, :, plan.tile_w :]
    assert np.all(pad_region == PAD_BYTE)
    used = frames[2, :, :, : plan.tile_w]
    assert np.all(used == 50 + 128)


def test_plan_digest_stability():
    cfg = identity_layout(8, 16)
    a = plan_inter_frame(100, "R480", cfg).digest()
    b = plan_inter_frame(100, "R480", cfg).digest()
    c = plan_inter_frame(101, "R480", cfg).digest()
    assert a == b
    assert a != c
    assert len(a) == 16


def test_ssim_oracles():
    rng = np.random.default_rng(9)
    x = rng.integers(0, 256, size=(32, 32)).astype(np.float64)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    black = np.zeros((16, 16))
    white = np.full((16, 16), 255.0)
    assert ssim(black, white) < 0.01
    noisy = x + rng.normal(0, 20, x.shape)
    assert 0.0 < ssim(x, noisy) < 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_partial_windows():
    # 12x20 exercises both the vectorized interior and edge windows
    rng = np.random.default_rng(3)
    x = rng.integers(0, 256, size=(12, 20)).astype(np.float64)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_psnr_oracles():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 16.0)
    # mse 256 -> 10*log10(255^2/256) = 24.0483 dB
    assert psnr(a, b) == pytest.approx(24.0483, abs=1e-3)
    assert psnr(a, a) == 99.0
    assert psnr(a, np.full((8, 8), 255.0)) == pytest.approx(0.0, abs=1e-9)


def test_dimension_similarity_report_shape():
    q = KV.quantize(
        KV.gen_synthetic_kv(12, 3, 4, 8, 0.9, seed=4, channel_smoothness=0.3),
        group_size=8,
    )
    rep = dimension_similarity_report(q)
    assert set(rep) == set(AXES)
    for axis in rep.values():
        # SSIM of anticorrelated windows dips below zero; bounded by [-1, 1]
        assert -1.0 <= axis["ssim"] <= 1.0
        assert axis["psnr"] > 0.0
    with pytest.raises(ValueError):
        dimension_similarity_report(
            KV.quantize(KV.gen_synthetic_kv(4, 1, 2, 2, 0.5, seed=0), group_size=2)
        )


def test_search_tie_breaks_to_smallest_key():
    corpus = [KV.quantize(KV.gen_synthetic_kv(8, 3, 4, 8, 0.5, seed=1), group_size=8)]
    best = search_intra_layout(corpus, lambda chunk, cfg: 1000)
    assert best == identity_layout(4, 8)


def test_search_minimizes_and_reports():
    corpus = [KV.quantize(KV.gen_synthetic_kv(8, 3, 4, 8, 0.5, seed=2), group_size=8)]

    def encoder(chunk, cfg):
        return 7 if (cfg.tile_h, cfg.tile_w) == (4, 8) else 100

    trail = []
    best = search_intra_layout(corpus, encoder, report=trail)
    assert (best.tile_h, best.tile_w) == (4, 8)
    assert len(trail) == len(tiling_candidates(4, 8))
    assert min(total for _, total in trail) == 7
    with pytest.raises(ValueError):
        search_intra_layout([], encoder)
