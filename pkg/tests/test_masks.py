import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadfine.masks import (
    IncoherencePyramid,
    as_mask,
    boundary_band,
    contour,
    downsample_nn,
    incoherence,
    incoherence_pyramid,
    load_pgm,
    mask_at_level,
    orpool_downsample,
    reconstruction_error,
    save_pgm,
    upsample_nn,
)


def M(rows):
    return np.array(rows, dtype=np.uint8)


def masks_2d(max_side=12, even=False):
    sides = st.integers(1, max_side).map(lambda n: 2 * n) if even else st.integers(1, max_side)
    return st.tuples(sides, sides).flatmap(
        lambda hw: st.binary(min_size=hw[0] * hw[1], max_size=hw[0] * hw[1]).map(
            lambda b: (np.frombuffer(b, dtype=np.uint8).reshape(hw) & 1).copy()
        )
    )


class TestDownsample:
    def test_top_left_convention(self):
        assert downsample_nn(M([[1, 0], [0, 1]])).tolist() == [[1]]

    def test_all_ones(self):
        assert downsample_nn(np.ones((4, 4), np.uint8)).tolist() == [[1, 1], [1, 1]]

    def test_all_zeros(self):
        assert downsample_nn(np.zeros((2, 2), np.uint8)).tolist() == [[0]]

    def test_odd_pads_bottom_right(self):
        # top-left samples of the padded 4x4 all land inside the original 3x3
        out = downsample_nn(M([[1, 1, 1], [1, 1, 1], [1, 1, 1]]))
        assert out.tolist() == [[1, 1], [1, 1]]
        # but or-pooling sees the zero padding
        assert orpool_downsample(M([[0, 0, 1], [0, 0, 0], [1, 0, 0]])).tolist() == [
            [0, 1],
            [1, 0],
        ]


class TestUpsample:
    def test_single_pixel(self):
        assert upsample_nn(M([[1]])).tolist() == [[1, 1], [1, 1]]

    def test_row(self):
        assert upsample_nn(M([[1, 0]])).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0]]

    @given(masks_2d(max_side=6))
    @settings(max_examples=50)
    def test_round_trip_on_block_constant(self, m):
        blocky = upsample_nn(m)
        assert np.array_equal(upsample_nn(downsample_nn(blocky)), blocky)


class TestOrPool:
    @pytest.mark.parametrize(
        "mask,expect",
        [
            ([[1, 0], [0, 0]], [[1]]),
            ([[0, 0], [0, 0]], [[0]]),
            ([[0, 1], [1, 1]], [[1]]),
        ],
    )
    def test_single_block(self, mask, expect):
        assert orpool_downsample(M(mask)).tolist() == expect


class TestIncoherence:
    def test_mixed_block(self):
        assert incoherence(M([[1, 1], [1, 0]])).tolist() == [[1]]

    def test_left_columns_constant_blocks(self):
        m = np.zeros((4, 4), np.uint8)
        m[:, :2] = 1
        assert incoherence(m).tolist() == [[0, 0], [0, 0]]

    @pytest.mark.parametrize("value", [0, 1])
    def test_constant_mask_all_zero(self, value):
        m = np.full((6, 8), value, np.uint8)
        assert not incoherence(m).any()

    @given(masks_2d(max_side=8, even=True))
    @settings(max_examples=100)
    def test_block_oracle_equivalence(self, m):
        d = incoherence(m)
        h, w = m.shape
        blocks = m.reshape(h // 2, 2, w // 2, 2)
        mixed = blocks.max(axis=(1, 3)) != blocks.min(axis=(1, 3))
        assert np.array_equal(d.astype(bool), mixed)

    @given(masks_2d(max_side=8, even=True))
    @settings(max_examples=100)
    def test_locality_blocks_contain_contour(self, m):
        d = incoherence(m)
        edge = contour(m)
        for r, c in zip(*np.nonzero(d)):
            assert edge[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].any()

    @given(masks_2d(max_side=8, even=True))
    @settings(max_examples=100)
    def test_round_trip_iff_coherent(self, m):
        rec = upsample_nn(downsample_nn(m))
        assert np.array_equal(rec, m) == (not incoherence(m).any())

    def test_reconstruction_error_is_unpooled_field(self):
        m = M([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]])
        e = reconstruction_error(m)
        assert np.array_equal(orpool_downsample(e), incoherence(m))
        assert np.array_equal(e, m ^ upsample_nn(downsample_nn(m)))


class TestIncoherencePyramid:
    def test_constant_gt_all_zero(self):
        pyr = incoherence_pyramid(np.ones((32, 32), np.uint8), depth=3)
        assert pyr.depth == 3
        assert [lvl.shape for lvl in pyr.levels] == [(4, 4), (8, 8), (16, 16)]
        assert all(not lvl.any() for lvl in pyr.levels)

    def test_depth_one_is_plain_incoherence(self):
        rng = np.random.default_rng(0)
        gt = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        pyr = incoherence_pyramid(gt, depth=1)
        assert np.array_equal(pyr.levels[0], incoherence(gt))

    def test_disk_levels_hug_contour(self):
        yy, xx = np.mgrid[:224, :224]
        gt = (((yy - 112) ** 2 + (xx - 112) ** 2) <= 40 * 40).astype(np.uint8)
        pyr = incoherence_pyramid(gt, depth=3)
        m = gt
        for lvl in reversed(pyr.levels):  # finest first: compare against its source mask
            band = boundary_band(m, 1)
            hits = np.nonzero(lvl)
            blocks = upsample_nn(lvl)
            assert np.all(band[blocks.astype(bool)] <= 1)  # shapes line up
            for r, c in zip(*hits):
                assert band[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].any()
            # exact per-level value against direct blockwise recomputation
            assert np.array_equal(lvl, incoherence(m))
            m = downsample_nn(m)

    def test_indivisible_resolution_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            incoherence_pyramid(np.zeros((20, 20), np.uint8), depth=3)

    def test_closure_adds_parents(self):
        l1 = np.zeros((2, 2), np.uint8)
        l2 = np.zeros((4, 4), np.uint8)
        l2[3, 3] = 1
        l3 = np.zeros((8, 8), np.uint8)
        pyr = IncoherencePyramid((l1, l2, l3))
        assert not pyr.nested()
        closed = pyr.closed()
        assert closed.nested()
        assert closed.levels[0][1, 1] == 1
        assert closed.levels[0].sum() == 1

    def test_mask_at_level_resolutions(self):
        gt = np.zeros((224, 224), np.uint8)
        gt[40:180, 60:200] = 1
        assert mask_at_level(gt, 1).shape == (28, 28)
        assert mask_at_level(gt, 2).shape == (56, 56)
        assert mask_at_level(gt, 3).shape == (112, 112)
        assert np.array_equal(mask_at_level(gt, 3), downsample_nn(gt))


class TestBoundaryBand:
    def test_all_ones_empty(self):
        assert not boundary_band(np.ones((5, 5), np.uint8), 1).any()

    def test_all_zeros_empty(self):
        assert not boundary_band(np.zeros((5, 5), np.uint8), 2).any()

    def test_single_pixel_d1_is_3x3(self):
        m = np.zeros((5, 5), np.uint8)
        m[2, 2] = 1
        band = boundary_band(m, 1)
        expect = np.zeros((5, 5), np.uint8)
        expect[1:4, 1:4] = 1
        assert band.sum() == 9
        assert np.array_equal(band, expect)

    @given(masks_2d(max_side=8), st.integers(1, 3), st.integers(0, 2))
    @settings(max_examples=60)
    def test_monotone_in_distance(self, m, d1, extra):
        b1 = boundary_band(m, d1)
        b2 = boundary_band(m, d1 + extra)
        assert not np.any(b1 & ~b2)

    def test_band_matches_chebyshev_oracle(self):
        rng = np.random.default_rng(3)
        m = (rng.random((9, 9)) < 0.4).astype(np.uint8)
        d = 2
        edge = np.transpose(np.nonzero(contour(m)))
        expect = np.zeros_like(m)
        for r in range(9):
            for c in range(9):
                if edge.size and np.max(np.abs(edge - [r, c]), axis=1).min() <= d:
                    expect[r, c] = 1
        assert np.array_equal(boundary_band(m, d), expect)


class TestPgm:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        m = (rng.random((33, 17)) < 0.5).astype(np.uint8)
        p = tmp_path / "m.pgm"
        save_pgm(p, m)
        assert np.array_equal(load_pgm(p), m)
        first = p.read_bytes()
        save_pgm(p, load_pgm(p))
        assert p.read_bytes() == first

    def test_threshold_at_128(self, tmp_path):
        p = tmp_path / "gray.pgm"
        payload = bytes([0, 127, 128, 255])
        p.write_bytes(b"P5\n2 2\n255\n" + payload)
        assert load_pgm(p).tolist() == [[0, 0], [1, 1]]

    def test_reject_non_pgm(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ValueError, match="P5"):
            load_pgm(p)


def test_as_mask_rejects_values_outside_binary():
    with pytest.raises(ValueError, match="values"):
        as_mask(np.array([[0, 2]]))
