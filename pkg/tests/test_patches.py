import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxseg import imageio
from ctxseg.errors import DimensionError, UsageError
from ctxseg.patches import NEIGHBOR_NAMES, neighbor_index, neighbor_patches, stitch, tile_image


def test_divisible_grid():
    g = tile_image(np.arange(16.0).reshape(4, 4), 2)
    assert (g.rows, g.cols, g.pad_bottom, g.pad_right) == (2, 2, 0, 0)
    np.testing.assert_array_equal(g.tile(1, 0), [[8, 9], [12, 13]])


def test_ceiling_padding():
    g = tile_image(np.ones((5, 5, 3)), 2)
    assert (g.rows, g.cols, g.pad_bottom, g.pad_right) == (3, 3, 1, 1)
    assert g.tile(2, 2)[1, 1].tolist() == [0, 0, 0]


def test_full_size_grid():
    g = tile_image(np.zeros((1024, 1024), np.uint8), 256)
    assert (g.rows, g.cols) == (4, 4) and g.rows * g.cols == 16


def test_label_padding_uses_pad_value():
    g = tile_image(np.zeros((3, 3), int), 2, pad_value=255)
    assert g.tile(1, 1)[1, 1] == 255 and g.tile(0, 0).max() == 0


def test_corner_edge_center_neighbors():
    g = tile_image(np.random.default_rng(0).random((6, 6)) + 0.1, 2)
    corner = neighbor_patches(g, 0, 0)
    assert [n for n, s in zip(NEIGHBOR_NAMES, corner.synthetic) if s] == ["NW", "N", "NE", "W", "SW"]
    assert neighbor_patches(g, 1, 1).num_synthetic == 0
    edge = neighbor_patches(g, 0, 1)
    assert [n for n, s in zip(NEIGHBOR_NAMES, edge.synthetic) if s] == ["NW", "N", "NE"]


def test_interior_neighbors_equal_grid_tiles():
    g = tile_image(np.random.default_rng(1).random((9, 9, 2)), 3)
    ns = neighbor_patches(g, 1, 1)
    expected = [g.tile(0, 0), g.tile(0, 1), g.tile(0, 2), g.tile(1, 0), g.tile(1, 2), g.tile(2, 0),
                g.tile(2, 1), g.tile(2, 2)]
    for k in range(8):
        np.testing.assert_array_equal(ns.tiles[k], expected[k])


def test_neighbor_out_of_range():
    g = tile_image(np.zeros((4, 4)), 2)
    with pytest.raises(UsageError):
        neighbor_patches(g, 2, 0)


def test_neighbor_index_matches_neighbor_patches():
    img = np.random.default_rng(2).random((10, 14)) + 0.1
    g = tile_image(img, 4)
    idx = neighbor_index(g.rows, g.cols)
    flat = np.concatenate([g.flat(), np.zeros((1,) + g.tile_shape)])
    for r in range(g.rows):
        for c in range(g.cols):
            np.testing.assert_array_equal(flat[idx[r * g.cols + c]], neighbor_patches(g, r, c).tiles)


def test_stitch_round_trips():
    x = np.random.default_rng(3).random((4, 6, 3))
    np.testing.assert_array_equal(stitch(tile_image(x, 2).patches, tile_image(x, 2)), x)
    y = np.random.default_rng(4).integers(0, 5, (5, 5))
    g = tile_image(y, 2)
    np.testing.assert_array_equal(stitch(g.patches, g), y)


def test_stitch_every_pixel_from_exactly_one_patch_pixel():
    rows, cols, S = 3, 4, 5
    g = tile_image(np.zeros((13, 17)), S)
    assert (g.rows, g.cols) == (rows, cols)
    # encode (row, col, i, j) uniquely into each patch pixel
    codes = np.arange(rows * cols * S * S).reshape(rows, cols, S, S)
    out = stitch(codes, g)
    hits = np.zeros(codes.size, int)
    for y in range(13):
        for x in range(17):
            code = out[y, x]
            r, c, i, j = np.unravel_index(code, codes.shape)
            assert (r * S + i, c * S + j) == (y, x)
            hits[code] += 1
    assert hits.max() == 1 and hits.sum() == 13 * 17


def test_stitch_shape_mismatch():
    g = tile_image(np.zeros((4, 4)), 2)
    with pytest.raises(DimensionError):
        stitch(np.zeros((3, 2, 2, 2)), g)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31))
def test_tile_stitch_identity_property(h, w, s, seed):
    x = np.random.default_rng(seed).random((h, w))
    g = tile_image(x, s)
    assert g.rows * s == h + g.pad_bottom and 0 <= g.pad_bottom < s
    assert g.cols * s == w + g.pad_right and 0 <= g.pad_right < s
    np.testing.assert_array_equal(stitch(g.patches, g), x)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6))
def test_synthetic_counts_property(rows, cols):
    g = tile_image(np.ones((rows * 2, cols * 2)), 2)
    for r in range(rows):
        for c in range(cols):
            ns = neighbor_patches(g, r, c)
            on_r, on_c = r in (0, rows - 1), c in (0, cols - 1)
            expected = 5 if (on_r and on_c) else 3 if (on_r or on_c) else 0
            assert ns.num_synthetic == expected
            for k in range(8):
                assert (not ns.tiles[k].any()) == ns.synthetic[k]


@pytest.mark.parametrize("suffix", [".png", ".pgm", ".ppm"])
def test_image_io_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(5)
    channels = 1 if suffix == ".pgm" else 3
    raw = rng.integers(0, 256, (7, 9, channels)).astype(np.uint8)
    img = raw / 255.0
    imageio.write_image(tmp_path / f"a{suffix}", img)
    np.testing.assert_array_equal(imageio.read_image(tmp_path / f"a{suffix}"), img)


def test_label_io_and_dataset_layout(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    lab = np.random.default_rng(6).integers(0, 3, (6, 6))
    imageio.write_image(tmp_path / "images" / "x0.png", np.zeros((6, 6, 3)))
    imageio.write_labels(tmp_path / "labels" / "x0.pgm", lab)
    ((stem, img, got),) = imageio.load_dataset(tmp_path)
    assert stem == "x0" and img.shape == (6, 6, 3)
    np.testing.assert_array_equal(got, lab)
