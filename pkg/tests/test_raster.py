"""GHSR container round trips, tiling, padding, patches and quantization."""

import numpy as np
import pytest

from builtup import raster
from builtup.errors import FormatError, NumericError, ParameterError, ShapeError
from builtup.raster import (
    HEADER_SIZE,
    RasterGrid,
    iter_patches,
    make_grid,
    pad_constant,
    quantize_probability,
    read_header,
    read_raster,
    rescale_reflectance,
    tile_grid,
    tile_pixels_for,
    write_raster,
)


def random_grid(rng, dtype, bands=3, h=6, w=7, nodata=None):
    if dtype == "u8":
        data = rng.integers(0, 256, size=(bands, h, w), dtype=np.uint8)
        nodata = 255 if nodata is None else nodata
    elif dtype == "i16":
        data = rng.integers(-32768, 32768, size=(bands, h, w), dtype=np.int16)
        nodata = -32768 if nodata is None else nodata
    else:
        data = rng.random((bands, h, w), dtype=np.float32)
        nodata = -1.0 if nodata is None else nodata
    return make_grid(data, dtype, nodata, zone_id="Z1", origin_x=12.5,
                     origin_y=-4.0, pixel_size=10.0)


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", ["u8", "i16", "f32"])
    def test_write_read_write_is_byte_identical(self, tmp_path, dtype):
        rng = np.random.default_rng(hash(dtype) % 1000)
        grid = random_grid(rng, dtype)
        p1, p2 = tmp_path / "a.ghsr", tmp_path / "b.ghsr"
        write_raster(grid, p1)
        write_raster(read_raster(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_is_header_plus_payload(self, tmp_path):
        grid = make_grid(np.zeros((3, 4, 4), dtype=np.uint8), "u8", 255)
        path = tmp_path / "g.ghsr"
        write_raster(grid, path)
        assert path.stat().st_size == HEADER_SIZE + 48

    def test_i16_boundary_value_survives(self, tmp_path):
        data = np.full((1, 2, 2), -32768, dtype=np.int16)
        grid = make_grid(data, "i16", -1)
        path = tmp_path / "g.ghsr"
        write_raster(grid, path)
        assert read_raster(path).data[0, 0, 0] == -32768

    def test_header_fields_preserved(self, tmp_path):
        grid = random_grid(np.random.default_rng(5), "i16")
        path = tmp_path / "g.ghsr"
        write_raster(grid, path)
        back = read_raster(path)
        assert (back.zone_id, back.origin_x, back.origin_y, back.pixel_size,
                back.nodata) == ("Z1", 12.5, -4.0, 10.0, -32768.0)


class TestFormatErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ghsr"
        grid = random_grid(np.random.default_rng(0), "u8")
        write_raster(grid, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="offset 0"):
            read_raster(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.ghsr"
        write_raster(random_grid(np.random.default_rng(0), "u8"), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_raster(path)

    def test_truncated_payload_names_offset(self, tmp_path):
        path = tmp_path / "bad.ghsr"
        write_raster(random_grid(np.random.default_rng(0), "u8"), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="offset"):
            read_raster(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "bad.ghsr"
        path.write_bytes(b"GHSR\x01\x00")
        with pytest.raises(FormatError, match="truncated header"):
            read_header(path)

    def test_nodata_not_representable(self):
        with pytest.raises(FormatError, match="nodata"):
            make_grid(np.zeros((1, 2, 2), dtype=np.uint8), "u8", -5)


class TestRescale:
    def grid(self, values, nodata=-32768):
        return make_grid(np.asarray(values, dtype=np.int16), "i16", nodata)

    def test_divisor_maps_to_unit(self):
        out, _ = rescale_reflectance(self.grid([[[10000]]]), 10000.0)
        assert out.data[0, 0, 0] == 1.0

    def test_clamps_above_one(self):
        out, _ = rescale_reflectance(self.grid([[[12000]]]), 10000.0)
        assert out.data[0, 0, 0] == 1.0

    def test_nodata_masked_and_zeroed(self):
        out, valid = rescale_reflectance(
            self.grid([[[-32768, 5000]]]), 10000.0
        )
        assert not valid[0, 0] and valid[0, 1]
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == np.float32(0.5)

    def test_bad_divisor(self):
        with pytest.raises(ParameterError):
            rescale_reflectance(self.grid([[[1]]]), 0.0)


class TestPad:
    def test_margin_zero_identity(self):
        grid = random_grid(np.random.default_rng(1), "f32")
        assert pad_constant(grid, 0, 0.0) is grid

    def test_dims_grow_by_two_margins(self):
        grid = random_grid(np.random.default_rng(2), "f32", h=10, w=10)
        out = pad_constant(grid, 2, 0.0)
        assert (out.height, out.width) == (14, 14)
        assert np.all(out.data[:, :2, :] == 0.0)
        np.testing.assert_array_equal(out.data[:, 2:-2, 2:-2], grid.data)

    def test_corner_patch_fully_defined_after_padding(self):
        grid = random_grid(np.random.default_rng(3), "f32", h=6, w=6)
        padded = pad_constant(grid, 2, 0.0)
        first = next(iter_patches(padded))
        assert first.center == (0, 0)
        assert first.values.shape == (5, 5, 3)


class TestPatches:
    def test_one_patch_per_pixel(self):
        grid = random_grid(np.random.default_rng(4), "f32", h=10, w=10)
        padded = pad_constant(grid, 2, 0.0)
        assert sum(1 for _ in iter_patches(padded)) == 100

    def test_centers_row_major(self):
        grid = random_grid(np.random.default_rng(5), "f32", h=3, w=4)
        padded = pad_constant(grid, 2, 0.0)
        centers = [p.center for p in iter_patches(padded)]
        assert centers == [(r, c) for r in range(3) for c in range(4)]

    def test_border_patch_contains_pad_values(self):
        grid = random_grid(np.random.default_rng(6), "f32", h=6, w=6)
        padded = pad_constant(grid, 2, 0.0)
        first = next(iter_patches(padded))
        assert np.all(first.values[:2, :, :] == 0.0)
        assert np.all(first.values[:, :2, :] == 0.0)
        np.testing.assert_array_equal(
            first.values[2:, 2:, :], grid.data[:, :3, :3].transpose(1, 2, 0)
        )

    def test_unpadded_too_small(self):
        grid = random_grid(np.random.default_rng(7), "f32", h=4, w=4)
        with pytest.raises(ShapeError):
            next(iter_patches(grid))

    def test_interior_patches_match_after_crop_and_repad(self):
        rng = np.random.default_rng(8)
        grid = random_grid(rng, "f32", h=9, w=8)
        padded = pad_constant(grid, 2, 0.0)
        all_patches = {p.center: p.values for p in iter_patches(padded)}
        # interior pixels have fully in-bounds windows: compare directly
        for r in range(2, 7):
            for c in range(2, 6):
                window = grid.data[:, r - 2:r + 3, c - 2:c + 3]
                np.testing.assert_array_equal(
                    all_patches[(r, c)], window.transpose(1, 2, 0)
                )


class TestTileGrid:
    def test_four_tiles(self):
        tiles = tile_grid(20000, 20000, 10000)
        assert len(tiles) == 4
        assert all(t.rows == 10000 and t.cols == 10000 for t in tiles)

    def test_hundred_km_at_ten_metres(self):
        assert tile_pixels_for(100_000, 10.0) == 10_000

    def test_ragged_last_tile(self):
        tiles = tile_grid(25000, 10000, 10000)
        assert len(tiles) == 3
        assert tiles[-1].rows == 5000 and tiles[-1].cols == 10000

    def test_partition_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            h = int(rng.integers(5, 60))
            w = int(rng.integers(5, 60))
            t = int(rng.integers(5, 25))
            tiles = tile_grid(h, w, t)
            cover = np.zeros((h, w), dtype=int)
            for tile in tiles:
                cover[tile.row0:tile.row0 + tile.rows,
                      tile.col0:tile.col0 + tile.cols] += 1
            assert np.all(cover == 1)

    def test_water_dominated_flag(self):
        valid = np.zeros((10, 10), dtype=bool)
        valid[:5, :5] = True  # only the first tile has data
        tiles = tile_grid(10, 10, 5, valid_mask=valid)
        flags = {(t.tile_row, t.tile_col): t.water_dominated for t in tiles}
        assert flags == {(0, 0): False, (0, 1): True,
                         (1, 0): True, (1, 1): True}

    def test_tile_smaller_than_patch(self):
        with pytest.raises(ParameterError):
            tile_grid(10, 10, 3)


class TestQuantize:
    def test_rounding(self):
        q = quantize_probability(np.array([[0.57]], dtype=np.float32),
                                 np.array([[True]]))
        assert q[0, 0] == 57

    def test_endpoints(self):
        q = quantize_probability(np.array([[0.0, 1.0]], dtype=np.float32),
                                 np.ones((1, 2), dtype=bool))
        assert q.tolist() == [[0, 100]]

    def test_nodata_is_255(self):
        q = quantize_probability(np.array([[0.4, 0.6]], dtype=np.float32),
                                 np.array([[False, True]]))
        assert q[0, 0] == 255 and q[0, 1] == 60

    def test_out_of_range_raises(self):
        with pytest.raises(NumericError):
            quantize_probability(np.array([[1.5]]), np.array([[True]]))

    def test_dequantize_error_bounded(self):
        rng = np.random.default_rng(10)
        p = rng.random((50, 50)).astype(np.float32)
        q = quantize_probability(p, np.ones_like(p, dtype=bool))
        assert np.max(np.abs(q / 100.0 - p)) <= 0.005 + 1e-9
