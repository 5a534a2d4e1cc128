"""Round-trip and error-path tests for raster I/O."""

import numpy as np
import pytest
from PIL import Image

from despeckle.errors import FormatError
from despeckle.rasters import RasterInfo, read_raster, supported, write_raster


def checker(h, w, hi=200.0):
    img = np.zeros((h, w))
    img[::2, ::2] = hi
    img[1::2, 1::2] = hi
    return img


class TestSupported:
    @pytest.mark.parametrize("name,ok", [
        ("a.png", True),
        ("b.PGM", True),
        ("c.raw", True),
        ("d.tif", False),
        ("e", False),
    ])
    def test_extension_dispatch(self, name, ok):
        assert supported(name) is ok


class TestPng:
    def test_8bit_round_trip(self, tmp_path):
        path = tmp_path / "img.png"
        src = checker(12, 10, hi=200.0)
        write_raster(path, src, RasterInfo("png", 10, 12, 255))
        arr, info = read_raster(path)
        np.testing.assert_array_equal(arr, src)
        assert (info.kind, info.width, info.height, info.maxval) == ("png", 10, 12, 255)

    def test_16bit_round_trip(self, tmp_path):
        path = tmp_path / "img.png"
        src = checker(8, 8, hi=40_000.0)
        write_raster(path, src, RasterInfo("png", 8, 8, 65535))
        arr, info = read_raster(path)
        np.testing.assert_array_equal(arr, src)
        assert info.maxval == 65535

    def test_write_rounds_and_clips(self, tmp_path):
        path = tmp_path / "img.png"
        src = np.array([[-5.0, 0.4, 0.6], [254.5, 300.0, 128.0]])
        write_raster(path, src, RasterInfo("png", 3, 2, 255))
        arr, _ = read_raster(path)
        np.testing.assert_array_equal(arr, [[0, 0, 1], [254, 255, 128]])

    def test_rgb_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.new("RGB", (8, 8), (10, 20, 30)).save(path)
        with pytest.raises(FormatError, match="mode"):
            read_raster(path)


class TestPgm:
    def test_8bit_round_trip(self, tmp_path):
        path = tmp_path / "img.pgm"
        src = checker(6, 9, hi=180.0)
        write_raster(path, src, RasterInfo("pgm", 9, 6, 255))
        arr, info = read_raster(path)
        np.testing.assert_array_equal(arr, src)
        assert info.kind == "pgm"
        assert info.maxval == 255

    def test_16bit_round_trip(self, tmp_path):
        path = tmp_path / "img.pgm"
        src = checker(5, 4, hi=60_000.0)
        src[0, 1] = 300.6  # rounds to 301
        write_raster(path, src, RasterInfo("pgm", 4, 5, 65535))
        arr, info = read_raster(path)
        assert arr[0, 1] == 301
        assert info.maxval == 65535

    def test_header_comments(self, tmp_path):
        path = tmp_path / "img.pgm"
        payload = bytes(range(12))
        path.write_bytes(b"P5 # a comment\n# another\n4 3\n255\n" + payload)
        arr, info = read_raster(path)
        assert arr.shape == (3, 4)
        np.testing.assert_array_equal(arr.ravel(), np.arange(12))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(4))
        with pytest.raises(FormatError, match="magic"):
            read_raster(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(FormatError, match="truncated"):
            read_raster(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P5\n4")
        with pytest.raises(FormatError):
            read_raster(path)

    def test_maxval_out_of_range(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P5\n2 2\n0\n" + bytes(4))
        with pytest.raises(FormatError, match="maxval"):
            read_raster(path)


class TestRaw:
    def test_float_round_trip(self, tmp_path):
        path = tmp_path / "img.raw"
        src = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
        write_raster(path, src, RasterInfo("raw", 5, 7, None))
        arr, info = read_raster(path)
        np.testing.assert_array_equal(arr, src.astype(np.float64))
        assert info.maxval is None
        assert (tmp_path / "img.raw.json").exists()

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "img.raw"
        path.write_bytes(bytes(16))
        with pytest.raises(FormatError, match="sidecar"):
            read_raster(path)

    def test_invalid_sidecar_json(self, tmp_path):
        path = tmp_path / "img.raw"
        path.write_bytes(bytes(16))
        (tmp_path / "img.raw.json").write_text("{not json")
        with pytest.raises(FormatError, match="JSON"):
            read_raster(path)

    def test_sidecar_missing_fields(self, tmp_path):
        path = tmp_path / "img.raw"
        path.write_bytes(bytes(16))
        (tmp_path / "img.raw.json").write_text('{"width": 2}')
        with pytest.raises(FormatError, match="width and height"):
            read_raster(path)

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "img.raw"
        np.zeros(6, dtype="<f4").tofile(path)
        (tmp_path / "img.raw.json").write_text('{"height": 2, "width": 4}')
        with pytest.raises(FormatError, match="sidecar says"):
            read_raster(path)


class TestWriteValidation:
    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_raster(tmp_path / "x.png", np.zeros((2, 3, 4)), RasterInfo("png", 3, 2, 255))

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(FormatError):
            write_raster(tmp_path / "x.tif", np.zeros((2, 2)), RasterInfo("png", 2, 2, 255))
        with pytest.raises(FormatError):
            read_raster(tmp_path / "x.tif")

    def test_bad_maxval(self, tmp_path):
        with pytest.raises(FormatError):
            write_raster(tmp_path / "x.png", np.zeros((2, 2)), RasterInfo("png", 2, 2, 1023))
