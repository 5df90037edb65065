import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from calibration import TransformationMatrix, reconstruct_spectrum, wiener_fit
from reconstruction import (
    LinearRgbImage,
    assemble_views,
    extract_view,
    load_image,
    reconstruct_cube,
    save_image,
    srgb_decode,
    srgb_encode,
    write_meta,
)
from spectral import GRID, SpectralCube
from utils.errors import FormatError, RejectedInputError


def _pixel(v):
    return np.full((1, 1, 3), v, dtype=np.uint8)


def test_srgb_endpoints_and_midpoint():
    assert srgb_decode(_pixel(0)).data[0, 0, 0] == 0.0
    assert srgb_decode(_pixel(255)).data[0, 0, 0] == 1.0
    assert srgb_decode(_pixel(128)).data[0, 0, 0] == pytest.approx(0.21586, abs=1e-5)


@given(st.integers(0, 255), st.integers(0, 255))
def test_srgb_decode_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert srgb_decode(_pixel(lo)).data[0, 0, 0] <= srgb_decode(_pixel(hi)).data[0, 0, 0]


def test_srgb_encode_inverts_decode():
    codes = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    assert np.array_equal(srgb_encode(srgb_decode(codes).data), codes)


def test_srgb_decode_rejects_wrong_shape():
    with pytest.raises(RejectedInputError):
        srgb_decode(np.zeros((2, 2), dtype=np.uint8))


def test_image_error_names_pixel():
    data = np.zeros((2, 3, 3))
    data[1, 2, 0] = np.nan
    with pytest.raises(RejectedInputError, match=r"x=2, y=1"):
        LinearRgbImage(width=3, height=2, data=data)


def test_single_pixel_cube_equals_reconstruct_spectrum(default_patches):
    m = wiener_fit(default_patches[0])
    rgb = np.array([0.3, 0.4, 0.5])
    cube, _ = reconstruct_cube(m, LinearRgbImage(1, 1, rgb))
    assert np.array_equal(cube.data[:, 0, 0], reconstruct_spectrum(m, rgb).values.astype(np.float32))


def test_cube_matches_per_pixel_oracle(rng):
    m = TransformationMatrix(rows=rng.uniform(0.0, 0.3, size=(24, 3)))
    img = LinearRgbImage(8, 8, rng.uniform(0, 1, size=(8, 8, 3)))
    cube, meta = reconstruct_cube(m, img)
    oracle = np.empty((24, 8, 8))
    for y in range(8):
        for x in range(8):
            oracle[:, y, x] = m.rows @ img.data[y, x]
    assert np.max(np.abs(cube.data - np.clip(oracle, 0, 1).astype(np.float32))) <= 1e-7
    assert cube.grid == GRID and cube.bands == 24
    assert meta.matrix_id == m.checksum()


def test_clamped_fraction_counts_out_of_range_values():
    rows = np.zeros((24, 3))
    rows[:12, 0] = 2.0  # 12 bands overshoot on a full-red pixel
    img = LinearRgbImage(2, 1, np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]))
    cube, meta = reconstruct_cube(TransformationMatrix(rows=rows), img)
    assert meta.clamped_fraction == pytest.approx(12 / (2 * 24))
    assert cube.data.max() == 1.0


def test_tiling_and_threads_do_not_change_the_cube(rng):
    m = TransformationMatrix(rows=rng.uniform(-0.2, 0.6, size=(24, 3)))
    img = LinearRgbImage(5, 41, rng.uniform(0, 1, size=(41, 5, 3)))
    single, _ = reconstruct_cube(m, img, threads=1)
    many, _ = reconstruct_cube(m, img, threads=4)
    assert single == many


def test_extract_and_assemble_views(rng):
    data = rng.uniform(0, 1, size=(24, 3, 4)).astype(np.float32)
    cube = SpectralCube(4, 3, data)
    views = [extract_view(cube, k) for k in range(24)]
    assert assemble_views(views) == cube
    assert views[5].mean(dtype=np.float64) == pytest.approx(cube.band_means()[5], abs=1e-12)


def test_constant_band_view():
    data = np.zeros((24, 2, 2), dtype=np.float32)
    data[0] = 0.5
    assert np.all(extract_view(SpectralCube(2, 2, data), 0) == 0.5)


def test_view_index_out_of_range(rng):
    cube = SpectralCube(1, 1, np.zeros(24, dtype=np.float32))
    with pytest.raises(RejectedInputError):
        extract_view(cube, 24)
    with pytest.raises(RejectedInputError):
        assemble_views([np.zeros((1, 1))] * 23)


def test_png_roundtrip_and_decode_flag(tmp_path, rng):
    codes = rng.integers(0, 256, size=(4, 5, 3)).astype(np.uint8)
    save_image(tmp_path / "x.png", codes)
    decoded = load_image(tmp_path / "x.png")
    plain = load_image(tmp_path / "x.png", decode_srgb=False)
    assert decoded.width == 5 and decoded.height == 4
    assert np.array_equal(decoded.data, srgb_decode(codes).data)
    assert np.array_equal(plain.data, codes / 255.0)


def test_unsupported_image_is_format_error(tmp_path):
    path = tmp_path / "x.png"
    path.write_bytes(b"not an image at all")
    with pytest.raises(FormatError):
        load_image(path)


def test_meta_sidecar(tmp_path, default_patches):
    m = wiener_fit(default_patches[0])
    _, meta = reconstruct_cube(m, LinearRgbImage(1, 1, [0.1, 0.2, 0.3]), srgb_decoded=True)
    write_meta(tmp_path / "m.json", meta)
    payload = json.loads((tmp_path / "m.json").read_text())
    assert payload == {"clamped_fraction": meta.clamped_fraction, "matrix_id": m.checksum(), "srgb_decoded": True}
