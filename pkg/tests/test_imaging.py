import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from semirain.imaging import (
    PSNR_CAP,
    PnmError,
    encode_pgm,
    extract_patches,
    load_pnm,
    parse_pnm,
    psnr,
    save_pgm,
)


def test_p5_direct_scaling():
    img = parse_pnm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_array_equal(img, [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_p6_white_is_one():
    img = parse_pnm(b"P6 1 1 255\n" + bytes([255, 255, 255]))
    assert img.shape == (1, 1)
    assert img[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_p6_luminance_weights():
    img = parse_pnm(b"P6 3 1 255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255]))
    np.testing.assert_allclose(img[0], [0.299, 0.587, 0.114], atol=1e-15)


def test_header_comments_are_skipped():
    img = parse_pnm(b"P5\n# made by hand\n1 1\n255\n" + bytes([51]))
    assert img[0, 0] == 51 / 255


@pytest.mark.parametrize("buf, offset", [
    (b"P5 0 0 255\n", 3),
    (b"P3 1 1 255\n\x00", 0),
    (b"P5 2 2 65535\n" + bytes(8), 7),
    (b"P5 2 2 255\n\x00\x01", 13),
    (b"P5 2 x 255\n", 5),
])
def test_malformed_headers_report_offset(buf, offset):
    with pytest.raises(PnmError) as err:
        parse_pnm(buf)
    assert err.value.offset == offset
    assert "offset" in str(err.value)


def test_save_all_zero_payload(tmp_path):
    save_pgm(np.zeros((3, 4)), tmp_path / "z.pgm")
    raw = (tmp_path / "z.pgm").read_bytes()
    assert raw.startswith(b"P5")
    assert raw[-12:] == bytes(12)


@pytest.mark.parametrize("value, byte", [(0.5, 128), (1.7, 255), (-0.3, 0), (1.0, 255), (0.0, 0)])
def test_save_quantization(value, byte):
    assert encode_pgm(np.full((1, 1), value))[-1] == byte


def test_save_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "x.pgm"
    with pytest.raises(OSError, match="missing"):
        save_pgm(np.zeros((2, 2)), bad)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-0.5, 1.5)))
def test_roundtrip_error_bound(img):
    back = parse_pnm(encode_pgm(img))
    assert np.max(np.abs(back - np.clip(img, 0, 1))) <= 1 / 510 + 1e-15


def test_load_from_disk(tmp_path):
    p = tmp_path / "a.pgm"
    img = np.linspace(0, 1, 12).reshape(3, 4)
    save_pgm(img, p)
    assert load_pnm(p).shape == (3, 4)


class TestPatches:
    def test_single_exact_patch(self):
        img = np.random.default_rng(0).random((8, 8))
        batch = extract_patches([img], 8, 1, seed=0)
        np.testing.assert_array_equal(batch.inputs[0, 0], img)
        assert batch.targets is None and not batch.supervised

    def test_seed_reproducible(self):
        imgs = [np.random.default_rng(i).random((20, 30)) for i in range(3)]
        a = extract_patches(imgs, 8, 10, seed=5)
        b = extract_patches(imgs, 8, 10, seed=5)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_supervised_uses_identical_windows(self):
        rng = np.random.default_rng(1)
        clean = [rng.random((16, 16)) for _ in range(2)]
        rainy = [c + 1.0 for c in clean]
        batch = extract_patches(rainy, 5, 30, seed=2, targets=clean)
        np.testing.assert_allclose(batch.inputs - batch.targets, 1.0)

    def test_small_images_skipped(self, caplog):
        imgs = [np.zeros((4, 4)), np.ones((10, 10))]
        batch = extract_patches(imgs, 8, 5, seed=0)
        assert np.all(batch.inputs == 1.0)
        assert "skipping" in caplog.text

    def test_all_too_small(self):
        with pytest.raises(ValueError):
            extract_patches([np.zeros((4, 4))], 8, 1, seed=0)

    def test_origins_uniform_chi_square(self):
        img = np.zeros((100, 100))
        batch = extract_patches([img], 32, 1000, seed=123)
        rows, cols = batch.origins[:, 1], batch.origins[:, 2]
        assert rows.min() >= 0 and rows.max() <= 68 and cols.min() >= 0 and cols.max() <= 68
        # 69 positions per axis, binned into 23 equal groups of 3
        for coord in (rows, cols):
            counts = np.bincount(coord // 3, minlength=23)
            assert stats.chisquare(counts).pvalue > 0.01
        # joint placement, 5x5 grid of cells (positions 0..68 -> bins of width 13.8)
        joint = np.histogram2d(rows, cols, bins=5, range=[[0, 69], [0, 69]])[0].ravel()
        assert stats.chisquare(joint).pvalue > 0.01


class TestPsnr:
    def test_identical_is_capped(self):
        a = np.random.default_rng(0).random((5, 5))
        assert psnr(a, a) == PSNR_CAP == 99.0

    def test_uniform_offset(self):
        a = np.full((4, 4), 0.3)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((7, 9)), rng.random((7, 9))
        total = 0.0
        for i in range(7):
            for j in range(9):
                total += (a[i, j] - b[i, j]) ** 2
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / (total / 63)), abs=1e-9)

    def test_symmetric_exactly(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((6, 6)), rng.random((6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_mse(self):
        a = np.full((3, 3), 0.2)
        vals = [psnr(a, a + d) for d in np.linspace(0.01, 0.7, 25)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))
