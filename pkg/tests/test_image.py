import numpy as np
import pytest

from matforge.image import (
    ImageError,
    ImageF,
    bilinear_sample,
    read_image,
    read_pfm,
    read_png,
    srgb_decode,
    srgb_encode,
    write_image,
    write_pfm,
    write_png,
)


def srgb_to_linear_reference(c: float) -> float:
    # independent transcription of the IEC 61966-2-1 inverse EOTF
    if c <= 0.04045:
        return c / 12.92
    return ((c + 0.055) / 1.055) ** 2.4


class TestPfm:
    def test_constant_half_roundtrip_exact(self, tmp_path):
        img = ImageF.constant(2, 2, 0.5, 3)
        p = tmp_path / "c.pfm"
        write_pfm(p, img)
        back = read_pfm(p)
        assert back.data.shape == (2, 2, 3)
        assert np.all(back.data == 0.5)

    def test_roundtrip_random_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        data = rng.uniform(0, 100, size=(5, 9, 3)).astype(np.float32).astype(np.float64)
        img = ImageF(data)
        p = tmp_path / "r.pfm"
        write_pfm(p, img)
        back = read_pfm(p)
        assert np.array_equal(back.data, data)

    def test_single_channel(self, tmp_path):
        img = ImageF(np.arange(12, dtype=np.float64).reshape(3, 4, 1))
        p = tmp_path / "g.pfm"
        write_pfm(p, img)
        back = read_pfm(p)
        assert back.channels == 1
        assert np.array_equal(back.data, img.data)

    def test_negative_scale_is_little_endian(self, tmp_path):
        # hand-built file, not produced by the writer
        p = tmp_path / "le.pfm"
        vals = np.array([[[1.5, 2.5, -3.0]]], dtype="<f4")
        with open(p, "wb") as f:
            f.write(b"PF\n1 1\n-1.0\n")
            f.write(vals.tobytes())
        back = read_pfm(p)
        assert np.allclose(back.data[0, 0], [1.5, 2.5, -3.0])

    def test_positive_scale_is_big_endian(self, tmp_path):
        p = tmp_path / "be.pfm"
        vals = np.array([[[4.0, 0.25, 9.0]]], dtype=">f4")
        with open(p, "wb") as f:
            f.write(b"PF\n1 1\n1.0\n")
            f.write(vals.tobytes())
        back = read_pfm(p)
        assert np.allclose(back.data[0, 0], [4.0, 0.25, 9.0])

    def test_bottom_to_top_row_order(self, tmp_path):
        # PFM stores the bottom scanline first
        p = tmp_path / "rows.pfm"
        rows = np.array([[[10.0]], [[20.0]]], dtype="<f4")  # file order: 10 then 20
        with open(p, "wb") as f:
            f.write(b"Pf\n1 2\n-1.0\n")
            f.write(rows.tobytes())
        back = read_pfm(p)
        assert back.data[0, 0, 0] == 20.0  # top row of the image
        assert back.data[1, 0, 0] == 10.0

    def test_nan_write_rejected(self, tmp_path):
        img = ImageF(np.full((2, 2, 3), np.nan))
        with pytest.raises(ImageError):
            write_pfm(tmp_path / "bad.pfm", img)

    def test_two_channel_padded_to_three(self, tmp_path):
        img = ImageF(np.dstack([np.full((4, 4), 0.25), np.full((4, 4), 0.75)]))
        p = tmp_path / "lut.pfm"
        write_pfm(p, img)
        back = read_pfm(p)
        assert back.channels == 3
        assert np.all(back.data[..., 0] == 0.25)
        assert np.all(back.data[..., 1] == 0.75)
        assert np.all(back.data[..., 2] == 0.0)


class TestPng:
    def test_value_188_decodes_near_half(self, tmp_path):
        # a stored 8-bit code of 188 must come back as its exact linear value
        expected = srgb_to_linear_reference(188 / 255.0)
        assert expected == pytest.approx(0.5029, abs=5e-4)
        img = ImageF(np.full((2, 2, 3), expected))
        p = tmp_path / "g.png"
        write_png(p, img, bitdepth=8)
        back = read_png(p)
        assert np.allclose(back.data, expected, atol=1e-9)

    def test_roundtrip_within_one_255th(self, tmp_path):
        # quantization happens on the 8-bit sRGB code grid, so the 1/255
        # guarantee lives in the encoded domain; the linear-domain error is
        # that times the inverse-EOTF slope (max 2.4/1.055 at white)
        rng = np.random.default_rng(3)
        data = rng.uniform(0, 1, size=(7, 5, 3))
        img = ImageF(data)
        p = tmp_path / "r.png"
        write_png(p, img, bitdepth=8)
        back = read_png(p)
        enc_err = np.abs(srgb_encode(back.data) - srgb_encode(data))
        assert np.max(enc_err) <= 1.0 / 255.0 + 1e-12
        lin_bound = (2.4 / 1.055) * 0.5 / 255.0
        assert np.max(np.abs(back.data - data)) <= lin_bound + 1e-12

    def test_16bit_roundtrip_tight(self, tmp_path):
        rng = np.random.default_rng(4)
        data = rng.uniform(0, 1, size=(6, 6, 3))
        img = ImageF(data)
        p = tmp_path / "r16.png"
        write_png(p, img, bitdepth=16)
        back = read_png(p)
        lin_bound = (2.4 / 1.055) * 0.5 / 65535.0
        assert np.max(np.abs(back.data - data)) <= lin_bound + 1e-12
        assert np.max(np.abs(back.data - data)) <= 1.0 / 255.0  # spec-level LDR bound

    def test_grayscale(self, tmp_path):
        data = np.linspace(0, 1, 16).reshape(4, 4, 1)
        p = tmp_path / "gray.png"
        write_png(p, ImageF(data), bitdepth=16)
        back = read_png(p)
        assert back.channels == 1
        assert np.max(np.abs(back.data - data)) <= 1.0 / 65535.0 + 1e-9

    def test_linear_passthrough_mode(self, tmp_path):
        # apply_srgb=False stores raw values; read back the same way
        data = np.full((2, 2, 1), 0.5)
        p = tmp_path / "lin.png"
        write_png(p, ImageF(data), bitdepth=16, apply_srgb=False)
        back = read_png(p, apply_srgb=False)
        assert np.max(np.abs(back.data - 0.5)) <= 1.0 / 65535.0

    def test_out_of_range_write_clips(self, tmp_path):
        img = ImageF(np.full((2, 2, 3), 1.5))
        p = tmp_path / "hot.png"
        write_png(p, img)
        assert np.allclose(read_png(p).data, 1.0)

    def test_nan_write_rejected(self, tmp_path):
        img = ImageF(np.full((1, 1, 1), np.nan))
        with pytest.raises(ImageError):
            write_png(tmp_path / "nan.png", img)


class TestSrgb:
    def test_piecewise_against_reference(self):
        xs = np.linspace(0, 1, 257)
        ref = np.array([srgb_to_linear_reference(x) for x in xs])
        assert np.allclose(srgb_decode(xs), ref, atol=1e-15)

    def test_encode_decode_inverse(self):
        xs = np.linspace(0, 1, 1001)
        assert np.allclose(srgb_decode(srgb_encode(xs)), xs, atol=1e-12)

    def test_breakpoint_continuity(self):
        lo = float(srgb_encode(np.array([0.0031308 - 1e-9]))[0])
        hi = float(srgb_encode(np.array([0.0031308 + 1e-9]))[0])
        assert abs(hi - lo) < 1e-6


class TestDispatch:
    def test_extension_routing(self, tmp_path):
        img = ImageF.constant(3, 3, 0.25, 3)
        fp = tmp_path / "a.pfm"
        gp = tmp_path / "a.png"
        write_image(fp, img)
        write_image(gp, ImageF(img.data, srgb=True))
        assert np.array_equal(read_image(fp).data, img.data)
        assert read_image(gp).data.shape == (3, 3, 3)

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(ImageError):
            write_image(tmp_path / "a.exr", ImageF.constant(1, 1, 0.0, 3))


class TestBilinearSample:
    def test_texel_center_identity(self):
        rng = np.random.default_rng(11)
        data = rng.uniform(0, 1, size=(4, 6, 3))
        xs, ys = np.meshgrid(np.arange(6, dtype=float), np.arange(4, dtype=float))
        out = bilinear_sample(data, xs, ys)
        assert np.allclose(out, data, atol=1e-14)

    def test_midpoint_average(self):
        data = np.zeros((1, 2, 1))
        data[0, 0, 0] = 1.0
        data[0, 1, 0] = 3.0
        out = bilinear_sample(data, np.array([0.5]), np.array([0.0]))
        assert out[0, 0] == pytest.approx(2.0)

    def test_wrap_x_seam(self):
        data = np.zeros((1, 4, 1))
        data[0, 0, 0] = 2.0
        data[0, 3, 0] = 4.0
        # halfway between the last and first columns, wrapping
        out = bilinear_sample(data, np.array([3.5]), np.array([0.0]), wrap_x=True)
        assert out[0, 0] == pytest.approx(3.0)

    def test_clamp_y(self):
        data = np.arange(4, dtype=float).reshape(2, 2, 1)
        out = bilinear_sample(data, np.array([0.0]), np.array([-5.0]))
        assert out[0, 0] == 0.0
