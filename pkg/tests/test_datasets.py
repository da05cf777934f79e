import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfintro import pgm
from cfintro.datasets import (ATTRIBUTE_NAMES, DatasetConfigError, GlyphAttributes,
                              GlyphDatasetConfig, IdxCountMismatch, IdxMagicError, IdxTruncated,
                              export_dataset, load_exported, load_idx, marker_rows,
                              read_manifest, render_glyph, sample_dataset, write_idx)


@pytest.fixture(scope="module")
def default_set():
    return sample_dataset(GlyphDatasetConfig(n_samples=10_000, seed=0))


class TestRender:
    def test_same_attrs_identical_bytes(self):
        a = GlyphAttributes(0.4, 0.6, 0.3, 0.2, 1)
        assert render_glyph(a).tobytes() == render_glyph(a).tobytes()

    def test_marker_changes_only_its_rows(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            size, thick, slant, curv = rng.uniform(size=4)
            on = render_glyph(GlyphAttributes(size, thick, slant, curv, 1))
            off = render_glyph(GlyphAttributes(size, thick, slant, curv, 0))
            rows = np.flatnonzero(np.any(on != off, axis=1))
            assert set(rows) <= set(marker_rows())
            assert np.all(on >= off)
        # upper third of a 16-row image is rows 0..5
        assert marker_rows().max() < 16 / 3

    def test_size_zero_still_draws_something_inside_a_margin(self):
        img = render_glyph(GlyphAttributes(0.0, 0.0, 0.5, 1.0, 0))
        assert np.count_nonzero(img) >= 1
        assert img[0].sum() == img[-1].sum() == img[:, 0].sum() == img[:, -1].sum() == 0

    def test_size_grows_ink_extent(self):
        small = render_glyph(GlyphAttributes(0.1, 0.5, 0.5, 0.5, 0))
        large = render_glyph(GlyphAttributes(0.9, 0.5, 0.5, 0.5, 0))
        extent = lambda im: np.ptp(np.flatnonzero(im.sum(axis=0) > 0))
        assert extent(large) > extent(small)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 1))
    def test_pixels_in_unit_range(self, cont, marker):
        img = render_glyph(GlyphAttributes(*cont, marker))
        assert img.shape == (16, 16)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_attribute_validation(self):
        with pytest.raises(DatasetConfigError):
            GlyphAttributes(1.5, 0, 0, 0, 0)
        with pytest.raises(DatasetConfigError):
            GlyphAttributes(0.5, 0, 0, 0, 2)

    def test_label_rule(self):
        assert GlyphAttributes(0.51, 0, 0, 0, 0).label == 1
        assert GlyphAttributes(0.5, 0, 0, 0, 0).label == 0


class TestSampling:
    def test_bias_conditionals(self, default_set):
        marker = default_set.attributes[:, ATTRIBUTE_NAMES.index("marker")]
        large = default_set.labels == 1
        assert abs(marker[large].mean() - 0.70) <= 0.03
        assert abs(marker[~large].mean() - 0.10) <= 0.03

    def test_class_balance(self, default_set):
        assert abs(default_set.labels.mean() - 0.5) <= 0.03

    def test_labels_follow_size(self, default_set):
        np.testing.assert_array_equal(default_set.labels, default_set.attributes[:, 0] > 0.5)

    def test_seed_determinism(self):
        a = sample_dataset(GlyphDatasetConfig(n_samples=50, seed=3))
        b = sample_dataset(GlyphDatasetConfig(n_samples=50, seed=3))
        c = sample_dataset(GlyphDatasetConfig(n_samples=50, seed=4))
        assert a.images.tobytes() == b.images.tobytes()
        assert a.attributes.tobytes() == b.attributes.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    @pytest.mark.parametrize("kwargs", [{"n_samples": 0},
                                        {"bias": {"large": 1.2, "small": 0.1}},
                                        {"bias": {"large": 0.7}},
                                        {"image_size": 4}])
    def test_config_errors(self, kwargs):
        with pytest.raises(DatasetConfigError):
            GlyphDatasetConfig(**kwargs)


def test_export_round_trip(tmp_path):
    data = sample_dataset(GlyphDatasetConfig(n_samples=12, seed=2))
    splits = ["train"] * 8 + ["test"] * 4
    export_dataset(data, tmp_path, splits)
    rows = read_manifest(tmp_path)
    assert len(rows) == 12
    assert rows[0]["file"] == "images/000000.pgm"
    back = load_exported(tmp_path, "test")
    assert len(back) == 4
    np.testing.assert_array_equal(back.labels, data.labels[8:])
    assert np.abs(back.images - data.images[8:]).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_allclose(back.attributes, data.attributes[8:])


class TestIdx:
    def _write(self, tmp_path, magic_img=0x803, n_img=2, n_lab=2, cut=0):
        pixels = bytes(range(12))
        img = struct.pack(">IIII", magic_img, n_img, 2, 3) + pixels[:n_img * 6]
        lab = struct.pack(">II", 0x801, n_lab) + bytes([7, 1, 4][:n_lab])
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        ip.write_bytes(img[:len(img) - cut])
        lp.write_bytes(lab)
        return ip, lp

    def test_hand_fixture(self, tmp_path):
        data = load_idx(*self._write(tmp_path))
        assert data.images.shape == (2, 2, 3)
        np.testing.assert_allclose(data.images[1], np.arange(6, 12).reshape(2, 3) / 255.0)
        np.testing.assert_array_equal(data.labels, [7, 1])

    def test_bad_magic(self, tmp_path):
        with pytest.raises(IdxMagicError):
            load_idx(*self._write(tmp_path, magic_img=0x801))

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(IdxCountMismatch):
            load_idx(*self._write(tmp_path, n_lab=3))

    def test_truncated(self, tmp_path):
        with pytest.raises(IdxTruncated):
            load_idx(*self._write(tmp_path, cut=1))

    def test_write_then_read(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        labs = rng.integers(0, 10, size=5, dtype=np.uint8)
        write_idx(tmp_path / "i", tmp_path / "l", imgs, labs)
        data = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(np.round(data.images * 255), imgs)
        np.testing.assert_array_equal(data.labels, labs)


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        pgm.write_pgm(tmp_path / "a.pgm", img)
        back = pgm.read_pgm(tmp_path / "a.pgm")
        assert back.shape == (3, 4)
        assert np.abs(back - img).max() <= 0.5 / 255

    def test_header_layout(self):
        assert pgm.to_bytes(np.zeros((2, 3))).startswith(b"P5\n3 2\n255\n")

    def test_comments_in_header(self):
        data = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
        np.testing.assert_array_equal(pgm.from_bytes(data), [[0.0, 1.0]])

    @pytest.mark.parametrize("data", [b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00",
                                      b"P5\n1 1\n65535\n\x00\x00", b"P5\nx 1\n255\n\x00"])
    def test_rejects(self, data):
        with pytest.raises(pgm.PgmError):
            pgm.from_bytes(data)
