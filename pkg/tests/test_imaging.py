"""
Tests for the image toolkit: corpus generation, glyph rendering, layouts and transforms
"""
import numpy as np
import pytest

from utils.errors import ShapeMismatchError
from utils.font import ALPHABET, GLYPH_HEIGHT, GLYPH_WIDTH, glyph_bitmap
from utils.imaging import (SegmentLayout, TransformSpec, WatermarkSpec, apply_transform, corner_position,
                           crop_segments, generate_corpus, glyph_geometry, overlay_patch, paste_segments,
                           render_segment, render_watermark, uniform_grid, validate_image)
from utils.storage import load_png, quantize, read_corpus, save_png, write_corpus


def test_corpus_is_deterministic_and_in_range():
    a = generate_corpus(3, 32, 48, seed=9)
    b = generate_corpus(3, 32, 48, seed=9)
    assert len(a) == 3
    for x, y in zip(a, b):
        assert x.shape == (32, 48, 3)
        assert np.array_equal(x, y)
        assert x.min() >= 0.0 and x.max() <= 1.0


def test_corpus_differs_across_seeds():
    assert not np.array_equal(generate_corpus(1, 32, 32, seed=1)[0], generate_corpus(1, 32, 32, seed=2)[0])


@pytest.mark.parametrize('n, h, w, channels', [(0, 32, 32, 3), (2, 8, 32, 3), (2, 32, 32, 2)])
def test_corpus_rejects_bad_arguments(n, h, w, channels):
    with pytest.raises(ValueError):
        generate_corpus(n, h, w, seed=0, channels=channels)


def test_validate_image_rejects_out_of_range():
    x = np.full((16, 16, 3), 0.5)
    validate_image(x)
    x[0, 0, 0] = 1.5
    with pytest.raises(ValueError):
        validate_image(x)
    with pytest.raises(ValueError):
        validate_image(np.zeros((16, 16)))


def test_glyph_bitmaps_cover_alphabet():
    for char in ALPHABET:
        bitmap = glyph_bitmap(char, 2)
        assert bitmap.shape == (2 * GLYPH_HEIGHT, 2 * GLYPH_WIDTH)
        assert bitmap.any()
    with pytest.raises(ValueError):
        glyph_bitmap('?', 1)
    with pytest.raises(ValueError):
        glyph_bitmap('A', 0)


def test_glyph_geometry_scale():
    geom = glyph_geometry(21, 80, 4)
    assert geom.slot_width == 20
    assert geom.scale == 3
    with pytest.raises(ValueError):
        glyph_geometry(6, 80, 4)


def test_watermark_spec_validation():
    assert WatermarkSpec().segments == 9
    with pytest.raises(ValueError):
        WatermarkSpec(text='RIW')
    with pytest.raises(ValueError):
        WatermarkSpec(text='riw1')
    with pytest.raises(ValueError):
        WatermarkSpec(alpha=1.5)


def test_uniform_grid_is_row_major_and_disjoint():
    layout = uniform_grid(64, 64, 3, 3)
    assert layout.k == 9
    assert layout.segment_shape == (21, 21)
    tops = [r[0] for r in layout.rects]
    assert tops == sorted(tops)


def test_layout_rejects_overlap_and_unequal_sizes():
    with pytest.raises(ValueError):
        SegmentLayout([(0, 0, 10, 10), (5, 5, 10, 10)])
    with pytest.raises(ValueError):
        SegmentLayout([(0, 0, 10, 10), (20, 20, 8, 10)])


def test_render_and_crop_segments_agree():
    layout = uniform_grid(64, 64, 3, 3)
    spec = WatermarkSpec()
    w = render_watermark(spec, layout, 64, 64, 3)
    assert w.shape == (64, 64, 3)
    single = render_segment(spec.text, *layout.segment_shape, spec.glyphs_per_segment)
    for seg in crop_segments(w, layout):
        assert np.array_equal(seg[..., 0], single)
        assert np.array_equal(seg[..., 0], seg[..., 2])


def test_paste_segments_inverts_crop(image):
    layout = uniform_grid(32, 32, 2, 2)
    segments = crop_segments(image, layout)
    rebuilt = paste_segments(segments, layout, np.zeros_like(image))
    assert np.array_equal(rebuilt, image)


def test_overlay_patch_blends_corner(image):
    patch = np.ones((8, 8, 3))
    corner = corner_position(image.shape, patch.shape)
    assert corner == (24, 24)
    out = overlay_patch(image, patch, corner, 0.5)
    assert np.allclose(out[24:, 24:], 0.5 * image[24:, 24:] + 0.5)
    assert np.array_equal(out[:24], image[:24])
    with pytest.raises(ShapeMismatchError):
        overlay_patch(image, np.ones((8, 8, 1)), corner, 0.5)
    with pytest.raises(ValueError):
        overlay_patch(image, patch, (30, 30), 0.5)


def test_identity_transforms_return_copies(image):
    for spec in (TransformSpec('gaussian_noise', {'sigma': 0.0}), TransformSpec('resize', {'factor': 1.0})):
        out = apply_transform(image, spec)
        assert out is not image
        assert np.allclose(out, image)


def test_brightness_and_mask_transforms(image):
    bright = apply_transform(image, TransformSpec('brightness', {'factor': 2.0}))
    assert np.allclose(bright, np.clip(image * 2.0, 0, 1))
    masked = apply_transform(image, TransformSpec('mask', {'fraction': 0.25, 'seed': 3}))
    assert masked.shape == image.shape
    assert np.count_nonzero(np.all(masked == 0, axis=2)) >= 0.25 * 32 * 32 * 0.9


def test_unknown_transform_is_rejected():
    with pytest.raises(ValueError):
        TransformSpec('sharpen', {})


def test_png_roundtrip_is_8bit_exact(tmp_path, image):
    path = save_png(image, tmp_path / 'x.png')
    back = load_png(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, quantize(image))


def test_corpus_manifest_roundtrip(tmp_path, corpus):
    write_corpus(corpus, [10, 11, 12, 13], tmp_path)
    rows = read_corpus(tmp_path)
    assert [r['id'] for r in rows] == ['img_0000', 'img_0001', 'img_0002', 'img_0003']
    assert np.array_equal(rows[1]['image'], quantize(corpus[1]))
    with pytest.raises(FileNotFoundError):
        read_corpus(tmp_path / 'missing')


def test_crop_keeps_only_window(image):
    out = apply_transform(image, TransformSpec('crop', {'fraction': 0.5, 'seed': 1}))
    kept = np.any(out != 0, axis=2)
    assert kept.sum() <= 16 * 16
    assert np.array_equal(out[kept], image[kept])


def test_rotate_and_resize_keep_shape(image):
    for spec in (TransformSpec('rotate', {'degrees': 15}), TransformSpec('resize', {'factor': 0.5})):
        out = apply_transform(image, spec)
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
