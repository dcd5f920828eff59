"""
Tests for glyph recognition, extraction and the D_all / D_word / D_letter metrics
"""
import itertools

import numpy as np
import pytest

from models.extract import (ExtractionResult, SegmentRecord, WatermarkExtractor, build_template_bank, extract,
                            init_reconstructor, load_recognizer, metric_d_all, metric_d_letter, metric_d_word,
                            metric_summary, ncc, pixel_distance, pixel_distance_detector, reconstruct,
                            recognize_segment, save_recognizer, train_glyph_classifier, train_reconstructor)
from utils.errors import ShapeMismatchError
from utils.font import ALPHABET
from utils.imaging import WatermarkSpec, crop_segments, render_watermark, uniform_grid


@pytest.fixture
def layout():
    return uniform_grid(64, 64, 3, 3)


@pytest.fixture
def bank(layout):
    h, w = layout.segment_shape
    return build_template_bank(h, w, 4)


def _result(decodes, truth):
    return ExtractionResult([SegmentRecord(d, [1.0] * len(d)) for d in decodes], truth=truth)


def test_ncc_bounds():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 5))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, np.ones_like(a)) == 0.0


def test_template_bank_reads_clean_watermark(layout, bank):
    spec = WatermarkSpec(text='Q7XZ')
    w = render_watermark(spec, layout, 64, 64, 3)
    result = extract(bank, None, w, layout, 4, truth='Q7XZ')
    assert result.k == 9
    assert result.indicators == [1] * 9
    assert all(c == pytest.approx(1.0) for seg in result.segments for c in seg.confidences)


def test_template_bank_reads_overlay_on_image(layout, bank):
    from utils.imaging import generate_image
    x = generate_image(64, 64, seed=4)
    w = render_watermark(WatermarkSpec(), layout, 64, 64, 3)
    result = extract(bank, None, np.clip(x + 0.8 * w, 0, 1), layout, 4, truth='RIW1')
    assert metric_d_word([result]) == 1.0


def test_recognizer_rejects_wrong_segment(bank):
    with pytest.raises(ShapeMismatchError):
        recognize_segment(bank, np.zeros((20, 21, 3)), 4)
    with pytest.raises(ValueError):
        recognize_segment(bank, np.zeros((21, 21, 3)), 3)


def test_extract_rejects_mismatched_layout(bank):
    with pytest.raises(ShapeMismatchError):
        extract(bank, None, np.zeros((64, 64, 3)), uniform_grid(64, 64, 2, 2), 4)


def test_flat_segment_decodes_deterministically(bank):
    decoded, confidences = recognize_segment(bank, np.full((21, 21, 3), 0.5), 4)
    # Ties resolve to the smallest label, and digits sort first
    assert decoded == '0000'
    assert confidences == [0.0] * 4


def test_metrics_on_hand_built_results():
    results = [
        _result(['AB', 'XX'], 'AB'),
        _result(['AX', 'XB'], 'AB'),
        _result(['XX', 'XX'], 'AB'),
    ]
    assert metric_d_all(results) == pytest.approx(1 / 6)
    assert metric_d_word(results) == pytest.approx(1 / 3)
    assert metric_d_letter(results, 'AB') == pytest.approx(2 / 3)
    summary = metric_summary(results, 'AB')
    assert summary['n'] == 3 and summary['k'] == 2


def test_metrics_match_bruteforce_on_random_configurations():
    rng = np.random.default_rng(3)
    alphabet = list('AB1X')
    for _ in range(1000):
        m = int(rng.integers(1, 4))
        truth = ''.join(rng.choice(alphabet[:3], m))
        n, k = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        # Bias decodes toward the truth so every metric sees both outcomes
        decodes = [[truth if rng.random() < 0.3 else ''.join(rng.choice(alphabet, m)) for _ in range(k)]
                   for _ in range(n)]
        results = [_result(row, truth) for row in decodes]

        correct = [[d == truth for d in row] for row in decodes]
        expected_all = sum(c for row in correct for c in row) / (n * k)
        expected_word = sum(any(row) for row in correct) / n
        expected_letter = sum(
            all(any(d[p] == truth[p] for d in row) for p in range(m)) for row in decodes
        ) / n
        assert metric_d_all(results) == pytest.approx(expected_all)
        assert metric_d_word(results) == pytest.approx(expected_word)
        assert metric_d_letter(results, truth) == pytest.approx(expected_letter)
        assert metric_d_word(results) >= metric_d_all(results)
        # A correct segment implies a correct image, which implies every letter is recoverable
        assert metric_d_word(results) <= metric_d_letter(results, truth)


def test_letter_success_exhaustive_two_segments():
    truth = 'AB'
    options = [''.join(p) for p in itertools.product('ABX', repeat=2)]
    for a, b in itertools.product(options, repeat=2):
        expected = (a[0] == 'A' or b[0] == 'A') and (a[1] == 'B' or b[1] == 'B')
        assert metric_d_letter([_result([a, b], truth)], truth) == float(expected)


def test_metrics_need_indicators():
    with pytest.raises(ValueError):
        metric_d_all([])
    with pytest.raises(ValueError):
        metric_d_word([ExtractionResult([SegmentRecord('AB', [1.0, 1.0])])])


def test_rows_carry_segment_indices():
    rows = _result(['AB', 'XB'], 'AB').rows('img_0001')
    assert [r['segment_index'] for r in rows] == [0, 1]
    assert [r['correct'] for r in rows] == [1, 0]


def test_pixel_distance_detector():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 1 / 255)
    assert pixel_distance(a, b) == pytest.approx(np.sqrt(48))
    distance, detected = pixel_distance_detector(a, b, threshold=10.0)
    assert detected
    with pytest.raises(ShapeMismatchError):
        pixel_distance(a, b[:2])


def test_reconstructor_preserves_shape(layout):
    params = init_reconstructor(0)
    seg = np.random.default_rng(0).uniform(size=(21, 21, 3))
    out = reconstruct(params, seg)
    assert out.shape == seg.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_extractor_with_reconstructor_runs(layout, bank):
    extractor = WatermarkExtractor(bank, layout, init_reconstructor(1))
    x = np.random.default_rng(1).uniform(size=(64, 64, 3))
    result = extractor.extract(x, 'RIW1')
    assert result.k == 9
    assert 0.0 <= extractor.score(x, 'RIW1') <= 1.0


def test_template_recognizer_checkpoint_roundtrip(tmp_path, bank, layout):
    path = save_recognizer(bank, tmp_path / 'recognizer.pt')
    loaded = load_recognizer(path)
    assert loaded.mode == 'template'
    w = render_watermark(WatermarkSpec(), layout, 64, 64, 3)
    seg = crop_segments(w, layout)[0]
    assert recognize_segment(loaded, seg, 4) == recognize_segment(bank, seg, 4)


@pytest.mark.slow
def test_reconstructor_learns_clean_glyphs(layout):
    from utils.imaging import generate_corpus
    w = render_watermark(WatermarkSpec(), layout, 64, 64, 3)
    clean = crop_segments(w, layout)[0]
    pairs = []
    for x in generate_corpus(30, 64, 64, seed=8):
        degraded = np.clip(x + 0.3 * w, 0, 1)
        pairs.extend((seg, clean) for seg in crop_segments(degraded, layout))
    params = train_reconstructor(pairs, epochs=30, seed=0)
    assert params.rmse < 0.3


def _random_texts(rng, count):
    return [''.join(rng.choice(list(ALPHABET), 4)) for _ in range(count)]


def test_template_bank_tolerates_gaussian_noise():
    single = uniform_grid(64, 64, 1, 1)
    h, w = single.segment_shape
    bank = build_template_bank(h, w, 4)
    rng = np.random.default_rng(9)
    hits = total = 0
    for text in _random_texts(rng, 20):
        wm = render_watermark(WatermarkSpec(text=text, grid=(1, 1)), single, 64, 64, 3)
        noisy = np.clip(wm + rng.normal(0, 0.1, wm.shape), 0, 1)
        decoded = extract(bank, None, noisy, single, 4).segments[0].decoded
        hits += sum(a == b for a, b in zip(decoded, text))
        total += len(text)
    assert hits / total >= 0.9


def test_template_bank_order_does_not_change_decodes(layout, bank):
    h, w = layout.segment_shape
    shuffled = list(ALPHABET)
    np.random.default_rng(10).shuffle(shuffled)
    permuted = build_template_bank(h, w, 4, alphabet=shuffled)
    rng = np.random.default_rng(11)
    segments = [np.full((h, w, 3), 0.5), rng.uniform(size=(h, w, 3))]
    for text in _random_texts(rng, 4):
        wm = render_watermark(WatermarkSpec(text=text), layout, 64, 64, 3)
        segments.append(crop_segments(np.clip(wm + rng.normal(0, 0.2, wm.shape), 0, 1), layout)[0])
    for seg in segments:
        assert recognize_segment(permuted, seg, 4) == recognize_segment(bank, seg, 4)


def test_untrained_glyph_classifier_decodes_segments(layout):
    h, w = layout.segment_shape
    params = train_glyph_classifier(h, w, 4, epochs=0, seed=0)
    assert params.mode == 'classifier' and params.accuracy is None
    seg = crop_segments(render_watermark(WatermarkSpec(), layout, 64, 64, 3), layout)[0]
    decoded, confidences = recognize_segment(params, seg, 4)
    assert len(decoded) == 4 and set(decoded) <= set(ALPHABET)
    assert all(0.0 <= c <= 1.0 for c in confidences)


@pytest.mark.slow
def test_glyph_classifier_reads_rendered_segments(layout):
    h, w = layout.segment_shape
    params = train_glyph_classifier(h, w, 4, epochs=30, seed=0, error_threshold=0.25)
    assert params.epochs == 30 and params.accuracy >= 0.75
    rng = np.random.default_rng(12)
    hits = total = 0
    for text in _random_texts(rng, 10):
        seg = crop_segments(render_watermark(WatermarkSpec(text=text), layout, 64, 64, 3), layout)[0]
        decoded, _ = recognize_segment(params, seg, 4)
        hits += sum(a == b for a, b in zip(decoded, text))
        total += len(text)
    assert hits / total >= 0.75
