"""
Tests for ROC/AUC, confidence intervals, the protection boundary and the watermark game
"""
import numpy as np
import pytest

from models.evalgame import (DistinguisherPair, EvalRecord, ScoredSample, TextureFeatures, boundary_analysis,
                             build_distinguisher_pairs, corner_region, embedding_distance, make_patch, noise_editor,
                             patch_distance_samples, roc_auc, run_game, shuffle_pair_labels, train_binary_classifier,
                             train_distinguisher, wilson_interval)
from models.extract import ExtractionResult, SegmentRecord, WatermarkExtractor, build_template_bank
from models.riw import InjectionConfig
from utils.errors import ShapeMismatchError
from utils.imaging import WatermarkSpec, render_watermark, uniform_grid


def _auc_bruteforce(samples):
    pos = [s.score for s in samples if s.label == 1]
    neg = [s.score for s in samples if s.label == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_roc_perfect_and_inverted():
    samples = [ScoredSample(s, l) for s, l in [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]]
    assert roc_auc(samples).auc == 1.0
    inverted = [ScoredSample(-s.score, s.label) for s in samples]
    assert roc_auc(inverted).auc == 0.0


def test_roc_auc_matches_pairwise_count_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(10):
        samples = [ScoredSample(float(rng.integers(0, 4)), int(rng.integers(0, 2))) for _ in range(30)]
        if len({s.label for s in samples}) < 2:
            continue
        assert roc_auc(samples).auc == pytest.approx(_auc_bruteforce(samples))


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_auc([ScoredSample(0.3, 1), ScoredSample(0.4, 1)])
    with pytest.raises(ValueError):
        ScoredSample(float('nan'), 1)
    with pytest.raises(ValueError):
        ScoredSample(0.1, 2)


def test_equal_error_threshold_separates_classes():
    samples = [ScoredSample(s, l) for s, l in [(0.9, 1), (0.7, 1), (0.3, 0), (0.1, 0)]]
    threshold = roc_auc(samples).equal_error_threshold()
    assert 0.3 < threshold <= 0.7


def test_wilson_interval():
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    z2 = 1.96 ** 2
    assert hi - lo == pytest.approx(2 * 1.96 * np.sqrt(0.25 / 100 + z2 / 40000) / (1 + z2 / 100))
    lo, hi = wilson_interval(10, 10)
    assert hi == pytest.approx(1.0) and lo > 0.6


def _records(n=20):
    rng = np.random.default_rng(4)
    records = []
    for i in range(n):
        correct = 'AB' if i % 3 else 'XX'
        result = ExtractionResult([SegmentRecord(correct, [1.0, 1.0]), SegmentRecord('XX', [0.0, 0.0])], truth='AB')
        records.append(EvalRecord(f'img_{i:04d}', 0.4, 1.0, 'editor-a', result, float(rng.uniform()), float(i)))
    return records


def test_boundary_at_zero_percentile_is_global():
    report = boundary_analysis(_records(), 0.0, 'AB')
    assert report['selected'] == report['global']
    assert report['threshold'] == pytest.approx(min(r.sem_dist for r in _records()))


def test_boundary_at_top_percentile_selects_farthest():
    report = boundary_analysis(_records(), 100.0, 'AB', distance='vis_dist')
    assert report['selected']['n'] == 1
    assert report['threshold'] == 19.0


def test_boundary_curve_covers_all_records():
    report = boundary_analysis(_records(), 50.0, 'AB', bins=4)
    assert sum(b['n'] for b in report['curve']) == 20
    assert all(b['lo'] <= b['hi'] for b in report['curve'])


def test_boundary_rejects_bad_input():
    with pytest.raises(ValueError):
        boundary_analysis([], 50.0, 'AB')
    with pytest.raises(ValueError):
        boundary_analysis(_records(), 101.0, 'AB')


def test_embedding_distance():
    features = TextureFeatures(seed=1)
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert embedding_distance(features, x, x.copy()) == 0.0
    assert embedding_distance(features, x, 1 - x) > 0.0
    with pytest.raises(ShapeMismatchError):
        embedding_distance(features, x, x[:8])


def test_binary_classifier_argument_checks():
    x = [np.zeros((16, 16, 3))] * 4
    with pytest.raises(ValueError):
        train_binary_classifier(x, [1, 1, 1, 1], epochs=1, seed=0)
    params = train_binary_classifier(x, [1, 0, 1, 0], epochs=0, seed=0)
    assert params.epochs == 0 and params.auc is None


def test_distinguisher_pairs_are_balanced(codec64, corpus):
    layout = uniform_grid(32, 32, 1, 1)
    w = render_watermark(WatermarkSpec(text='AB', glyphs_per_segment=2, grid=(1, 1)), layout, 32, 32, 3)
    pairs = build_distinguisher_pairs(corpus, codec64, w, InjectionConfig(steps=1), lambda x, s: x, seed=0)
    assert len(pairs) == 2 * len(corpus)
    assert sum(p.label for p in pairs) == len(corpus)
    assert all(np.array_equal(p.image, p.edited) for p in pairs)
    with pytest.raises(ValueError):
        train_distinguisher(pairs[:3], epochs=0, seed=0)
    params = train_distinguisher(pairs, epochs=0, seed=0)
    assert params.model.in_channels == 6


def test_patch_distance_scores_rank_exact_patch_first():
    patch = make_patch(3, size=16)
    assert patch.shape == (16, 16, 3)
    x = np.zeros((32, 32, 3))
    x[-16:, -16:] = patch
    regions = [corner_region(x, 16), corner_region(np.ones((32, 32, 3)), 16)]
    samples = patch_distance_samples(regions, [1, 0], patch)
    assert samples[0].score == 0.0
    assert roc_auc(samples).auc == 1.0


def test_game_runs_with_untrained_components(codec64, corpus):
    spec = WatermarkSpec(text='AB', glyphs_per_segment=2, grid=(1, 1))
    layout = uniform_grid(32, 32, 1, 1)
    extractor = WatermarkExtractor(build_template_bank(32, 32, 2), layout)
    distinguisher = train_binary_classifier([np.zeros((32, 32, 6))] * 2, [0, 1], epochs=0, seed=0)
    kwargs = dict(trials=6, seed=5, codec=codec64, calibration_trials=2, require_trained=False)
    outcome = run_game(corpus, spec, InjectionConfig(steps=1), lambda x, s: x, extractor, distinguisher, **kwargs)
    again = run_game(corpus, spec, InjectionConfig(steps=1), lambda x, s: x, extractor, distinguisher, **kwargs)
    assert outcome.trials == 6 and len(outcome.log) == 6
    assert 0.0 <= outcome.bob_win_rate <= 1.0
    assert outcome.bob_ci[0] <= outcome.bob_win_rate <= outcome.bob_ci[1]
    assert [t.b for t in outcome.log] == [t.b for t in again.log]
    assert outcome.to_dict()['trials'] == 6


def test_game_refuses_untrained_components(codec64, corpus):
    spec = WatermarkSpec(text='AB', glyphs_per_segment=2, grid=(1, 1))
    extractor = WatermarkExtractor(build_template_bank(32, 32, 2), uniform_grid(32, 32, 1, 1))
    distinguisher = train_binary_classifier([np.zeros((32, 32, 6))] * 2, [0, 1], epochs=0, seed=0)
    with pytest.raises(ValueError):
        run_game(corpus, spec, InjectionConfig(steps=1), lambda x, s: x, extractor, distinguisher,
                 trials=2, seed=0, codec=codec64)


def test_distinguisher_pairs_edit_quantized_watermarked_images(codec64, corpus):
    layout = uniform_grid(32, 32, 1, 1)
    w = render_watermark(WatermarkSpec(text='AB', glyphs_per_segment=2, grid=(1, 1)), layout, 32, 32, 3)
    seen = []

    def editor(x, seed):
        seen.append(x)
        return x

    pairs = build_distinguisher_pairs(corpus, codec64, w, InjectionConfig(steps=2), editor, seed=1)
    marked = [x for x, p in zip(seen, pairs) if p.label == 1]
    assert len(marked) == len(corpus)
    for x in marked:
        assert np.allclose(x * 255, np.round(x * 255), atol=1e-9)
    assert all(np.array_equal(p.image, x) for p, x in zip(pairs, seen))


def test_shuffled_labels_give_chance_auc():
    pairs = [DistinguisherPair(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), i % 2) for i in range(2000)]
    shuffled = shuffle_pair_labels(pairs, seed=0)
    assert sum(p.label for p in shuffled) == 1000
    # A scorer that is perfect on the true labels carries no signal about the shuffled ones
    samples = [ScoredSample(float(p.label), s.label) for p, s in zip(pairs, shuffled)]
    assert abs(roc_auc(samples).auc - 0.5) <= 0.1
    assert [p.label for p in shuffle_pair_labels(pairs, seed=0)] == [p.label for p in shuffled]


def test_identity_edit_lets_bob_win(codec64, corpus):
    spec = WatermarkSpec(text='AB', glyphs_per_segment=2, grid=(1, 1))
    extractor = WatermarkExtractor(build_template_bank(32, 32, 2), uniform_grid(32, 32, 1, 1))
    distinguisher = train_binary_classifier([np.zeros((32, 32, 6))] * 2, [0, 1], epochs=0, seed=0)
    # Zero steps with a loose budget leave the visible overlay itself
    visible = InjectionConfig(alpha=0.8, eps=1.0, mu=0.01, steps=0)
    outcome = run_game(corpus, spec, visible, lambda x, s: x, extractor, distinguisher, trials=20, seed=2,
                       codec=codec64, calibration_trials=20, require_trained=False)
    assert outcome.bob_win_rate >= 0.9
    # Noise output does not depend on the input, so Bob is left guessing
    noisy = run_game(corpus, spec, visible, noise_editor, extractor, distinguisher, trials=20, seed=2,
                     codec=codec64, threshold=outcome.threshold, require_trained=False)
    assert noisy.bob_win_rate < 0.9
