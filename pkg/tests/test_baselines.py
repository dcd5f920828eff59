"""
Tests for the DCT and autoencoder comparison watermarks
"""
import numpy as np
import pytest

from models.baselines import (DctWatermarkConfig, ae_decode, ae_embed, ae_finetune_on_edits, ae_train,
                              ae_train_adversarial, bit_accuracy, bits_to_text, dct_embed, dct_extract,
                              load_ae, random_text, save_ae, text_to_bits)
from utils.errors import ShapeMismatchError
from utils.imaging import TransformSpec, apply_transform, generate_image

PAYLOAD = '10110010'


@pytest.fixture
def host():
    # Keep pixels away from 0 and 1 so embedding and brightness scaling stay linear
    return 0.1 + 0.5 * generate_image(64, 64, seed=12)


def test_text_bits_conversion():
    assert text_to_bits('A') == '01000001'
    assert bits_to_text(text_to_bits('RIW')) == 'RIW'
    with pytest.raises(ValueError):
        bits_to_text('0101')


def test_random_text_is_uppercase():
    text = random_text(np.random.default_rng(0), 5)
    assert len(text) == 5 and text.isalpha() and text.isupper()


def test_bit_accuracy():
    assert bit_accuracy('1100', '1000') == 0.75
    assert bit_accuracy('', '') == 1.0
    with pytest.raises(ValueError):
        bit_accuracy('1', '10')


def test_dct_config_validation():
    with pytest.raises(ValueError):
        DctWatermarkConfig(payload='102')
    with pytest.raises(ValueError):
        DctWatermarkConfig(payload='1', coeff_a=(0, 0))
    with pytest.raises(ValueError):
        DctWatermarkConfig(payload='1', coeff_a=(3, 2))
    assert DctWatermarkConfig(payload='1').capacity(64, 48) == 48


def test_dct_recovers_payload_without_attack(host):
    cfg = DctWatermarkConfig(payload=PAYLOAD)
    marked = dct_embed(host, cfg)
    assert marked.shape == host.shape
    assert dct_extract(marked, cfg) == PAYLOAD
    assert np.abs(marked - host).max() < 0.25


def test_dct_brightness_boost_flips_every_bit(host):
    cfg = DctWatermarkConfig(payload=PAYLOAD)
    marked = dct_embed(host, cfg)
    brighter = marked * 1.2
    assert brighter.max() <= 1.0
    flipped = ''.join('1' if b == '0' else '0' for b in PAYLOAD)
    assert dct_extract(brighter, cfg) == flipped
    assert dct_extract(marked * 1.1, cfg) == PAYLOAD


def test_dct_rejects_oversized_payload():
    cfg = DctWatermarkConfig(payload='1' * 20)
    with pytest.raises(ValueError):
        dct_embed(np.zeros((32, 32, 3)), cfg)


def test_dct_zero_strength_is_identity(host):
    cfg = DctWatermarkConfig(payload=PAYLOAD, strength=0.0)
    assert np.array_equal(dct_embed(host, cfg), host)


def test_ae_residual_is_bounded(corpus):
    params = ae_train(corpus, payload_len=8, lam=0.01, epochs=0, seed=1)
    x = corpus[0]
    x_hat = ae_embed(params, x, PAYLOAD)
    assert x_hat.shape == x.shape
    assert np.abs(x_hat - x).max() <= 6 / 255 + 1e-6
    assert len(ae_decode(params, x_hat)) == 8
    with pytest.raises(ShapeMismatchError):
        ae_embed(params, x, '101')
    with pytest.raises(ValueError):
        ae_embed(params, x, '1012' * 2)


def test_ae_training_argument_checks(corpus):
    with pytest.raises(ValueError):
        ae_train([], payload_len=8, lam=0.01, epochs=1, seed=0)
    with pytest.raises(ValueError):
        ae_train(corpus, payload_len=0, lam=0.01, epochs=1, seed=0)
    with pytest.raises(ValueError):
        ae_train_adversarial(corpus, payload_len=8, lam=0.01, alpha_noise=-0.1, epochs=1, seed=0)


def test_finetune_leaves_source_untouched(corpus):
    params = ae_train(corpus, payload_len=8, lam=0.01, epochs=0, seed=2)
    before = [p.detach().clone() for p in params.model.decoder.parameters()]
    tuned = ae_finetune_on_edits(params, [(x, PAYLOAD) for x in corpus], epochs=2, seed=0)
    assert tuned.finetune_epochs == 2
    assert tuned.bit_accuracy is not None
    for p, q in zip(before, params.model.decoder.parameters()):
        assert np.array_equal(p.numpy(), q.detach().numpy())


def test_ae_checkpoint_roundtrip(tmp_path, corpus):
    params = ae_train(corpus, payload_len=8, lam=0.05, epochs=0, seed=3, alpha_noise=0.1)
    loaded = load_ae(save_ae(params, tmp_path / 'ae.pt'))
    assert loaded.lam == 0.05 and loaded.alpha_noise == 0.1
    assert ae_decode(loaded, corpus[1]) == ae_decode(params, corpus[1])


@pytest.mark.slow
def test_ae_learns_to_carry_bits():
    from utils.imaging import generate_corpus
    images = generate_corpus(40, 32, 32, seed=6)
    params = ae_train(images, payload_len=8, lam=0.01, epochs=40, seed=0)
    assert params.bit_accuracy >= 0.75


def test_dct_roundtrip_over_random_payloads(host):
    rng = np.random.default_rng(7)
    for _ in range(200):
        length = int(rng.integers(1, 65))
        bits = ''.join(rng.choice(['0', '1'], size=length))
        cfg = DctWatermarkConfig(payload=bits)
        assert dct_extract(dct_embed(host, cfg), cfg) == bits


@pytest.mark.parametrize('transform', [
    TransformSpec('gaussian_noise', {'sigma': 0.02, 'seed': 1}),
    TransformSpec('crop', {'fraction': 0.75, 'seed': 2}),
    TransformSpec('mask', {'fraction': 0.1, 'seed': 3}),
])
def test_dct_survives_noise_crop_and_mask(host, transform):
    # Two bits give each bit 32 voting blocks, enough to outvote blocks cut by the crop or mask edge
    cfg = DctWatermarkConfig(payload='10')
    attacked = apply_transform(dct_embed(host, cfg), transform)
    assert dct_extract(attacked, cfg) == '10'


def test_dct_noise_keeps_full_payload(host):
    cfg = DctWatermarkConfig(payload=PAYLOAD)
    noisy = apply_transform(dct_embed(host, cfg), TransformSpec('gaussian_noise', {'sigma': 0.02, 'seed': 4}))
    assert dct_extract(noisy, cfg) == PAYLOAD


def test_dct_rotation_collapses_accuracy():
    rng = np.random.default_rng(8)
    rotate = TransformSpec('rotate', {'degrees': 15.0})
    scores = []
    for seed in range(12):
        x = 0.1 + 0.5 * generate_image(64, 64, seed=100 + seed)
        bits = ''.join(rng.choice(['0', '1'], size=8))
        cfg = DctWatermarkConfig(payload=bits)
        marked = dct_embed(x, cfg)
        assert dct_extract(marked, cfg) == bits
        scores.append(bit_accuracy(dct_extract(apply_transform(marked, rotate), cfg), bits))
    assert np.mean(scores) <= 0.6
