"""
Training stage: injector codec, edit models, recognizer, reconstructor, baselines and
the classifiers used by the evaluation
"""
from dataclasses import asdict, replace
from typing import Callable, List, Tuple

import numpy as np
import logging

from config import Config
from models.baselines import (ae_embed, ae_finetune_on_edits, ae_train, ae_train_adversarial, random_text,
                              save_ae, text_to_bits)
from models.codec import CodecConfig, save_codec, train_codec
from models.editsim import EDIT_EFFECTS, DiffusionSchedule, save_denoiser, train_denoiser
from models.evalgame import (DistinguisherPair, build_distinguisher_pairs, corner_region, make_patch, save_classifier,
                             shuffle_pair_labels, train_distinguisher, train_patch_classifier)
from models.extract import save_recognizer, save_reconstructor, train_glyph_classifier, train_reconstructor
from models.riw import inject, inject_to_target
from stages import checkpoint_current, execute, stage_key, stamp_sidecar
from utils.errors import ConfigError
from utils.imaging import corner_position, crop_segments, image_seed, overlay_patch
from utils.storage import quantize

logger = logging.getLogger(__name__)

TRAIN_STAGES = ('codec', 'editors', 'recognizer', 'reconstructor', 'ae', 'distinguisher', 'patch')


def _save(lab, stage: str, path, key: str, saver: Callable):
    saver(path)
    stamp_sidecar(path, key)
    lab.manifest.record_artifact(path, stage, 'checkpoint', key)
    lab.manifest.record_artifact(path.with_suffix('.json'), stage, 'json', key)


def default_editor(lab):
    """First configured edit model and edit specification, as an (x, seed) -> x_e callable"""
    model = lab.get_editor(lab.cfg.editors[0].name)
    spec = lab.edit_specs()[0]
    return lambda x, seed: model(x, replace(spec, seed=seed))


def watermark_patch(lab) -> np.ndarray:
    """Corner patch used as the image watermark"""
    return make_patch(lab.cfg.seed + 99, lab.cfg.patch.size, lab.cfg.corpus.channels)


# --------------------------------------------------------------------------- stages

def train_codec_stage(lab):
    key = stage_key(lab, 'corpus', 'codec')
    path = lab.checkpoint('codec')

    def body():
        c = lab.cfg.codec
        params = train_codec(lab.images('train'), c.epochs, c.seed,
                             CodecConfig(lab.cfg.corpus.channels, c.latent_channels, c.hidden),
                             rmse_threshold=Config.CODEC_RMSE_THRESHOLD)
        _save(lab, 'codec', path, key, lambda p: save_codec(params, p))

    execute(lab, 'train:codec', key, body, lambda: checkpoint_current(path, key))


def train_editor_stage(lab, editor):
    key = stage_key(lab, 'corpus', 'codec', editor=asdict(editor))
    codec_path = lab.checkpoint(f'{editor.name}_codec')
    denoiser_path = lab.checkpoint(f'{editor.name}_denoiser')

    def body():
        images = lab.images('train')
        c = lab.cfg.codec
        codec = train_codec(images, editor.codec_epochs, editor.codec_seed,
                            CodecConfig(lab.cfg.corpus.channels, c.latent_channels, c.hidden),
                            rmse_threshold=Config.CODEC_RMSE_THRESHOLD)
        _save(lab, 'editors', codec_path, key, lambda p: save_codec(codec, p))
        schedule = DiffusionSchedule.linear(editor.t_max)
        denoiser = train_denoiser(codec, images, list(EDIT_EFFECTS), editor.denoiser_epochs, editor.denoiser_seed,
                                  schedule=schedule, loss_threshold=Config.DENOISER_LOSS_THRESHOLD)
        _save(lab, 'editors', denoiser_path, key, lambda p: save_denoiser(denoiser, schedule, p))

    execute(lab, f'train:editor:{editor.name}', key, body,
            lambda: checkpoint_current(codec_path, key) and checkpoint_current(denoiser_path, key))


def train_recognizer_stage(lab):
    if lab.cfg.extract.recognizer_mode != 'classifier':
        logger.info("Template recognizer needs no training")
        return
    key = stage_key(lab, 'watermark', 'extract', size=[lab.cfg.corpus.height, lab.cfg.corpus.width])
    path = lab.checkpoint('recognizer')

    def body():
        h, w = lab.layout().segment_shape
        params = train_glyph_classifier(h, w, lab.cfg.watermark.glyphs, lab.cfg.extract.recognizer_epochs,
                                        lab.cfg.seed)
        _save(lab, 'recognizer', path, key, lambda p: save_recognizer(params, p))

    execute(lab, 'train:recognizer', key, body, lambda: checkpoint_current(path, key))


def reconstruction_pairs(lab, images: List[np.ndarray], editor) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(edited watermarked segment, clean rendered segment) pairs over the alpha grid"""
    w = lab.watermark()
    layout = lab.layout()
    clean = crop_segments(w, layout)
    codec = lab.get_codec()
    rng = np.random.default_rng(lab.cfg.seed)
    pairs = []
    for i, x in enumerate(images):
        alpha = float(rng.choice(lab.cfg.sweep.alpha_grid))
        x_hat, _ = inject(codec, x, w, lab.injection_config(alpha=alpha))
        edited = editor(quantize(x_hat), image_seed(lab.cfg.seed, i))
        pairs.extend(zip(crop_segments(edited, layout), clean))
    return pairs


def train_reconstructor_stage(lab):
    key = stage_key(lab, 'corpus', 'codec', 'editors', 'edits', 'watermark', 'injection', 'sweep', 'extract')
    path = lab.checkpoint('reconstructor')

    def body():
        images = lab.images('aux')[:lab.cfg.extract.reconstructor_images]
        pairs = reconstruction_pairs(lab, images, default_editor(lab))
        params = train_reconstructor(pairs, lab.cfg.extract.reconstructor_epochs, lab.cfg.seed,
                                     rmse_threshold=Config.RECONSTRUCTOR_RMSE_THRESHOLD)
        _save(lab, 'reconstructor', path, key, lambda p: save_reconstructor(params, p))

    execute(lab, 'train:reconstructor', key, body, lambda: checkpoint_current(path, key))


def train_ae_stage(lab):
    key = stage_key(lab, 'corpus', 'codec', 'editors', 'edits', 'baselines')
    names = ('ae', 'ae_adv', 'ae_ft')
    paths = {n: lab.checkpoint(n) for n in names}

    def body():
        b = lab.cfg.baselines
        payload_len = 8 * b.payload_chars
        images = lab.images('train')
        plain = ae_train(images, payload_len, b.ae_lam, b.ae_epochs, lab.cfg.seed,
                         error_threshold=Config.AE_BIT_ERROR_THRESHOLD)
        _save(lab, 'ae', paths['ae'], key, lambda p: save_ae(plain, p))
        adversarial = ae_train_adversarial(images, payload_len, b.ae_lam, b.alpha_noise, b.ae_epochs,
                                           lab.cfg.seed, error_threshold=Config.AE_BIT_ERROR_THRESHOLD)
        _save(lab, 'ae', paths['ae_adv'], key, lambda p: save_ae(adversarial, p))

        # Fine-tune on edited images, split evenly across the edit models
        editors = [lab.get_editor(e.name) for e in lab.cfg.editors]
        spec = lab.edit_specs()[0]
        rng = np.random.default_rng(lab.cfg.seed + 1)
        pairs = []
        for i, x in enumerate(lab.images('aux')):
            bits = text_to_bits(random_text(rng, b.payload_chars))
            x_hat = quantize(ae_embed(plain, x, bits))
            editor = editors[i % len(editors)]
            pairs.append((editor(x_hat, replace(spec, seed=image_seed(lab.cfg.seed, i))), bits))
        tuned = ae_finetune_on_edits(plain, pairs, b.finetune_epochs, lab.cfg.seed)
        _save(lab, 'ae', paths['ae_ft'], key, lambda p: save_ae(tuned, p))

    execute(lab, 'train:ae', key, body, lambda: all(checkpoint_current(p, key) for p in paths.values()))


def control_pairs(lab, images: List[np.ndarray], editor) -> List[DistinguisherPair]:
    """Raw alpha = 1 overlay (no optimization) pairs; a visible watermark the distinguisher should catch"""
    w = lab.watermark()
    pairs = []
    for i, x in enumerate(images):
        overlay = quantize(np.clip(x + w, 0.0, 1.0))
        seed = image_seed(lab.cfg.seed, i)
        pairs.append(DistinguisherPair(overlay, editor(overlay, seed), 1))
        pairs.append(DistinguisherPair(x, editor(x, seed), 0))
    return pairs


def train_distinguisher_stage(lab):
    key = stage_key(lab, 'corpus', 'codec', 'editors', 'edits', 'watermark', 'injection', 'game')
    paths = {n: lab.checkpoint(n) for n in ('distinguisher', 'distinguisher_control', 'distinguisher_shuffled')}

    def body():
        g = lab.cfg.game
        images = lab.images('aux')[:g.distinguisher_images]
        editor = default_editor(lab)
        pairs = build_distinguisher_pairs(images, lab.get_codec(), lab.watermark(), lab.injection_config(),
                                          editor, lab.cfg.seed)
        params = train_distinguisher(pairs, g.distinguisher_epochs, lab.cfg.seed)
        _save(lab, 'distinguisher', paths['distinguisher'], key, lambda p: save_classifier(params, p))
        control = train_distinguisher(control_pairs(lab, images, editor), g.distinguisher_epochs, lab.cfg.seed)
        _save(lab, 'distinguisher', paths['distinguisher_control'], key, lambda p: save_classifier(control, p))
        shuffled = train_distinguisher(shuffle_pair_labels(pairs, lab.cfg.seed + 3), g.distinguisher_epochs,
                                       lab.cfg.seed)
        _save(lab, 'distinguisher', paths['distinguisher_shuffled'], key, lambda p: save_classifier(shuffled, p))

    execute(lab, 'train:distinguisher', key, body, lambda: all(checkpoint_current(p, key) for p in paths.values()))


def patch_samples(lab, images: List[np.ndarray], alphas: List[float], editor) -> Tuple[list, list, list]:
    """
    Edited corner regions of patch-watermarked (label 1) and clean (label 0) images

    Returns:
        Tuple of (regions, labels, alphas per sample)
    """
    size = lab.cfg.patch.size
    patch = watermark_patch(lab)
    codec = lab.get_codec()
    regions, labels, used = [], [], []
    for i, (x, alpha) in enumerate(zip(images, alphas)):
        target = overlay_patch(x, patch, corner_position(x.shape, patch.shape), alpha)
        x_hat, _ = inject_to_target(codec, x, target, lab.injection_config(alpha=alpha))
        seed = image_seed(lab.cfg.seed, i)
        regions.append(corner_region(editor(quantize(x_hat), seed), size))
        regions.append(corner_region(editor(x, seed), size))
        labels.extend([1, 0])
        used.extend([alpha, alpha])
    return regions, labels, used


def patch_reconstruction_pairs(lab, images: List[np.ndarray], regions: List[np.ndarray],
                               labels: List[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Watermarked corners map to the patch, clean corners to their own unedited pixels"""
    patch = watermark_patch(lab)
    pairs = []
    for i, (region, label) in enumerate(zip(regions, labels)):
        target = patch if label == 1 else corner_region(images[i // 2], lab.cfg.patch.size)
        pairs.append((region, target))
    return pairs


def train_patch_stage(lab):
    key = stage_key(lab, 'corpus', 'codec', 'editors', 'edits', 'injection', 'patch', 'extract')
    paths = {n: lab.checkpoint(n) for n in ('patch_classifier', 'patch_reconstructor')}

    def body():
        images = lab.images('aux')[:lab.cfg.patch.images]
        rng = np.random.default_rng(lab.cfg.seed + 3)
        alphas = rng.uniform(0.1, 1.0, len(images)).tolist()
        regions, labels, _ = patch_samples(lab, images, alphas, default_editor(lab))
        params = train_patch_classifier(regions, labels, lab.cfg.patch.classifier_epochs, lab.cfg.seed)
        _save(lab, 'patch', paths['patch_classifier'], key, lambda p: save_classifier(params, p))
        restorer = train_reconstructor(patch_reconstruction_pairs(lab, images, regions, labels),
                                       lab.cfg.extract.reconstructor_epochs, lab.cfg.seed,
                                       rmse_threshold=Config.RECONSTRUCTOR_RMSE_THRESHOLD)
        _save(lab, 'patch', paths['patch_reconstructor'], key, lambda p: save_reconstructor(restorer, p))

    execute(lab, 'train:patch', key, body, lambda: all(checkpoint_current(p, key) for p in paths.values()))


def run_training(lab, stage_filter: str = None):
    """Train every model, in dependency order"""
    if stage_filter is not None and stage_filter not in TRAIN_STAGES:
        raise ConfigError(f"Unknown training stage {stage_filter!r}; choose from {TRAIN_STAGES}")
    wanted = lambda name: stage_filter is None or stage_filter == name
    if wanted('codec'):
        train_codec_stage(lab)
    if wanted('editors'):
        for editor in lab.cfg.editors:
            train_editor_stage(lab, editor)
    if wanted('recognizer'):
        train_recognizer_stage(lab)
    if wanted('reconstructor'):
        train_reconstructor_stage(lab)
    if wanted('ae'):
        train_ae_stage(lab)
    if wanted('distinguisher'):
        train_distinguisher_stage(lab)
    if wanted('patch'):
        train_patch_stage(lab)
