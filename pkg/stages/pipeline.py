"""
Inject, edit and extract stages over the evaluation split, plus the baseline watermarks
"""
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import logging

from models.baselines import (DctWatermarkConfig, ae_decode, ae_embed, bit_accuracy, dct_embed, dct_extract,
                              random_text, text_to_bits)
from models.evalgame import embedding_distance
from models.extract import WatermarkExtractor, metric_summary
from models.riw import WatermarkInjector
from stages import execute, marker_current, parallel_map, stage_key
from utils.errors import ConfigError
from utils.imaging import TransformSpec, apply_transform, image_seed
from utils.storage import load_png, quantize, save_json, save_png

logger = logging.getLogger(__name__)

CLEAN_RUN = 'clean'

# Classical transforms applied to the baseline watermarks
BASELINE_TRANSFORMS = {
    'crop-0.75': TransformSpec('crop', {'fraction': 0.75}),
    'noise-0.02': TransformSpec('gaussian_noise', {'sigma': 0.02}),
    'mask-0.1': TransformSpec('mask', {'fraction': 0.1}),
    'rotate-15': TransformSpec('rotate', {'degrees': 15.0}),
    'brightness-1.2': TransformSpec('brightness', {'factor': 1.2}),
    'resize-0.5': TransformSpec('resize', {'factor': 0.5}),
}

AE_SCHEMES = {'ae': 'ae', 'ae-adv': 'ae_adv', 'ae-ft': 'ae_ft'}


@dataclass(frozen=True)
class Run:
    """One injection setting applied to the first `count` evaluation images (all when None)"""

    name: str
    alpha: float
    lam: float
    count: Optional[int] = None


def planned_runs(lab) -> List[Run]:
    """Main run at the configured alpha/lambda, then one run per alpha and per lambda grid point"""
    i, s = lab.cfg.injection, lab.cfg.sweep
    runs = [Run('main', i.alpha, i.lam)]
    runs += [Run(f'alpha-{k}', a, i.lam, s.images) for k, a in enumerate(s.alpha_grid)]
    runs += [Run(f'lambda-{k}', i.alpha, lam, s.images) for k, lam in enumerate(s.lambda_grid)]
    return runs


def run_items(lab, run: Run) -> List[Tuple[int, str, np.ndarray]]:
    items = lab.corpus()['eval']
    if run.count is not None:
        items = items[:run.count]
    return [(index, image_id, img) for index, (image_id, img) in enumerate(items)]


def edit_label(spec) -> str:
    return f'{spec.prompt}-t{spec.t_edit}'


def edit_targets(lab) -> List[Tuple[str, str, object]]:
    """(editor name, edit label, EditSpec) for every configured combination"""
    return [(e.name, edit_label(spec), spec) for e in lab.cfg.editors for spec in lab.edit_specs()]


def seeded(lab, spec, index: int):
    """Edit spec with the per-image seed shared by the clean and watermarked copies"""
    return replace(spec, seed=image_seed(lab.cfg.seed, index))


def _key(lab, run: Run, stage: str, **extra) -> str:
    sections = ['corpus', 'codec', 'watermark', 'injection']
    if stage in ('edit', 'extract'):
        sections += ['editors', 'edits']
    if stage == 'extract':
        sections += ['extract']
    return stage_key(lab, *sections, run=asdict(run), stage=stage, **extra)


def _filtered(runs: List[Run], stage_filter: Optional[str]) -> List[Run]:
    """Runs named by the filter: an exact run name or a sweep prefix such as 'alpha'"""
    if stage_filter is None:
        return runs
    selected = [r for r in runs if r.name == stage_filter or r.name.startswith(f'{stage_filter}-')]
    if not selected:
        raise ConfigError(f"Stage filter {stage_filter!r} matches no run; choose from {[r.name for r in runs]}")
    return selected


# --------------------------------------------------------------------------- inject

def inject_run(lab, run: Run):
    out = lab.path('inject', run.name)
    marker = out / 'reports.json'
    key = _key(lab, run, 'inject')

    def body():
        injector = WatermarkInjector(lab.get_codec(), lab.injection_config(run.alpha, run.lam), lab.cfg.jobs)
        w = lab.watermark()

        def one(item):
            index, image_id, x = item
            try:
                return image_id, injector.inject(x, w)
            except ValueError as e:
                logger.warning(f"Injection failed for {image_id}: {e}")
                lab.manifest.record_failure(f'inject:{run.name}', image_id, str(e))
                return image_id, None

        reports = {}
        for image_id, result in parallel_map(lab.cfg.jobs, one, run_items(lab, run)):
            if result is None:
                continue
            x_hat, report = result
            png = save_png(x_hat, out / f'{image_id}.png')
            lab.manifest.record_artifact(png, 'inject', 'png', key)
            reports[image_id] = {
                'objective': report.objective,
                'initial_objective': report.totals[0],
                'budget': report.budget,
                'wall_time': report.wall_time,
                'trailing_non_increasing': report.trailing_non_increasing(),
            }
        save_json({'config_hash': key, 'run': asdict(run), 'images': reports}, marker)
        lab.manifest.record_artifact(marker, 'inject', 'json', key)

    execute(lab, f'inject:{run.name}', key, body, lambda: marker_current(marker, key))


def run_inject(lab, stage_filter: Optional[str] = None):
    for run in _filtered(planned_runs(lab), stage_filter):
        inject_run(lab, run)


# --------------------------------------------------------------------------- edit

def _edit_set(lab, items, source, out_dir: Path, key: str, stage: str) -> int:
    """Edit every available source image with every (editor, spec); returns images written"""
    written = 0
    for editor_name, label, spec in edit_targets(lab):
        editor = lab.get_editor(editor_name)

        def one(item):
            index, image_id, x = item
            try:
                return image_id, editor(x, seeded(lab, spec, index))
            except ValueError as e:
                logger.warning(f"Edit failed for {image_id} ({editor_name}/{label}): {e}")
                lab.manifest.record_failure(stage, image_id, str(e))
                return image_id, None

        available = [(i, image_id, source(image_id, x)) for i, image_id, x in items]
        available = [item for item in available if item[2] is not None]
        for image_id, edited in parallel_map(lab.cfg.jobs, one, available):
            if edited is None:
                continue
            png = save_png(edited, out_dir / editor_name / label / f'{image_id}.png')
            lab.manifest.record_artifact(png, 'edit', 'png', key)
            written += 1
    return written


def edit_run(lab, run: Run):
    out = lab.path('edit', run.name)
    marker = out / 'edits.json'
    key = _key(lab, run, 'edit')
    inject_dir = lab.path('inject', run.name)

    def injected(image_id, x):
        path = inject_dir / f'{image_id}.png'
        return load_png(path) if path.exists() else None

    def body():
        if not (inject_dir / 'reports.json').exists():
            raise FileNotFoundError(f"No injected images for run {run.name}; run the inject stage first")
        items = run_items(lab, run)
        written = _edit_set(lab, items, injected, out, key, f'edit:{run.name}')
        if run.name == 'main':
            written += _edit_set(lab, items, lambda image_id, x: x, lab.path('edit', CLEAN_RUN), key,
                                 f'edit:{CLEAN_RUN}')
        save_json({'config_hash': key, 'run': asdict(run), 'images': written}, marker)
        lab.manifest.record_artifact(marker, 'edit', 'json', key)

    execute(lab, f'edit:{run.name}', key, body, lambda: marker_current(marker, key))


def run_edit(lab, stage_filter: Optional[str] = None):
    for run in _filtered(planned_runs(lab), stage_filter):
        edit_run(lab, run)


# --------------------------------------------------------------------------- extract

def _extract_rows(lab, run: Run, extractor: WatermarkExtractor, reconstructed: bool):
    """Manifest rows and per-edit metrics of one run"""
    text = lab.cfg.watermark.text
    semantic, texture = lab.get_features()
    rows, metrics = [], {}
    for editor_name, label, _ in edit_targets(lab):
        edit_model = f'{editor_name}/{label}'
        results = []
        for _, image_id, _ in run_items(lab, run):
            edited_path = lab.path('edit', run.name, editor_name, label, f'{image_id}.png')
            injected_path = lab.path('inject', run.name, f'{image_id}.png')
            if not edited_path.exists() or not injected_path.exists():
                continue
            x_e, x_hat = load_png(edited_path), load_png(injected_path)
            try:
                result = extractor.extract(x_e, text)
            except ValueError as e:
                logger.warning(f"Extraction failed for {image_id} ({edit_model}): {e}")
                lab.manifest.record_failure(f'extract:{run.name}', image_id, str(e))
                continue
            sem = embedding_distance(semantic, x_hat, x_e)
            vis = embedding_distance(texture, x_hat, x_e)
            results.append(result)
            for row in result.rows(image_id):
                rows.append({
                    'image_id': image_id, 'alpha': run.alpha, 'lambda': run.lam, 'edit_model': edit_model,
                    'segment_index': row['segment_index'], 'decoded': row['decoded'], 'correct': bool(row['correct']),
                    'confidence': row['confidence_mean'], 'sem_dist': sem, 'vis_dist': vis,
                    'reconstructed': reconstructed,
                })
        if results:
            metrics[edit_model] = metric_summary(results, text)
    return rows, metrics


def extraction_scores(lab, extractor: WatermarkExtractor) -> pd.DataFrame:
    """Extraction scores of edited watermarked (label 1) and edited clean (label 0) main-run images"""
    text = lab.cfg.watermark.text
    records = []
    for editor_name, label, _ in edit_targets(lab):
        for _, image_id, _ in run_items(lab, Run('main', 0.0, 0.0)):
            for run_name, y in (('main', 1), (CLEAN_RUN, 0)):
                path = lab.path('edit', run_name, editor_name, label, f'{image_id}.png')
                if path.exists():
                    records.append({'edit_model': f'{editor_name}/{label}', 'image_id': image_id, 'label': y,
                                    'score': extractor.score(load_png(path), text)})
    return pd.DataFrame(records, columns=['edit_model', 'image_id', 'label', 'score'])


def extract_run(lab, run: Run):
    out = lab.path('extract', run.name)
    marker = out / 'metrics.json'
    use_reconstructor = lab.checkpoint('reconstructor').exists()
    key = _key(lab, run, 'extract', reconstructor=use_reconstructor)

    def body():
        if not lab.path('edit', run.name, 'edits.json').exists():
            raise FileNotFoundError(f"No edited images for run {run.name}; run the edit stage first")
        extractor = lab.get_extractor()
        rows, metrics = _extract_rows(lab, run, extractor, reconstructed=False)
        report = {'config_hash': key, 'run': asdict(run), 'metrics': metrics}
        if use_reconstructor:
            extra, report['reconstructed'] = _extract_rows(lab, run, lab.get_extractor(reconstruct=True), True)
            rows += extra
        lab.manifest.replace_eval_rows('riw', run.name, rows)
        if run.name == 'main':
            scores = out / 'scores.csv'
            scores.parent.mkdir(parents=True, exist_ok=True)
            extraction_scores(lab, extractor).to_csv(scores, index=False, float_format='%.6f')
            lab.manifest.record_artifact(scores, 'extract', 'csv', key)
        save_json(report, marker)
        lab.manifest.record_artifact(marker, 'extract', 'json', key)
        for edit_model, m in metrics.items():
            logger.info(f"{run.name} {edit_model}: D_all={m['d_all']:.3f} D_word={m['d_word']:.3f} "
                        f"D_letter={m['d_letter']:.3f} (n={m['n']})")

    execute(lab, f'extract:{run.name}', key, body, lambda: marker_current(marker, key))


def run_extract(lab, stage_filter: Optional[str] = None):
    """Extract every run, then the baselines; the filter 'baselines' runs only the latter"""
    if stage_filter != 'baselines':
        for run in _filtered(planned_runs(lab), stage_filter):
            extract_run(lab, run)
    if stage_filter in (None, 'baselines'):
        run_baselines(lab)


# --------------------------------------------------------------------------- baselines

def _payloads(lab, count: int) -> List[str]:
    rng = np.random.default_rng(lab.cfg.seed + 5)
    return [text_to_bits(random_text(rng, lab.cfg.baselines.payload_chars)) for _ in range(count)]


def _baseline_row(image_id: str, edit_model: str, decoded: str, truth: str) -> dict:
    return {
        'image_id': image_id, 'alpha': None, 'lambda': None, 'edit_model': edit_model, 'segment_index': 0,
        'decoded': decoded, 'correct': decoded == truth, 'confidence': bit_accuracy(decoded, truth),
        'sem_dist': None, 'vis_dist': None, 'reconstructed': False,
    }


def _attack_baseline(lab, embed, decode) -> List[dict]:
    """Embed a random payload per image, then decode it unedited, under transforms and after every edit"""
    items = run_items(lab, Run('main', 0.0, 0.0))
    payloads = _payloads(lab, len(items))
    targets = edit_targets(lab)
    rows = []
    for (index, image_id, x), bits in zip(items, payloads):
        marked = quantize(embed(x, bits))
        rows.append(_baseline_row(image_id, 'none', decode(marked), bits))
        for name, transform in BASELINE_TRANSFORMS.items():
            attacked = apply_transform(marked, TransformSpec(transform.kind, {**transform.params, 'seed': index}))
            rows.append(_baseline_row(image_id, f'transform/{name}', decode(attacked), bits))
        for editor_name, label, spec in targets:
            edited = lab.get_editor(editor_name)(marked, seeded(lab, spec, index))
            rows.append(_baseline_row(image_id, f'{editor_name}/{label}', decode(edited), bits))
    return rows


def run_baselines(lab):
    """DCT and autoencoder watermarks under the same edits as the main run"""
    b = lab.cfg.baselines
    schemes = {'dct': (
        lambda x, bits: dct_embed(x, DctWatermarkConfig(payload=bits, strength=b.dct_strength)),
        lambda x: dct_extract(x, DctWatermarkConfig(payload='0' * 8 * b.payload_chars, strength=b.dct_strength)),
    )}
    for scheme, checkpoint in AE_SCHEMES.items():
        if lab.checkpoint(checkpoint).exists():
            schemes[scheme] = (
                lambda x, bits, c=checkpoint: ae_embed(lab.get_ae(c), x, bits),
                lambda x, c=checkpoint: ae_decode(lab.get_ae(c), x),
            )
        else:
            logger.warning(f"Skipping baseline {scheme}: checkpoint {checkpoint} not trained")

    for scheme, (embed, decode) in schemes.items():
        key = stage_key(lab, 'corpus', 'editors', 'edits', 'baselines', scheme=scheme,
                        trained=lab.checkpoint(AE_SCHEMES.get(scheme, 'none')).exists())
        marker = lab.path('extract', 'baselines', f'{scheme}.json')

        def body(scheme=scheme, embed=embed, decode=decode, key=key, marker=marker):
            rows = _attack_baseline(lab, embed, decode)
            lab.manifest.replace_eval_rows(scheme, 'main', rows)
            frame = pd.DataFrame(rows)
            summary = frame.groupby('edit_model').agg(word=('correct', 'mean'), bits=('confidence', 'mean'))
            save_json({'config_hash': key, 'scheme': scheme, 'accuracy': summary.to_dict(orient='index')}, marker)
            lab.manifest.record_artifact(marker, 'extract', 'json', key)

        execute(lab, f'baseline:{scheme}', key, body, lambda marker=marker, key=key: marker_current(marker, key))
