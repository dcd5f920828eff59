"""
Evaluation stage: results export, accuracy curves, ROC curves, protection boundary,
baseline table, corner-patch detection, acceptance checks and the watermark game
"""
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
import logging

from config import Config
from models.evalgame import (ALPHA_GRID, EvalRecord, ScoredSample, boundary_analysis, classifier_score,
                             codec_roundtrip_editor, distinguisher_score, noise_editor, patch_distance_samples,
                             roc_auc, run_game)
from models.extract import ExtractionResult, SegmentRecord, metric_summary, reconstruct
from stages import execute, marker_current, stage_key
from stages.pipeline import CLEAN_RUN, edit_targets, planned_runs, run_items
from stages.plots import plot_deciles, plot_metric_curve, plot_roc
from stages.training import default_editor, patch_samples, watermark_patch
from utils.errors import AcceptanceError, StageError
from utils.storage import load_json, load_png, save_json

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- frame helpers

def frame_results(frame: pd.DataFrame, truth: str) -> List[ExtractionResult]:
    """Rebuild one ExtractionResult per (edit model, image) from manifest rows"""
    results = []
    for _, group in frame.groupby(['edit_model', 'image_id'], sort=True):
        group = group.sort_values('segment_index', kind='mergesort')
        segments = [SegmentRecord(str(d), [float(c)]) for d, c in zip(group['decoded'], group['confidence'])]
        results.append(ExtractionResult(segments, truth=truth))
    return results


def frame_records(frame: pd.DataFrame, truth: str) -> List[EvalRecord]:
    records = []
    for (edit_model, image_id), group in frame.groupby(['edit_model', 'image_id'], sort=True):
        first = group.iloc[0]
        result = frame_results(group, truth)[0]
        records.append(EvalRecord(image_id=image_id, alpha=float(first['alpha']), lam=float(first['lambda']),
                                  edit_model=edit_model, result=result, sem_dist=float(first['sem_dist']),
                                  vis_dist=float(first['vis_dist'])))
    return records


def _select(frame: pd.DataFrame, run: str, reconstructed: bool = False) -> pd.DataFrame:
    return frame[(frame['run'] == run) & (frame['reconstructed'].astype(bool) == reconstructed)]


def sweep_curve(frame: pd.DataFrame, prefix: str, x: str, truth: str, reconstructed: bool = False) -> pd.DataFrame:
    """D metrics per run of a sweep, over all edit models"""
    rows = []
    for run in _sweep_runs(frame, prefix):
        subset = _select(frame, run, reconstructed)
        if len(subset):
            first = subset.iloc[0]
            rows.append({'run': run, x: float(first[x]),
                         **metric_summary(frame_results(subset, truth), truth)})
    return pd.DataFrame(rows).sort_values(x, kind='mergesort').reset_index(drop=True) if rows else pd.DataFrame()


def _sweep_runs(frame: pd.DataFrame, prefix: str) -> List[str]:
    return sorted({r for r in frame['run'].unique() if r.startswith(f'{prefix}-')})


def missing_stages(lab) -> List[str]:
    """Names of inject/edit/extract stages without outputs"""
    missing = []
    for run in planned_runs(lab):
        for stage, marker in (('inject', 'reports.json'), ('edit', 'edits.json'), ('extract', 'metrics.json')):
            if not lab.path(stage, run.name, marker).exists():
                missing.append(f'{stage}:{run.name}')
    return missing


def trend_violations(values: Sequence[float], increasing: bool, tolerance: float) -> List[int]:
    """Indices i where values[i+1] moves against the expected direction by more than tolerance"""
    sign = 1.0 if increasing else -1.0
    return [i for i in range(len(values) - 1) if sign * (values[i + 1] - values[i]) < -tolerance]


def _write_curve(lab, curve, path):
    path = lab.path('eval', path)
    pd.DataFrame(curve.rows()).to_csv(path, index=False, float_format='%.6f')
    return path


# --------------------------------------------------------------------------- report parts

def main_metrics(frame: pd.DataFrame, truth: str) -> Dict[str, dict]:
    main = _select(frame, 'main')
    return {m: metric_summary(frame_results(g, truth), truth) for m, g in main.groupby('edit_model', sort=True)}


def boundary_report(lab, frame: pd.DataFrame, truth: str, metrics: Sequence[str]) -> dict:
    records = frame_records(_select(frame, 'main'), truth)
    report = {}
    for distance in ('sem_dist', 'vis_dist'):
        analysis = boundary_analysis(records, lab.cfg.boundary_percentile, truth, distance=distance)
        values = [r.sem_dist if distance == 'sem_dist' else r.vis_dist for r in records]
        accuracy = [int(any(r.result.indicators or [])) for r in records]
        rho = spearmanr(values, accuracy).correlation if len(set(values)) > 1 and len(set(accuracy)) > 1 else 0.0
        analysis['spearman'] = float(rho)
        report[distance] = analysis
        plot_deciles(analysis['curve'], lab.path('plots', f'boundary_{distance}.png'),
                     'Semantic edit distance' if distance == 'sem_dist' else 'Visual edit distance', metrics,
                     title='Extraction accuracy vs edit distance')
    return report


def extraction_roc(lab):
    scores = pd.read_csv(lab.path('extract', 'main', 'scores.csv'))
    curves = {}
    for edit_model, group in scores.groupby('edit_model', sort=True):
        curves[edit_model] = roc_auc([ScoredSample(float(s), int(l)) for s, l in zip(group['score'], group['label'])])
    curves['all'] = roc_auc([ScoredSample(float(s), int(l)) for s, l in zip(scores['score'], scores['label'])])
    _write_curve(lab, curves['all'], 'roc_extraction.csv')
    plot_roc(curves, lab.path('plots', 'roc_extraction.png'), title='Watermark extraction score')
    return curves


def distinguisher_roc(lab):
    """Distinguisher scores on the evaluation split (first edit target), or None when untrained"""
    if not lab.checkpoint('distinguisher').exists():
        logger.warning("Distinguisher not trained; skipping the invisibility report")
        return None
    params = lab.get_classifier('distinguisher')
    editor_name, label, _ = edit_targets(lab)[0]
    samples = []
    for _, image_id, x in run_items(lab, planned_runs(lab)[0]):
        paths = {
            1: (lab.path('inject', 'main', f'{image_id}.png'), lab.path('edit', 'main', editor_name, label,
                                                                        f'{image_id}.png')),
            0: (None, lab.path('edit', CLEAN_RUN, editor_name, label, f'{image_id}.png')),
        }
        for y, (image_path, edited_path) in paths.items():
            if not edited_path.exists() or (image_path is not None and not image_path.exists()):
                continue
            image = x if image_path is None else load_png(image_path)
            samples.append(ScoredSample(distinguisher_score(params, image, load_png(edited_path)), y))
    curve = roc_auc(samples)
    _write_curve(lab, curve, 'roc_distinguisher.csv')
    report = {'auc': curve.auc, 'holdout_auc': params.auc}
    curves = {'watermarked': curve}
    if lab.checkpoint('distinguisher_control').exists():
        report['control_holdout_auc'] = lab.get_classifier('distinguisher_control').auc
    if lab.checkpoint('distinguisher_shuffled').exists():
        report['shuffled_holdout_auc'] = lab.get_classifier('distinguisher_shuffled').auc
    plot_roc(curves, lab.path('plots', 'roc_distinguisher.png'), title='Invisibility distinguisher')
    return report


def reconstruction_benefit(frame: pd.DataFrame, truth: str) -> pd.DataFrame:
    rows = []
    for run in sorted(frame['run'].unique()):
        plain, rebuilt = _select(frame, run, False), _select(frame, run, True)
        if not len(plain) or not len(rebuilt):
            continue
        a, b = metric_summary(frame_results(plain, truth), truth), metric_summary(frame_results(rebuilt, truth), truth)
        rows.append({'run': run, 'alpha': float(plain.iloc[0]['alpha']),
                     **{f'{m}_plain': a[m] for m in ('d_all', 'd_word', 'd_letter')},
                     **{f'{m}_reconstructed': b[m] for m in ('d_all', 'd_word', 'd_letter')},
                     'gain': b['d_all'] - a['d_all']})
    return pd.DataFrame(rows)


def baseline_table(frame: pd.DataFrame, baselines: pd.DataFrame, truth: str) -> pd.DataFrame:
    """Word and bit accuracy per scheme and edit model (RIW word accuracy is D_word)"""
    rows = [{'scheme': 'riw', 'edit_model': m, 'word_accuracy': v['d_word'], 'bit_accuracy': np.nan}
            for m, v in main_metrics(frame, truth).items()]
    if len(baselines):
        grouped = baselines.groupby(['scheme', 'edit_model'], sort=True).agg(
            word_accuracy=('correct', 'mean'), bit_accuracy=('confidence', 'mean')).reset_index()
        rows += grouped.to_dict(orient='records')
    return pd.DataFrame(rows, columns=['scheme', 'edit_model', 'word_accuracy', 'bit_accuracy'])


def patch_report(lab) -> Optional[dict]:
    """Corner-patch detection AUC per alpha for the three detectors; cached on its own marker"""
    names = ('patch_classifier', 'patch_reconstructor')
    if not all(lab.checkpoint(n).exists() for n in names):
        logger.warning("Patch models not trained; skipping the image-watermark report")
        return None
    marker = lab.path('eval', 'patch.json')
    key = stage_key(lab, 'corpus', 'codec', 'editors', 'edits', 'injection', 'patch', 'extract',
                    checkpoints=[load_json(lab.checkpoint(n).with_suffix('.json')).get('config_hash') for n in names])

    def body():
        images = lab.images('eval')[:lab.cfg.patch.images]
        patch = watermark_patch(lab)
        classifier = lab.get_classifier('patch_classifier')
        restorer = lab.get_reconstructor('patch_reconstructor')
        editor = default_editor(lab)
        rows, curves = [], {}
        for alpha in ALPHA_GRID:
            regions, labels, _ = patch_samples(lab, images, [alpha] * len(images), editor)
            detectors = {
                'pixel_distance': patch_distance_samples(regions, labels, patch),
                'reconstructed_distance': patch_distance_samples([reconstruct(restorer, r) for r in regions],
                                                                 labels, patch),
                'classifier': [ScoredSample(classifier_score(classifier, r), l) for r, l in zip(regions, labels)],
            }
            for name, samples in detectors.items():
                curve = roc_auc(samples)
                rows.append({'alpha': alpha, 'detector': name, 'auc': curve.auc})
                curves[f'{name} alpha={alpha:.1f}'] = curve
        table = pd.DataFrame(rows)
        table.to_csv(lab.path('eval', 'patch_auc.csv'), index=False, float_format='%.6f')
        plot_roc({k: v for k, v in curves.items() if k.endswith(f'alpha={ALPHA_GRID[1]:.1f}')},
                 lab.path('plots', 'roc_patch.png'), title=f'Corner patch detection (alpha={ALPHA_GRID[1]})')
        save_json({'config_hash': key, 'auc': rows}, marker)
        lab.manifest.record_artifact(marker, 'eval', 'json', key)

    execute(lab, 'eval:patch', key, body, lambda: marker_current(marker, key))
    return load_json(marker)['auc']


# --------------------------------------------------------------------------- acceptance

def acceptance_checks(lab, summary: dict, alpha_curve: pd.DataFrame, table: pd.DataFrame,
                      reconstruction: pd.DataFrame) -> Dict[str, dict]:
    """Evaluate the desk-scale acceptance properties; each entry has 'passed' and 'detail'"""
    checks = {}

    budgets = [r['budget'] for run in planned_runs(lab)
               for r in load_json(lab.path('inject', run.name, 'reports.json'))['images'].values()]
    limit = lab.cfg.injection.eps + Config.BUDGET_TOLERANCE
    checks['budget'] = {'passed': bool(budgets) and max(budgets) <= limit,
                        'detail': f'max budget {max(budgets, default=float("nan")):.6f} <= {limit:.6f}'}

    d_word = {m: v['d_word'] for m, v in summary['main'].items()}
    checks['d_word'] = {'passed': min(d_word.values()) >= Config.MIN_D_WORD,
                        'detail': f'min D_word {min(d_word.values()):.3f} >= {Config.MIN_D_WORD}'}

    margins = []
    for edit_model, riw in d_word.items():
        others = table[(table['scheme'] != 'riw') & (table['edit_model'] == edit_model)]['word_accuracy']
        if len(others):
            margins.append(riw - float(others.max()))
    checks['baseline_margin'] = {
        'passed': bool(margins) and min(margins) >= Config.MIN_BASELINE_MARGIN,
        'detail': f'min margin {min(margins, default=float("nan")):.3f} >= {Config.MIN_BASELINE_MARGIN}',
    }

    if len(alpha_curve) > 1:
        tail = alpha_curve.iloc[1:]
        bad = {m: trend_violations(tail[m].tolist(), True, Config.TREND_TOLERANCE) for m in lab.cfg.metrics}
        checks['alpha_trend'] = {'passed': not any(bad.values()), 'detail': f'violations {bad}'}

    for distance, report in summary['boundary'].items():
        for metric in lab.cfg.metrics:
            values = [b[metric] for b in report['curve']]
            bad = trend_violations(values, False, Config.TREND_TOLERANCE)
            checks[f'boundary_{distance}_{metric}'] = {'passed': not bad, 'detail': f'violations at bins {bad}'}

    invisibility = summary.get('distinguisher')
    if invisibility is not None:
        lo, hi = Config.DISTINGUISHER_AUC_RANGE
        checks['distinguisher_auc'] = {'passed': lo <= invisibility['auc'] <= hi,
                                       'detail': f"AUC {invisibility['auc']:.3f} in [{lo}, {hi}]"}
        control = invisibility.get('control_holdout_auc')
        if control is not None:
            checks['control_auc'] = {'passed': control >= Config.CONTROL_MIN_AUC,
                                     'detail': f'control AUC {control:.3f} >= {Config.CONTROL_MIN_AUC}'}
        shuffled = invisibility.get('shuffled_holdout_auc')
        if shuffled is not None:
            tol = Config.SHUFFLED_AUC_TOLERANCE
            checks['shuffled_auc'] = {'passed': abs(shuffled - 0.5) <= tol,
                                      'detail': f'shuffled-label AUC {shuffled:.3f} within {tol} of 0.5'}

    if len(reconstruction):
        lowest = reconstruction.sort_values('alpha', kind='mergesort').iloc[0]
        checks['reconstruction_gain'] = {
            'passed': lowest['gain'] >= Config.MIN_RECONSTRUCTION_GAIN,
            'detail': f"gain {lowest['gain']:.3f} at alpha {lowest['alpha']:.4f} >= {Config.MIN_RECONSTRUCTION_GAIN}",
        }
    return checks


# --------------------------------------------------------------------------- stages

def run_eval(lab, check: bool = False) -> dict:
    """
    Build the report bundle under eval/ and plots/

    Raises:
        StageError: Inject/edit/extract outputs missing, or recorded artifacts changed on disk
            (nothing is written)
        AcceptanceError: check is True and an acceptance property fails
    """
    frame = lab.manifest.eval_frame('riw')
    missing = missing_stages(lab)
    if missing or not len(frame):
        raise StageError('eval', f"Incomplete stages: {', '.join(missing) or 'extract (no result rows)'}")
    problems = lab.manifest.verify()
    if problems:
        for problem in problems:
            logger.error(f"Manifest check: {problem}")
        raise StageError('eval', f"{len(problems)} recorded artifact(s) failed verification, first: {problems[0]}")

    truth = lab.cfg.watermark.text
    metrics = lab.cfg.metrics
    everything = lab.manifest.eval_frame()
    baselines = everything[everything['scheme'] != 'riw'].reset_index(drop=True)

    results_path = lab.manifest.export_results(lab.path('eval', 'results.csv'))
    baselines.to_csv(lab.path('eval', 'baselines.csv'), index=False, float_format='%.6f')
    lab.manifest.record_artifact(results_path, 'eval', 'csv', lab.config_hash)

    alpha_curve = sweep_curve(frame, 'alpha', 'alpha', truth)
    lambda_curve = sweep_curve(frame, 'lambda', 'lambda', truth)
    for name, curve, x, logx in (('alpha', alpha_curve, 'alpha', False), ('lambda', lambda_curve, 'lambda', True)):
        if len(curve):
            curve.to_csv(lab.path('eval', f'{name}_curve.csv'), index=False, float_format='%.6f')
            plot_metric_curve(curve, x, lab.path('plots', f'{name}_curve.png'),
                              'Watermark clarity alpha' if x == 'alpha' else 'Fidelity weight lambda',
                              metrics, logx=logx, title=f'Extraction accuracy vs {x}')

    summary = {
        'config_hash': lab.config_hash,
        'main': main_metrics(frame, truth),
        'boundary': boundary_report(lab, frame, truth, metrics),
        'extraction_auc': {m: c.auc for m, c in extraction_roc(lab).items()},
        'distinguisher': distinguisher_roc(lab),
    }
    save_json(summary['boundary'], lab.path('eval', 'boundary.json'))

    reconstruction = reconstruction_benefit(frame, truth)
    if len(reconstruction):
        reconstruction.to_csv(lab.path('eval', 'reconstruction.csv'), index=False, float_format='%.6f')
        summary['reconstruction'] = reconstruction.to_dict(orient='records')

    table = baseline_table(frame, baselines, truth)
    table.to_csv(lab.path('eval', 'baseline_table.csv'), index=False, float_format='%.6f')
    summary['baselines'] = table.to_dict(orient='records')
    summary['patch'] = patch_report(lab)

    checks = acceptance_checks(lab, summary, alpha_curve, table, reconstruction)
    summary['checks'] = checks
    save_json(summary, lab.path('eval', 'summary.json'))
    for name, c in checks.items():
        (logger.info if c['passed'] else logger.warning)(f"Check {name}: {'pass' if c['passed'] else 'FAIL'} "
                                                          f"({c['detail']})")

    failed = [name for name, c in checks.items() if not c['passed']]
    if check and failed:
        raise AcceptanceError(f"Acceptance checks failed: {', '.join(failed)}")
    return summary


def run_game_stage(lab, controls: bool = True) -> dict:
    """Play the watermark game with the default edit, plus identity and noise edit controls"""
    g = lab.cfg.game
    codec = lab.get_codec()
    extractor = lab.get_extractor(reconstruct=lab.cfg.extract.use_reconstructor)
    distinguisher = lab.get_classifier('distinguisher')
    editors = {'default': default_editor(lab)}
    if controls:
        editors['identity'] = codec_roundtrip_editor(codec)
        editors['noise'] = noise_editor

    report, rows = {'config_hash': lab.config_hash}, []
    for name, editor in editors.items():
        outcome = run_game(lab.images('eval'), lab.watermark_spec(), lab.injection_config(), editor, extractor,
                           distinguisher, g.trials, lab.cfg.seed, codec,
                           calibration_trials=g.calibration_trials, jobs=lab.cfg.jobs)
        report[name] = outcome.to_dict()
        rows.append({'editor': name, 'trials': outcome.trials, 'bob_win_rate': outcome.bob_win_rate,
                     'bob_ci_low': outcome.bob_ci[0], 'bob_ci_high': outcome.bob_ci[1],
                     'alice_win_rate': outcome.alice_win_rate, 'alice_ci_low': outcome.alice_ci[0],
                     'alice_ci_high': outcome.alice_ci[1], 'threshold': outcome.threshold})
    path = save_json(report, lab.path('eval', 'game.json'))
    table = pd.DataFrame(rows)
    table.to_csv(lab.path('eval', 'game_summary.csv'), index=False, float_format='%.6f')
    lab.manifest.record_artifact(path, 'game', 'json', lab.config_hash)
    logger.info(f"Game summary:\n{table.to_string(index=False)}")
    return report


def run_game_verb(lab):
    execute(lab, 'game', lab.config_hash, lambda: run_game_stage(lab))
