"""
Static result plots (Agg backend, PNG files)
"""
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import logging

logger = logging.getLogger(__name__)

METRIC_STYLE = {
    'd_all': ('#e74c3c', 'o', 'D_all'),
    'd_word': ('#2980b9', 's', 'D_word'),
    'd_letter': ('#27ae60', '^', 'D_letter'),
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    logger.info(f"Saved plot {path}")
    return path


def plot_metric_curve(frame: pd.DataFrame, x: str, path: Path, xlabel: str, metrics: Sequence[str],
                      logx: bool = False, title: str = '') -> Path:
    """D metrics (rows of `frame`) against column `x`"""
    fig, ax = plt.subplots(figsize=(7, 5))
    for metric in metrics:
        color, marker, label = METRIC_STYLE[metric]
        ax.plot(frame[x], frame[metric] * 100, color=color, marker=marker, linewidth=2, markersize=7, label=label)
    if logx:
        ax.set_xscale('log', base=2)
    ax.set_xlabel(xlabel, fontsize=12)
    ax.set_ylabel('Extraction accuracy (%)', fontsize=12)
    ax.set_title(title, fontsize=12)
    ax.set_ylim(0, 105)
    ax.legend(fontsize=11)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_roc(curves: Dict[str, object], path: Path, title: str = '') -> Path:
    """One line per RocCurve, labelled with its AUC"""
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, linewidth=2, label=f'{name} (AUC {curve.auc:.3f})')
    ax.plot([0, 1], [0, 1], color='grey', linestyle='--', linewidth=1)
    ax.set_xlabel('False positive rate', fontsize=12)
    ax.set_ylabel('True positive rate', fontsize=12)
    ax.set_title(title, fontsize=12)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=10, loc='lower right')
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_deciles(curve: List[dict], path: Path, xlabel: str, metrics: Sequence[str], title: str = '') -> Path:
    """Accuracy per edit-distance bin, plotted at the bin midpoint"""
    frame = pd.DataFrame(curve)
    frame['mid'] = (frame['lo'] + frame['hi']) / 2
    return plot_metric_curve(frame, 'mid', path, xlabel, metrics, title=title)
