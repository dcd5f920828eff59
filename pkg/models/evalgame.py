"""
Evaluation harness
Owner/adversary game, invisibility distinguisher, ROC/AUC, embedding distances,
protection-boundary analysis and the corner image-watermark detectors
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score, roc_curve
from sklearn.model_selection import train_test_split
import logging

from models.codec import CodecParams, batch_tensor, decode, encode, to_tensor
from models.extract import (ExtractionResult, WatermarkExtractor, metric_d_all, metric_d_letter, metric_d_word,
                            pixel_distance)
from models.riw import InjectionConfig, inject
from utils.errors import ConvergenceError, ShapeMismatchError
from utils.imaging import WatermarkSpec, generate_image, render_watermark
from utils.storage import load_sidecar, load_state, quantize, save_checkpoint

logger = logging.getLogger(__name__)

ALPHA_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)

# (x, seed) -> edited x
Editor = Callable[[np.ndarray, int], np.ndarray]


# --------------------------------------------------------------------------- ROC

@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"Score must be finite, got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"Label must be 0 or 1, got {self.label}")


@dataclass
class RocCurve:
    fpr: List[float]
    tpr: List[float]
    thresholds: List[float]
    auc: float

    def rows(self) -> List[dict]:
        return [{'fpr': f, 'tpr': t, 'threshold': th} for f, t, th in zip(self.fpr, self.tpr, self.thresholds)]

    def equal_error_threshold(self) -> float:
        """Threshold where the false positive rate is closest to the false negative rate"""
        gaps = [abs(f - (1.0 - t)) for f, t in zip(self.fpr, self.tpr)]
        best = int(np.argmin(gaps))
        threshold = self.thresholds[best]
        if not math.isfinite(threshold):
            threshold = self.thresholds[min(best + 1, len(self.thresholds) - 1)]
        return float(threshold)


def roc_auc(samples: Sequence[ScoredSample]) -> RocCurve:
    """
    ROC curve at every distinct threshold and the tie-corrected AUC

    Raises:
        ValueError: Fewer than two classes present
    """
    labels = np.array([s.label for s in samples])
    scores = np.array([s.score for s in samples], dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise ValueError("ROC needs both positive and negative samples")
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    auc = float(roc_auc_score(labels, scores))
    return RocCurve(fpr.tolist(), tpr.tolist(), thresholds.tolist(), auc)


def wilson_interval(successes: int, n: int, z: float = 1.96) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion"""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


# --------------------------------------------------------------------------- binary classifiers

class BinaryConvClassifier(nn.Module):
    """Conv -> global pool -> logit"""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(2 * hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(1)


@dataclass
class DistinguisherParams:
    """Binary classifier over stacked inputs; held-out AUC is recorded after training"""

    model: BinaryConvClassifier
    seed: int
    epochs: int = 0
    auc: Optional[float] = None
    history: List[float] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {'seed': self.seed, 'epochs': self.epochs, 'auc': self.auc,
                'in_channels': self.model.in_channels, 'hidden': self.model.hidden}


@dataclass
class DistinguisherPair:
    """(image, edited image) with label 1 if the image carries a watermark"""

    image: np.ndarray
    edited: np.ndarray
    label: int


def _stack_pair(image: np.ndarray, edited: np.ndarray) -> np.ndarray:
    if image.shape != edited.shape:
        raise ShapeMismatchError(f"Pair shapes differ: {image.shape} vs {edited.shape}")
    return np.concatenate([image, edited], axis=2)


def train_binary_classifier(inputs: Sequence[np.ndarray], labels: Sequence[int], epochs: int, seed: int,
                            holdout: float = 0.2, batch_size: int = 32,
                            learning_rate: float = 1e-3, stage: str = 'distinguisher') -> DistinguisherParams:
    """
    Train a BinaryConvClassifier with BCE and record its held-out AUC

    A weak classifier is a valid outcome; only a non-finite loss is an error.
    """
    if not inputs:
        raise ValueError(f"No training samples for {stage}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError(f"{stage} training needs both labels")
    torch.manual_seed(seed)
    model = BinaryConvClassifier(inputs[0].shape[2])
    model.eval()
    params = DistinguisherParams(model=model, seed=seed)
    if epochs == 0:
        return params

    indices = np.arange(len(inputs))
    train_idx, test_idx = train_test_split(indices, test_size=holdout, random_state=seed, stratify=labels)
    x_train = batch_tensor([inputs[i] for i in train_idx])
    y_train = torch.as_tensor(labels[train_idx], dtype=torch.float32)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training {stage}: {len(train_idx)} samples, {epochs} epochs")
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(x_train), generator=generator)
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(model(x_train[batch]), y_train[batch])
            if not torch.isfinite(loss):
                raise ConvergenceError(stage, 'loss', float('inf'), 0.0)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        params.history.append(total / len(order))
    model.eval()

    with torch.no_grad():
        scores = torch.sigmoid(model(batch_tensor([inputs[i] for i in test_idx]))).numpy()
    held_out = labels[test_idx]
    params.epochs = epochs
    params.auc = float(roc_auc_score(held_out, scores)) if len(np.unique(held_out)) == 2 else None
    logger.info(f"{stage} held-out AUC: {params.auc}")
    return params


def train_distinguisher(pairs: Sequence[DistinguisherPair], epochs: int, seed: int, **kwargs) -> DistinguisherParams:
    """
    Train Alice's distinguisher on (image, edited image) pairs stacked to 2C channels

    Args:
        pairs: Labelled pairs (1 = watermarked)
        epochs: Training epochs
        seed: Seed for initialization, split and shuffling

    Returns:
        DistinguisherParams with held-out AUC (low AUC means an invisible watermark)
    """
    labels = [p.label for p in pairs]
    positives = sum(labels)
    if positives * 2 != len(labels):
        raise ValueError(f"Distinguisher pairs must be balanced, got {positives}/{len(labels)} positives")
    inputs = [_stack_pair(p.image, p.edited) for p in pairs]
    return train_binary_classifier(inputs, labels, epochs, seed, **kwargs)


def classifier_score(params: DistinguisherParams, x: np.ndarray) -> float:
    with torch.no_grad():
        return float(torch.sigmoid(params.model(to_tensor(x))).item())


def distinguisher_score(params: DistinguisherParams, image: np.ndarray, edited: np.ndarray) -> float:
    """Probability in [0, 1] that the pair is watermarked"""
    return classifier_score(params, _stack_pair(image, edited))


def build_distinguisher_pairs(corpus: Sequence[np.ndarray], codec: CodecParams, watermark: np.ndarray,
                              inject_cfg: InjectionConfig, editor: Editor, seed: int,
                              alphas: Sequence[float] = ALPHA_GRID,
                              shuffle_labels: bool = False) -> List[DistinguisherPair]:
    """
    Label x_hat/x_hat_e pairs 1 and x/x_e pairs 0, with alpha drawn per image from `alphas`

    x_hat is quantized to 8 bits before editing, as it would be when saved.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for i, x in enumerate(corpus):
        alpha = float(rng.choice(alphas))
        cfg = InjectionConfig(alpha=alpha, lam=inject_cfg.lam, eps=inject_cfg.eps, mu=inject_cfg.mu,
                              steps=inject_cfg.steps, norm=inject_cfg.norm, seed=inject_cfg.seed)
        x_hat, _ = inject(codec, x, watermark, cfg)
        x_hat = quantize(x_hat)
        edit_seed = int(rng.integers(2 ** 31))
        pairs.append(DistinguisherPair(x_hat, editor(x_hat, edit_seed), 1))
        pairs.append(DistinguisherPair(x, editor(x, edit_seed), 0))
    if shuffle_labels:
        pairs = shuffle_pair_labels(pairs, int(rng.integers(2 ** 31)))
    return pairs


def shuffle_pair_labels(pairs: Sequence[DistinguisherPair], seed: int) -> List[DistinguisherPair]:
    """Permute labels across pairs; a distinguisher trained on the result should score at chance"""
    labels = np.random.default_rng(seed).permutation([p.label for p in pairs])
    return [DistinguisherPair(p.image, p.edited, int(l)) for p, l in zip(pairs, labels)]


def save_classifier(params: DistinguisherParams, path):
    return save_checkpoint(params.model, path, params.sidecar())


def load_classifier(path) -> DistinguisherParams:
    meta = load_sidecar(path)
    model = BinaryConvClassifier(meta['in_channels'], meta['hidden'])
    model.load_state_dict(load_state(path))
    model.eval()
    return DistinguisherParams(model=model, seed=meta['seed'], epochs=meta['epochs'], auc=meta['auc'])


# --------------------------------------------------------------------------- embedding distances

class FeatureExtractor(Protocol):
    name: str

    def embed(self, x: np.ndarray) -> np.ndarray:
        ...


class SemanticFeatures:
    """Codec-encoder latents as the semantic embedding"""

    name = 'semantic'

    def __init__(self, codec: CodecParams):
        self.codec = codec

    def embed(self, x: np.ndarray) -> np.ndarray:
        return encode(self.codec, x).ravel()


class TextureFeatures:
    """Fixed random 5x5 conv filters, ReLU and 4x4 average pooling"""

    name = 'texture'

    def __init__(self, seed: int = 7, channels: int = 3, filters: int = 16):
        generator = torch.Generator().manual_seed(seed)
        weight = torch.randn(filters, channels, 5, 5, generator=generator, dtype=torch.float64)
        self.weight = weight / weight.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
        self.channels = channels

    def embed(self, x: np.ndarray) -> np.ndarray:
        if x.shape[2] != self.channels:
            raise ShapeMismatchError(f"Texture features expect {self.channels} channels, got {x.shape[2]}")
        with torch.no_grad():
            y = F.relu(F.conv2d(to_tensor(x, torch.float64), self.weight, padding=2))
            y = F.avg_pool2d(y, 4)
        return y.numpy().ravel()


def embedding_distance(features: FeatureExtractor, x: np.ndarray, y: np.ndarray) -> float:
    """l2 distance between flattened embeddings of x and y"""
    if x.shape != y.shape:
        raise ShapeMismatchError(f"Cannot compare images of shape {x.shape} and {y.shape}")
    if x is y or np.array_equal(x, y):
        return 0.0
    return float(np.linalg.norm(features.embed(x) - features.embed(y)))


# --------------------------------------------------------------------------- protection boundary

@dataclass
class EvalRecord:
    """One edited, extracted image together with how far the edit moved it"""

    image_id: str
    alpha: float
    lam: float
    edit_model: str
    result: ExtractionResult
    sem_dist: float
    vis_dist: float = 0.0


def _metrics(records: Sequence[EvalRecord], truth: str) -> dict:
    results = [r.result for r in records]
    return {
        'n': len(results),
        'd_all': metric_d_all(results),
        'd_word': metric_d_word(results),
        'd_letter': metric_d_letter(results, truth),
    }


def boundary_analysis(records: Sequence[EvalRecord], percentile: float, truth: str,
                      distance: str = 'sem_dist', bins: int = 10) -> dict:
    """
    Extraction metrics for records whose edit distance is at or above the given percentile

    Args:
        records: Evaluated records
        percentile: Percentile in [0, 100] of the distance distribution
        truth: Watermark text
        distance: Record attribute used as the distance
        bins: Number of quantile bins for the accuracy-vs-distance curve

    Returns:
        Report dict with threshold, selected metrics, global metrics and the decile curve
    """
    if not records:
        raise ValueError("Boundary analysis needs at least one record")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {percentile}")
    values = np.array([getattr(r, distance) for r in records], dtype=np.float64)
    threshold = float(np.percentile(values, percentile))
    selected = [r for r, v in zip(records, values) if v >= threshold]

    edges = np.quantile(values, np.linspace(0, 1, bins + 1))
    curve = []
    for i in range(bins):
        lo, hi = edges[i], edges[i + 1]
        upper = values <= hi if i == bins - 1 else values < hi
        members = [r for r, m in zip(records, (values >= lo) & upper) if m]
        if members:
            curve.append({'lo': float(lo), 'hi': float(hi), **_metrics(members, truth)})

    return {
        'distance': distance,
        'percentile': percentile,
        'threshold': threshold,
        'selected': _metrics(selected, truth),
        'global': _metrics(records, truth),
        'curve': curve,
    }


# --------------------------------------------------------------------------- game

@dataclass
class TrialLog:
    b: int
    b_a: int
    b_b: int
    extraction_score: float
    distinguisher_score: float


@dataclass
class GameOutcome:
    trials: int
    bob_win_rate: float
    alice_win_rate: float
    threshold: float
    bob_ci: Tuple[float, float]
    alice_ci: Tuple[float, float]
    log: List[TrialLog] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def codec_roundtrip_editor(codec: CodecParams) -> Editor:
    """Editor that only passes the image through the codec"""
    return lambda x, seed: decode(codec, encode(codec, x))


def noise_editor(x: np.ndarray, seed: int) -> np.ndarray:
    """Editor whose output carries no information about its input"""
    return np.random.default_rng(seed).uniform(0.0, 1.0, x.shape)


class WatermarkGame:
    """Runs trials of the owner (Bob) / adversary (Alice) game"""

    def __init__(self, corpus: Sequence[np.ndarray], spec: WatermarkSpec, inject_cfg: InjectionConfig,
                 codec: CodecParams, editor: Editor, extractor: WatermarkExtractor,
                 distinguisher: DistinguisherParams, jobs: int = 1):
        if not corpus:
            raise ValueError("Game corpus is empty")
        h, w, c = corpus[0].shape
        self.corpus = corpus
        self.spec = spec
        self.watermark = render_watermark(spec, extractor.layout, h, w, c)
        self.inject_cfg = inject_cfg
        self.codec = codec
        self.editor = editor
        self.extractor = extractor
        self.distinguisher = distinguisher
        self.jobs = max(1, jobs)

    def _play(self, seed: int, trial: int, b: Optional[int] = None) -> Tuple[int, float, float]:
        rng = np.random.default_rng([seed, trial])
        x = self.corpus[int(rng.integers(len(self.corpus)))]
        if b is None:
            b = int(rng.integers(2))
        image = quantize(inject(self.codec, x, self.watermark, self.inject_cfg)[0]) if b == 1 else x
        edited = self.editor(image, int(rng.integers(2 ** 31)))
        bob = self.extractor.score(edited, self.spec.text)
        alice = distinguisher_score(self.distinguisher, image, edited)
        return b, bob, alice

    def _map(self, fn, items):
        if self.jobs == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items))

    def calibrate(self, seed: int, trials: int) -> float:
        """Equal-error threshold on Bob's extraction score from balanced held-out trials"""
        if trials < 1:
            raise ValueError(f"Calibration needs at least one trial per class, got {trials}")
        plays = self._map(lambda i: self._play(seed, i, b=i % 2), range(2 * trials))
        curve = roc_auc([ScoredSample(score, b) for b, score, _ in plays])
        threshold = curve.equal_error_threshold()
        logger.info(f"Bob threshold calibrated at {threshold:.4f} (AUC {curve.auc:.3f})")
        return threshold

    def run(self, trials: int, seed: int, threshold: Optional[float] = None,
            calibration_trials: int = 20) -> GameOutcome:
        if trials < 1:
            raise ValueError(f"Game needs at least one trial, got {trials}")
        if threshold is None:
            threshold = self.calibrate(seed + 1, calibration_trials)
        plays = self._map(lambda i: self._play(seed, i), range(trials))
        log = []
        for b, bob, alice in plays:
            log.append(TrialLog(b=b, b_a=int(alice >= 0.5), b_b=int(bob >= threshold),
                                extraction_score=bob, distinguisher_score=alice))
        bob_wins = sum(t.b_b == t.b for t in log)
        alice_wins = sum(t.b_a == t.b for t in log)
        outcome = GameOutcome(
            trials=trials,
            bob_win_rate=bob_wins / trials,
            alice_win_rate=alice_wins / trials,
            threshold=threshold,
            bob_ci=wilson_interval(bob_wins, trials),
            alice_ci=wilson_interval(alice_wins, trials),
            log=log,
        )
        logger.info(f"Game over {trials} trials: Bob {outcome.bob_win_rate:.3f}, Alice {outcome.alice_win_rate:.3f}")
        return outcome


def run_game(corpus: Sequence[np.ndarray], watermark_spec: WatermarkSpec, inject_cfg: InjectionConfig,
             editor: Editor, extractor: WatermarkExtractor, distinguisher: DistinguisherParams,
             trials: int, seed: int, codec: CodecParams, threshold: Optional[float] = None,
             calibration_trials: int = 20, jobs: int = 1, require_trained: bool = True) -> GameOutcome:
    """
    Play the watermark game

    Each trial samples x, a bit b and edits x^b (x^1 = inject(x, w)). Bob guesses b_b = 1 iff the
    extraction score reaches the threshold; Alice guesses b_a = 1 iff the distinguisher scores
    the (x^b, edited) pair at least 0.5.

    Raises:
        ValueError: Untrained components or trials < 1
    """
    if require_trained and (codec.epochs == 0 or distinguisher.epochs == 0):
        raise ValueError("The game requires a trained codec and distinguisher")
    game = WatermarkGame(corpus, watermark_spec, inject_cfg, codec, editor, extractor, distinguisher, jobs)
    return game.run(trials, seed, threshold, calibration_trials)


# --------------------------------------------------------------------------- image watermark

def make_patch(seed: int, size: int = 32, channels: int = 3) -> np.ndarray:
    """Procedural raster patch used as the corner image watermark"""
    return generate_image(size, size, seed, channels)


def corner_region(x: np.ndarray, size: int) -> np.ndarray:
    return x[-size:, -size:].copy()


def patch_distance_samples(regions: Sequence[np.ndarray], labels: Sequence[int],
                           reference: np.ndarray) -> List[ScoredSample]:
    """Negated pixel distance to the reference patch as a detection score"""
    return [ScoredSample(-pixel_distance(r, reference), int(l)) for r, l in zip(regions, labels)]


def train_patch_classifier(regions: Sequence[np.ndarray], labels: Sequence[int], epochs: int,
                           seed: int, **kwargs) -> DistinguisherParams:
    """Binary classifier on corner regions (edited watermarked vs edited clean)"""
    return train_binary_classifier(list(regions), labels, epochs, seed, stage='patch_classifier', **kwargs)
