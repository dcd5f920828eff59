"""
Watermark extraction
Per-segment cropping, optional learned reconstruction, glyph recognition and the
extraction accuracy metrics
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import train_test_split
import logging

from models.codec import batch_tensor, to_array, to_tensor
from utils.errors import ConvergenceError, ShapeMismatchError
from utils.font import ALPHABET
from utils.imaging import SegmentLayout, crop_segments, glyph_geometry, render_segment
from utils.storage import load_sidecar, load_state, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ('template', 'classifier')


# --------------------------------------------------------------------------- slots

def to_gray(seg: np.ndarray) -> np.ndarray:
    return seg.mean(axis=2) if seg.ndim == 3 else seg


def high_pass(gray: np.ndarray, sigma: float) -> np.ndarray:
    """Remove the smooth background: gray - GaussianBlur(gray)"""
    g = gray.astype(np.float64)
    blurred = cv2.GaussianBlur(g, (0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
    return g - blurred


def split_slots(seg: np.ndarray, glyphs: int) -> List[np.ndarray]:
    """Cut a segment into `glyphs` fixed-width grayscale slots"""
    gray = to_gray(seg)
    geom = glyph_geometry(gray.shape[0], gray.shape[1], glyphs)
    w = geom.slot_width
    return [gray[:, m * w:(m + 1) * w] for m in range(glyphs)]


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equally shaped arrays; 0 if either is flat"""
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = np.sqrt(np.sum(a0 * a0) * np.sum(b0 * b0))
    if denom < 1e-12:
        return 0.0
    return float(np.sum(a0 * b0) / denom)


def _pick(scores: Dict[str, float]) -> Tuple[str, float]:
    # Ties resolve to the smallest glyph label regardless of insertion order
    best_char, best = None, -np.inf
    for char in sorted(scores):
        if scores[char] > best:
            best_char, best = char, scores[char]
    return best_char, best


# --------------------------------------------------------------------------- recognizer

class GlyphClassifier(nn.Module):
    """Conv classifier on one preprocessed glyph slot"""

    def __init__(self, slot_height: int, slot_width: int, classes: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(hidden * slot_height * slot_width, classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class RecognizerParams:
    """Template bank or glyph classifier for one segment shape"""

    mode: str
    segment_shape: Tuple[int, int]
    glyphs: int
    blur_sigma: float
    templates: Dict[str, np.ndarray] = field(default_factory=dict)
    classifier: Optional[GlyphClassifier] = None
    labels: Tuple[str, ...] = tuple(ALPHABET)
    seed: int = 0
    epochs: int = 0
    accuracy: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Recognizer mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == 'template' and set(self.templates) != set(self.labels):
            raise ValueError("Template bank must cover the full alphabet")
        if self.mode == 'classifier' and self.classifier is None:
            raise ValueError("Classifier mode needs a trained classifier")

    def sidecar(self) -> dict:
        return {
            'mode': self.mode,
            'segment_shape': list(self.segment_shape),
            'glyphs': self.glyphs,
            'blur_sigma': self.blur_sigma,
            'labels': ''.join(self.labels),
            'seed': self.seed,
            'epochs': self.epochs,
            'accuracy': self.accuracy,
        }


def default_blur_sigma(seg_height: int, seg_width: int, glyphs: int) -> float:
    return 1.5 * glyph_geometry(seg_height, seg_width, glyphs).scale


def _slot_template(char: str, seg_height: int, slot_width: int) -> np.ndarray:
    return render_segment(char, seg_height, slot_width, 1)


def build_template_bank(seg_height: int, seg_width: int, glyphs: int,
                        alphabet: Sequence[str] = ALPHABET,
                        blur_sigma: Optional[float] = None) -> RecognizerParams:
    """
    Template-mode recognizer: one high-passed clean render per glyph at segment scale

    Args:
        seg_height: Segment height
        seg_width: Segment width
        glyphs: Glyph slots per segment
        alphabet: Glyph labels
        blur_sigma: High-pass blur sigma (defaults to 1.5 x glyph scale)

    Returns:
        RecognizerParams in template mode
    """
    geom = glyph_geometry(seg_height, seg_width, glyphs)
    sigma = blur_sigma or default_blur_sigma(seg_height, seg_width, glyphs)
    templates = {c: high_pass(_slot_template(c, seg_height, geom.slot_width), sigma) for c in alphabet}
    return RecognizerParams(mode='template', segment_shape=(seg_height, seg_width), glyphs=glyphs,
                            blur_sigma=sigma, templates=templates, labels=tuple(alphabet))


def _standardize(slot: np.ndarray) -> np.ndarray:
    s = slot - slot.mean()
    std = s.std()
    return s / std if std > 1e-9 else s


def _noisy_slot(char: str, seg_height: int, slot_width: int, rng: np.random.Generator) -> np.ndarray:
    clean = _slot_template(char, seg_height, slot_width)
    yy, xx = np.mgrid[0:seg_height, 0:slot_width].astype(np.float64)
    background = rng.uniform(0, 0.8) + rng.uniform(-0.2, 0.2) * yy / seg_height + rng.uniform(-0.2, 0.2) * xx / slot_width
    amplitude = rng.uniform(0.15, 1.0)
    slot = background + amplitude * clean + rng.normal(0, rng.uniform(0, 0.15), clean.shape)
    return np.clip(slot, 0.0, 1.0)


def train_glyph_classifier(seg_height: int, seg_width: int, glyphs: int, epochs: int, seed: int,
                           samples_per_glyph: int = 64, alphabet: Sequence[str] = ALPHABET,
                           learning_rate: float = 2e-3, error_threshold: float = 0.1) -> RecognizerParams:
    """
    Classifier-mode recognizer trained on noisy renders of every glyph

    Raises:
        ConvergenceError: Held-out error rate above error_threshold
    """
    geom = glyph_geometry(seg_height, seg_width, glyphs)
    sigma = default_blur_sigma(seg_height, seg_width, glyphs)
    labels = tuple(sorted(alphabet))
    torch.manual_seed(seed)
    model = GlyphClassifier(seg_height, geom.slot_width, len(labels))
    params = RecognizerParams(mode='classifier', segment_shape=(seg_height, seg_width), glyphs=glyphs,
                              blur_sigma=sigma, classifier=model, labels=labels, seed=seed)
    if epochs == 0:
        model.eval()
        return params

    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for idx, char in enumerate(labels):
        for _ in range(samples_per_glyph):
            xs.append(_standardize(high_pass(_noisy_slot(char, seg_height, geom.slot_width, rng), sigma)))
            ys.append(idx)
    x_train, x_test, y_train, y_test = train_test_split(
        np.stack(xs), np.array(ys), test_size=0.1, random_state=seed, stratify=np.array(ys))
    x_train = torch.as_tensor(x_train[:, None], dtype=torch.float32)
    y_train = torch.as_tensor(y_train, dtype=torch.long)

    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training glyph classifier: {len(x_train)} samples, {epochs} epochs")
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(x_train), generator=generator)
        for start in range(0, len(order), 64):
            batch = order[start:start + 64]
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x_train[batch]), y_train[batch])
            loss.backward()
            optimizer.step()
    model.eval()

    with torch.no_grad():
        predicted = model(torch.as_tensor(x_test[:, None], dtype=torch.float32)).argmax(dim=1).numpy()
    accuracy = float(np.mean(predicted == y_test))
    params.epochs = epochs
    params.accuracy = accuracy
    logger.info(f"Glyph classifier held-out accuracy: {accuracy:.3f}")
    if 1.0 - accuracy > error_threshold:
        raise ConvergenceError('recognizer', 'error_rate', 1.0 - accuracy, error_threshold)
    return params


def _slot_scores(params: RecognizerParams, slot: np.ndarray) -> Dict[str, float]:
    processed = high_pass(slot, params.blur_sigma)
    if params.mode == 'template':
        return {c: ncc(processed, t) for c, t in params.templates.items()}
    with torch.no_grad():
        logits = params.classifier(torch.as_tensor(_standardize(processed)[None, None], dtype=torch.float32))
        probs = torch.softmax(logits, dim=1)[0].numpy()
    return {c: float(p) for c, p in zip(params.labels, probs)}


def recognize_segment(params: RecognizerParams, seg: np.ndarray, glyphs: int) -> Tuple[str, List[float]]:
    """
    Recognize the M glyphs of one segment

    Args:
        params: Recognizer
        seg: Segment image (H, W, C) or (H, W)
        glyphs: Glyph count M

    Returns:
        Tuple of (decoded string, per-glyph confidence in [0, 1])
    """
    if glyphs != params.glyphs:
        raise ValueError(f"Recognizer built for {params.glyphs} glyphs, asked for {glyphs}")
    if tuple(seg.shape[:2]) != tuple(params.segment_shape):
        raise ShapeMismatchError(
            f"Segment {seg.shape[:2]} does not match recognizer shape {params.segment_shape}"
        )
    decoded, confidences = [], []
    for slot in split_slots(seg, glyphs):
        char, score = _pick(_slot_scores(params, slot))
        decoded.append(char)
        confidences.append(float(np.clip(score, 0.0, 1.0)))
    return ''.join(decoded), confidences


def glyph_scores(params: RecognizerParams, seg: np.ndarray, text: str) -> List[float]:
    """Confidence of each true glyph of `text` in its slot (used as a continuous detector score)"""
    slots = split_slots(seg, params.glyphs)
    return [float(np.clip(_slot_scores(params, s).get(c, 0.0), 0.0, 1.0)) for s, c in zip(slots, text)]


def save_recognizer(params: RecognizerParams, path) -> Path:
    path = Path(path)
    if params.mode == 'classifier':
        return save_checkpoint(params.classifier, path, params.sidecar())
    module = nn.Module()
    return save_checkpoint(module, path, params.sidecar())


def load_recognizer(path) -> RecognizerParams:
    meta = load_sidecar(path)
    h, w = meta['segment_shape']
    if meta['mode'] == 'template':
        return build_template_bank(h, w, meta['glyphs'], tuple(meta['labels']), meta['blur_sigma'])
    geom = glyph_geometry(h, w, meta['glyphs'])
    model = GlyphClassifier(h, geom.slot_width, len(meta['labels']))
    model.load_state_dict(load_state(path))
    model.eval()
    return RecognizerParams(mode='classifier', segment_shape=(h, w), glyphs=meta['glyphs'],
                            blur_sigma=meta['blur_sigma'], classifier=model, labels=tuple(meta['labels']),
                            seed=meta['seed'], epochs=meta['epochs'], accuracy=meta['accuracy'])


# --------------------------------------------------------------------------- reconstructor

class SegmentReconstructor(nn.Module):
    """Maps a degraded segment to a clean glyph render; input is mean-centered with the mean as an extra plane"""

    def __init__(self, channels: int = 3, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3), keepdim=True)
        return self.net(torch.cat([x - mean, mean.expand_as(x)], dim=1))


@dataclass
class ReconstructorParams:
    model: SegmentReconstructor
    seed: int
    epochs: int = 0
    rmse: Optional[float] = None
    history: List[float] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {'seed': self.seed, 'epochs': self.epochs, 'rmse': self.rmse,
                'channels': self.model.channels}


def init_reconstructor(seed: int, channels: int = 3) -> ReconstructorParams:
    torch.manual_seed(seed)
    model = SegmentReconstructor(channels)
    model.eval()
    return ReconstructorParams(model=model, seed=seed)


def train_reconstructor(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], epochs: int, seed: int,
                        batch_size: int = 32, learning_rate: float = 2e-3,
                        rmse_threshold: float = 0.3) -> ReconstructorParams:
    """
    Train the segment reconstructor on (degraded, clean) pairs with pixel MSE

    Args:
        pairs: (degraded segment, clean rendered segment) arrays of one shape
        epochs: Training epochs; 0 returns the seeded initialization
        seed: Seed for initialization, split and shuffling
        batch_size: Minibatch size
        learning_rate: Adam learning rate
        rmse_threshold: Maximum accepted held-out RMSE

    Returns:
        ReconstructorParams

    Raises:
        ConvergenceError: Held-out RMSE above threshold
    """
    if not pairs:
        raise ValueError("Reconstructor training needs at least one pair")
    channels = pairs[0][0].shape[2]
    params = init_reconstructor(seed, channels)
    if epochs == 0:
        return params

    indices = np.arange(len(pairs))
    if len(pairs) >= 10:
        train_idx, test_idx = train_test_split(indices, test_size=0.1, random_state=seed)
    else:
        train_idx, test_idx = indices, indices
    src = batch_tensor([p[0] for p in pairs])
    dst = batch_tensor([p[1] for p in pairs])
    train_idx = torch.as_tensor(train_idx)

    model = params.model
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training reconstructor: {len(train_idx)} pairs, {epochs} epochs")
    model.train()
    for epoch in range(epochs):
        order = train_idx[torch.randperm(len(train_idx), generator=generator)]
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = F.mse_loss(model(src[batch]), dst[batch])
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        params.history.append(total / len(order))
        if (epoch + 1) % 25 == 0 or epoch == epochs - 1:
            logger.info(f"Reconstructor epoch {epoch + 1}/{epochs}: mse={params.history[-1]:.5f}")
    model.eval()

    test_idx = torch.as_tensor(test_idx)
    with torch.no_grad():
        rmse = float(torch.sqrt(F.mse_loss(model(src[test_idx]), dst[test_idx])).item())
    params.epochs = epochs
    params.rmse = rmse
    logger.info(f"Reconstructor held-out RMSE: {rmse:.4f}")
    if rmse > rmse_threshold:
        raise ConvergenceError('reconstructor', 'rmse', rmse, rmse_threshold)
    return params


def reconstruct(params: ReconstructorParams, seg: np.ndarray) -> np.ndarray:
    """Apply the reconstructor to one segment; output shape == input shape"""
    with torch.no_grad():
        out = params.model(to_tensor(seg))
    return to_array(out)


def save_reconstructor(params: ReconstructorParams, path) -> Path:
    return save_checkpoint(params.model, path, params.sidecar())


def load_reconstructor(path) -> ReconstructorParams:
    meta = load_sidecar(path)
    params = init_reconstructor(meta['seed'], meta['channels'])
    params.model.load_state_dict(load_state(path))
    params.model.eval()
    params.epochs = meta['epochs']
    params.rmse = meta['rmse']
    return params


# --------------------------------------------------------------------------- extraction

@dataclass
class SegmentRecord:
    decoded: str
    confidences: List[float]

    @property
    def confidence_mean(self) -> float:
        return float(np.mean(self.confidences)) if self.confidences else 0.0


@dataclass
class ExtractionResult:
    """Per-segment decodes of one image, with indicators when the true text is known"""

    segments: List[SegmentRecord]
    truth: Optional[str] = None
    indicators: Optional[List[int]] = None

    def __post_init__(self):
        if self.truth is not None and self.indicators is None:
            self.indicators = [int(s.decoded == self.truth) for s in self.segments]

    @property
    def k(self) -> int:
        return len(self.segments)

    def rows(self, image_id: str) -> List[dict]:
        return [
            {
                'image_id': image_id,
                'segment_index': i,
                'decoded': s.decoded,
                'correct': None if self.indicators is None else self.indicators[i],
                'confidence_mean': s.confidence_mean,
            }
            for i, s in enumerate(self.segments)
        ]


def extract(recognizer: RecognizerParams, reconstructor: Optional[ReconstructorParams],
            x_e: np.ndarray, layout: SegmentLayout, glyphs: int,
            truth: Optional[str] = None) -> ExtractionResult:
    """
    Extract the text watermark from an (edited) image

    Args:
        recognizer: Glyph recognizer
        reconstructor: Optional segment reconstructor applied before recognition
        x_e: Image to read
        layout: Segment layout used at embedding time
        glyphs: Glyphs per segment
        truth: Ground-truth text; fills the indicators when given

    Returns:
        ExtractionResult with K segment records
    """
    layout.check_fits(x_e.shape[0], x_e.shape[1])
    if tuple(layout.segment_shape) != tuple(recognizer.segment_shape):
        raise ShapeMismatchError(
            f"Layout segment {layout.segment_shape} does not match recognizer {recognizer.segment_shape}"
        )
    records = []
    for seg in crop_segments(x_e, layout):
        if reconstructor is not None:
            seg = reconstruct(reconstructor, seg)
        decoded, confidences = recognize_segment(recognizer, seg, glyphs)
        records.append(SegmentRecord(decoded, confidences))
    return ExtractionResult(records, truth=truth)


# --------------------------------------------------------------------------- metrics

def _indicator_matrix(results: Sequence[ExtractionResult]) -> List[List[int]]:
    if not results:
        raise ValueError("Metric needs at least one extraction result")
    rows = []
    for r in results:
        if r.indicators is None:
            raise ValueError("Every extraction result must carry indicators")
        rows.append(list(r.indicators))
    return rows


def metric_d_all(results: Sequence[ExtractionResult]) -> float:
    """Fraction of correctly decoded segments over all N x K segments"""
    rows = _indicator_matrix(results)
    total = sum(len(r) for r in rows)
    if total == 0:
        raise ValueError("No segments to score")
    return sum(sum(r) for r in rows) / total


def metric_d_word(results: Sequence[ExtractionResult]) -> float:
    """Fraction of images with at least one correctly decoded segment"""
    rows = _indicator_matrix(results)
    return sum(min(sum(r), 1) for r in rows) / len(rows)


def letter_success(result: ExtractionResult, truth: str) -> bool:
    """True if every glyph position is decoded correctly by at least one segment"""
    for seg in result.segments:
        if len(seg.decoded) != len(truth):
            raise ValueError(f"Segment decode {seg.decoded!r} lacks per-glyph data for {truth!r}")
    return all(
        any(seg.decoded[m] == truth[m] for seg in result.segments)
        for m in range(len(truth))
    )


def metric_d_letter(results: Sequence[ExtractionResult], truth: str) -> float:
    """Fraction of images whose full text can be assembled position by position across segments"""
    if not results:
        raise ValueError("Metric needs at least one extraction result")
    return sum(letter_success(r, truth) for r in results) / len(results)


def metric_summary(results: Sequence[ExtractionResult], truth: str) -> dict:
    return {
        'd_all': metric_d_all(results),
        'd_word': metric_d_word(results),
        'd_letter': metric_d_letter(results, truth),
        'n': len(results),
        'k': results[0].k,
    }


def pixel_distance(region: np.ndarray, reference: np.ndarray) -> float:
    """l2 pixel distance on the 8-bit scale"""
    if region.shape != reference.shape:
        raise ShapeMismatchError(f"Region {region.shape} does not match reference {reference.shape}")
    return float(np.linalg.norm((region.astype(np.float64) - reference) * 255.0))


def pixel_distance_detector(region: np.ndarray, reference: np.ndarray, threshold: float) -> Tuple[float, bool]:
    """
    Detect a watermark by its pixel distance to the ground-truth region

    Returns:
        Tuple of (distance, detected) with detected iff distance < threshold
    """
    distance = pixel_distance(region, reference)
    return distance, distance < threshold


class WatermarkExtractor:
    """Recognizer, optional reconstructor and layout bundled for batch extraction"""

    def __init__(self, recognizer: RecognizerParams, layout: SegmentLayout,
                 reconstructor: Optional[ReconstructorParams] = None):
        self.recognizer = recognizer
        self.layout = layout
        self.reconstructor = reconstructor
        self.glyphs = recognizer.glyphs
        logger.info(f"Extractor ready: mode={recognizer.mode}, segments={layout.k}, "
                    f"reconstructor={'on' if reconstructor is not None else 'off'}")

    def extract(self, x_e: np.ndarray, truth: Optional[str] = None) -> ExtractionResult:
        return extract(self.recognizer, self.reconstructor, x_e, self.layout, self.glyphs, truth)

    def score(self, x_e: np.ndarray, truth: str) -> float:
        """Mean confidence of the true glyphs over all segments"""
        scores = []
        for seg in crop_segments(x_e, self.layout):
            if self.reconstructor is not None:
                seg = reconstruct(self.reconstructor, seg)
            scores.extend(glyph_scores(self.recognizer, seg, truth))
        return float(np.mean(scores)) if scores else 0.0
