"""
Pixel-domain image model
Toy corpus generation, text watermark rendering, segment grids and classical transforms
"""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np
import logging

from .errors import ShapeMismatchError
from .font import ALPHABET, GLYPH_HEIGHT, GLYPH_WIDTH, glyph_bitmap

logger = logging.getLogger(__name__)

# An image is a float64 array (H, W, C) with values in [0, 1]
Image = np.ndarray

MIN_SIDE = 16
TRANSFORM_KINDS = ('crop', 'rotate', 'brightness', 'gaussian_noise', 'mask', 'resize')


def validate_image(x: np.ndarray, name: str = "image") -> Image:
    """
    Check the Image contract and return the array as float64

    Args:
        x: Candidate array
        name: Name used in error messages

    Returns:
        The same pixels as a float64 (H, W, C) array
    """
    if not isinstance(x, np.ndarray) or x.ndim != 3:
        raise ValueError(f"{name} must be an (H, W, C) array, got {getattr(x, 'shape', type(x))}")
    height, width, channels = x.shape
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ValueError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
    if channels not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {channels}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    return x.astype(np.float64, copy=False)


# --------------------------------------------------------------------------- corpus

def image_seed(seed: int, index: int) -> int:
    """Per-image seed derived from the corpus seed"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_image(height: int, width: int, seed: int, channels: int = 3) -> Image:
    """
    Generate one procedural image: colour gradient, sinusoidal texture, blended shapes

    Args:
        height: Image height in pixels
        width: Image width in pixels
        seed: Image seed
        channels: 1 or 3

    Returns:
        Image in [0, 1]
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)

    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0 = rng.uniform(0, 1, channels)
    c1 = rng.uniform(0, 1, channels)
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]

    # High-frequency texture
    for _ in range(2):
        fx, fy = rng.uniform(2, 12, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.08, channels)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += amp[None, None, :] * wave[..., None]

    for _ in range(int(rng.integers(3, 7))):
        mask = np.zeros((height, width), dtype=np.uint8)
        kind = rng.integers(0, 4)
        cx, cy = int(rng.integers(0, width)), int(rng.integers(0, height))
        size = int(rng.integers(max(height, width) // 10, max(height, width) // 3))
        if kind == 0:
            cv2.circle(mask, (cx, cy), size, 255, -1)
        elif kind == 1:
            cv2.rectangle(mask, (cx - size, cy - size // 2), (cx + size, cy + size // 2), 255, -1)
        elif kind == 2:
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(mask, (cx, cy), (size, max(size // 2, 1)), angle, 0, 360, 255, -1)
        else:
            pts = rng.integers(0, [width, height], size=(3, 2)).astype(np.int32)
            cv2.fillPoly(mask, [pts], 255)
        colour = rng.uniform(0, 1, channels)
        opacity = rng.uniform(0.6, 1.0)
        weight = (mask.astype(np.float64) / 255.0 * opacity)[..., None]
        img = img * (1 - weight) + colour[None, None, :] * weight

    return np.clip(img, 0.0, 1.0)


def generate_corpus(n: int, height: int, width: int, seed: int, channels: int = 3) -> List[Image]:
    """
    Generate a deterministic toy corpus

    Args:
        n: Number of images (>= 1)
        height: Image height (>= 16)
        width: Image width (>= 16)
        seed: Corpus seed; same seed gives an identical corpus
        channels: 1 or 3

    Returns:
        List of n images
    """
    if n < 1:
        raise ValueError(f"Corpus size must be >= 1, got {n}")
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ValueError(f"Corpus images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    logger.debug(f"Generating corpus n={n} size={height}x{width} seed={seed}")
    return [generate_image(height, width, image_seed(seed, i), channels) for i in range(n)]


# --------------------------------------------------------------------------- watermark

@dataclass(frozen=True)
class WatermarkSpec:
    """Text watermark: the same M-glyph text tiled into every grid segment"""

    text: str = "RIW1"
    glyphs_per_segment: int = 4
    grid: Tuple[int, int] = (3, 3)
    alpha: float = 0.4
    foreground: float = 1.0
    background: float = 0.0

    def __post_init__(self):
        if len(self.text) != self.glyphs_per_segment:
            raise ValueError(
                f"Watermark text {self.text!r} has {len(self.text)} glyphs, expected {self.glyphs_per_segment}"
            )
        unknown = [c for c in self.text if c not in ALPHABET]
        if unknown:
            raise ValueError(f"Unknown glyph(s) in watermark text: {unknown}")
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError(f"Watermark grid must be at least 1x1, got {self.grid}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def segments(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class SegmentLayout:
    """K equally sized, pairwise disjoint rectangles (top, left, height, width)"""

    rects: Tuple[Tuple[int, int, int, int], ...]

    def __post_init__(self):
        if len(self.rects) < 1:
            raise ValueError("Layout needs at least one rectangle")
        sizes = {(h, w) for _, _, h, w in self.rects}
        if len(sizes) != 1:
            raise ValueError(f"Layout rectangles must share one size, got {sorted(sizes)}")
        for i, a in enumerate(self.rects):
            for b in self.rects[i + 1:]:
                if _overlap(a, b):
                    raise ValueError(f"Layout rectangles {a} and {b} overlap")

    @property
    def k(self) -> int:
        return len(self.rects)

    @property
    def segment_shape(self) -> Tuple[int, int]:
        _, _, h, w = self.rects[0]
        return h, w

    def check_fits(self, height: int, width: int):
        """Raise if any rectangle falls outside an image of the given size"""
        for top, left, h, w in self.rects:
            if top < 0 or left < 0 or top + h > height or left + w > width or h < 1 or w < 1:
                raise ShapeMismatchError(
                    f"Layout rectangle {(top, left, h, w)} does not fit a {height}x{width} image"
                )


def _overlap(a, b) -> bool:
    at, al, ah, aw = a
    bt, bl, bh, bw = b
    return at < bt + bh and bt < at + ah and al < bl + bw and bl < al + aw


def uniform_grid(height: int, width: int, rows: int = 3, cols: int = 3, margin: int = 0) -> SegmentLayout:
    """
    Uniform rows x cols grid with equal margins between and around the cells

    Args:
        height: Image height
        width: Image width
        rows: Grid rows
        cols: Grid columns
        margin: Margin in pixels

    Returns:
        SegmentLayout in row-major order
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"Grid must be at least 1x1, got {rows}x{cols}")
    cell_h = (height - (rows + 1) * margin) // rows
    cell_w = (width - (cols + 1) * margin) // cols
    if cell_h < 1 or cell_w < 1:
        raise ValueError(f"A {rows}x{cols} grid with margin {margin} does not fit {height}x{width}")
    rects = tuple(
        (margin + r * (cell_h + margin), margin + c * (cell_w + margin), cell_h, cell_w)
        for r in range(rows) for c in range(cols)
    )
    return SegmentLayout(rects)


@dataclass(frozen=True)
class GlyphGeometry:
    """Placement of M fixed-width glyph slots inside one segment"""

    scale: int
    slot_width: int
    x_offset: int
    y_offset: int


def glyph_geometry(seg_height: int, seg_width: int, glyphs: int) -> GlyphGeometry:
    """
    Compute slot width, glyph scale and centering offsets for a segment

    Raises:
        ValueError: If the segment cannot hold the glyphs at scale 1
    """
    if glyphs < 1:
        raise ValueError(f"Need at least one glyph slot, got {glyphs}")
    slot_width = seg_width // glyphs
    scale = min(slot_width // GLYPH_WIDTH, seg_height // GLYPH_HEIGHT)
    if scale < 1:
        raise ValueError(
            f"Segment {seg_height}x{seg_width} is too small for {glyphs} glyphs of {GLYPH_HEIGHT}x{GLYPH_WIDTH}"
        )
    x_offset = (slot_width - GLYPH_WIDTH * scale) // 2
    y_offset = (seg_height - GLYPH_HEIGHT * scale) // 2
    return GlyphGeometry(scale, slot_width, x_offset, y_offset)


def render_segment(text: str, seg_height: int, seg_width: int, glyphs: int,
                   foreground: float = 1.0, background: float = 0.0) -> np.ndarray:
    """
    Render text into one single-channel segment

    Returns:
        (seg_height, seg_width) array of {background, foreground}
    """
    out = np.full((seg_height, seg_width), background, dtype=np.float64)
    if glyphs == 0:
        return out
    if len(text) > glyphs:
        raise ValueError(f"Text {text!r} longer than {glyphs} glyph slots")
    geom = glyph_geometry(seg_height, seg_width, glyphs)
    for i, char in enumerate(text):
        bitmap = glyph_bitmap(char, geom.scale)
        top = geom.y_offset
        left = i * geom.slot_width + geom.x_offset
        region = out[top:top + bitmap.shape[0], left:left + bitmap.shape[1]]
        region[bitmap] = foreground
    return out


def render_watermark(spec: WatermarkSpec, layout: SegmentLayout, height: int, width: int,
                     channels: int = 3) -> Image:
    """
    Render the text watermark w: identical text blocks in each of the K segments

    Args:
        spec: Watermark text and intensities
        layout: Segment rectangles
        height: Image height
        width: Image width
        channels: Output channels

    Returns:
        Watermark image with pixels in {background, foreground}
    """
    layout.check_fits(height, width)
    canvas = np.full((height, width), spec.background, dtype=np.float64)
    seg_h, seg_w = layout.segment_shape
    block = render_segment(spec.text, seg_h, seg_w, spec.glyphs_per_segment,
                           spec.foreground, spec.background)
    for top, left, h, w in layout.rects:
        canvas[top:top + h, left:left + w] = block
    return np.repeat(canvas[..., None], channels, axis=2)


def overlay_patch(x: Image, patch: Image, corner: Tuple[int, int], alpha: float) -> Image:
    """
    Blend a patch into x at (top, left): region <- (1 - alpha) * x + alpha * patch

    Args:
        x: Host image
        patch: Patch image with the same channel count
        corner: (top, left) of the patch inside x
        alpha: Blend weight in [0, 1]

    Returns:
        New image; pixels outside the patch region are unchanged
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    top, left = corner
    ph, pw, pc = patch.shape
    h, w, c = x.shape
    if pc != c:
        raise ShapeMismatchError(f"Patch has {pc} channels, image has {c}")
    if top < 0 or left < 0 or top + ph > h or left + pw > w:
        raise ValueError(f"Patch {ph}x{pw} at {corner} is out of bounds for {h}x{w}")
    out = x.astype(np.float64, copy=True)
    region = out[top:top + ph, left:left + pw]
    out[top:top + ph, left:left + pw] = (1.0 - alpha) * region + alpha * patch
    return out


def corner_position(image_shape: Sequence[int], patch_shape: Sequence[int],
                    where: str = "bottom_right") -> Tuple[int, int]:
    """(top, left) of a patch placed flush in one corner"""
    h, w = image_shape[:2]
    ph, pw = patch_shape[:2]
    positions = {
        'top_left': (0, 0),
        'top_right': (0, w - pw),
        'bottom_left': (h - ph, 0),
        'bottom_right': (h - ph, w - pw),
    }
    if where not in positions:
        raise ValueError(f"Unknown corner {where!r}")
    return positions[where]


def crop_segments(x: Image, layout: SegmentLayout) -> List[Image]:
    """Cut the K layout rectangles out of x, in layout order"""
    layout.check_fits(x.shape[0], x.shape[1])
    return [x[top:top + h, left:left + w].copy() for top, left, h, w in layout.rects]


def paste_segments(segments: Sequence[Image], layout: SegmentLayout, canvas: Image) -> Image:
    """Write segments back into a copy of canvas at their layout rectangles"""
    if len(segments) != layout.k:
        raise ShapeMismatchError(f"Got {len(segments)} segments for a {layout.k}-segment layout")
    out = canvas.copy()
    for seg, (top, left, h, w) in zip(segments, layout.rects):
        out[top:top + h, left:left + w] = seg
    return out


# --------------------------------------------------------------------------- transforms

@dataclass(frozen=True)
class TransformSpec:
    """Classical image transform with kind-specific parameters"""

    kind: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"Unknown transform kind {self.kind!r}")
        p = self.params
        if self.kind == 'rotate' and not -180.0 <= p.get('degrees', 0.0) <= 180.0:
            raise ValueError(f"Rotation degrees must lie in [-180, 180], got {p.get('degrees')}")
        if self.kind == 'brightness' and p.get('factor', 1.0) <= 0:
            raise ValueError(f"Brightness factor must be > 0, got {p.get('factor')}")
        if self.kind == 'gaussian_noise' and p.get('sigma', 0.0) < 0:
            raise ValueError(f"Noise sigma must be >= 0, got {p.get('sigma')}")
        if self.kind in ('crop', 'mask') and not 0.0 < p.get('fraction', 1.0) <= 1.0:
            raise ValueError(f"{self.kind} fraction must lie in (0, 1], got {p.get('fraction')}")
        if self.kind == 'resize' and p.get('factor', 1.0) <= 0:
            raise ValueError(f"Resize factor must be > 0, got {p.get('factor')}")


def _as_cv(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32)


def _from_cv(y: np.ndarray, channels: int) -> Image:
    if y.ndim == 2:
        y = y[..., None]
    return np.clip(y.astype(np.float64), 0.0, 1.0).reshape(y.shape[0], y.shape[1], channels)


def apply_transform(x: Image, t: TransformSpec) -> Image:
    """
    Apply a classical transform; output keeps the shape of x and is clamped to [0, 1]

    Args:
        x: Input image
        t: Transform specification

    Returns:
        Transformed image
    """
    h, w, c = x.shape
    p = t.params
    rng = np.random.default_rng(int(p.get('seed', 0)))

    if t.kind == 'brightness':
        return np.clip(x * float(p.get('factor', 1.0)), 0.0, 1.0)

    if t.kind == 'gaussian_noise':
        sigma = float(p.get('sigma', 0.0))
        if sigma == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, sigma, x.shape), 0.0, 1.0)

    if t.kind == 'rotate':
        degrees = float(p.get('degrees', 0.0))
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
        rotated = cv2.warpAffine(_as_cv(x), matrix, (w, h), flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        return _from_cv(rotated, c)

    if t.kind == 'crop':
        fraction = float(p.get('fraction', 1.0))
        ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = np.zeros_like(x, dtype=np.float64)
        out[top:top + ch, left:left + cw] = x[top:top + ch, left:left + cw]
        return out

    if t.kind == 'mask':
        fraction = float(p.get('fraction', 0.1))
        side = np.sqrt(fraction)
        mh, mw = max(1, int(round(h * side))), max(1, int(round(w * side)))
        top = int(rng.integers(0, h - mh + 1))
        left = int(rng.integers(0, w - mw + 1))
        out = x.astype(np.float64, copy=True)
        out[top:top + mh, left:left + mw] = 0.0
        return out

    # resize: down/up-sample and restore the original shape
    factor = float(p.get('factor', 1.0))
    if factor == 1.0:
        return x.copy()
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    small = cv2.resize(_as_cv(x), (sw, sh), interpolation=cv2.INTER_AREA)
    restored = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
    return _from_cv(restored, c)
