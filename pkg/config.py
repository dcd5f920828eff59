"""
Configuration settings for the Robust Invisible Watermark Lab
"""
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from utils.errors import ConfigError
from utils.imaging import glyph_geometry, uniform_grid

# Base directory
BASE_DIR = Path(__file__).parent.absolute()

load_dotenv(BASE_DIR / '.env')


class Config:
    """Lab-wide defaults"""

    DEBUG = False

    # Output layout
    DEFAULT_OUT_DIR = BASE_DIR / 'runs' / 'default'
    LOG_FILE = 'lab.log'
    LOG_MAX_BYTES = 10240000
    LOG_BACKUPS = 10
    MANIFEST_DB = 'manifest.db'
    STAGE_DIRS = ('corpus', 'checkpoints', 'inject', 'edit', 'extract', 'eval', 'plots', 'logs')

    # Corpus
    IMAGE_SIZE = 64
    CORPUS_SEED = 0

    # Injection (pixel budget on the 8-bit scale / 255)
    EPS = 12 / 255
    MU = 2 / 255
    ALPHA = 0.4
    LAMBDA = 1.0
    STEPS = 400

    # Sweeps
    ALPHA_GRID = [1 / 255, 15 / 255, 51 / 255, 102 / 255, 153 / 255, 255 / 255]
    LAMBDA_GRID = [2.0 ** -k for k in range(8)]

    # Trainer thresholds
    CODEC_RMSE_THRESHOLD = 0.08
    DENOISER_LOSS_THRESHOLD = 0.5
    RECONSTRUCTOR_RMSE_THRESHOLD = 0.3
    AE_BIT_ERROR_THRESHOLD = 0.25

    # Acceptance checks (eval --check)
    BUDGET_TOLERANCE = 1e-9
    MIN_D_WORD = 0.80
    MIN_BASELINE_MARGIN = 0.30
    DISTINGUISHER_AUC_RANGE = (0.40, 0.60)
    CONTROL_MIN_AUC = 0.9
    SHUFFLED_AUC_TOLERANCE = 0.1
    MIN_RECONSTRUCTION_GAIN = 0.03
    TREND_TOLERANCE = 0.05

    @staticmethod
    def init_app(out_dir: Path):
        """Create the output directory tree"""
        out_dir = Path(out_dir)
        for name in Config.STAGE_DIRS:
            (out_dir / name).mkdir(parents=True, exist_ok=True)
        return out_dir


# --------------------------------------------------------------------------- experiment config

@dataclass
class CorpusSection:
    n_train: int = 200
    n_eval: int = 200
    n_aux: int = 100
    height: int = Config.IMAGE_SIZE
    width: int = Config.IMAGE_SIZE
    channels: int = 3
    seed: int = Config.CORPUS_SEED
    path: Optional[str] = None  # directory with a corpus.json manifest; generated when unset


@dataclass
class CodecSection:
    seed: int = 11
    epochs: int = 60
    latent_channels: int = 8
    hidden: int = 32


@dataclass
class EditorSection:
    name: str = 'editor-a'
    codec_seed: int = 21
    denoiser_seed: int = 31
    codec_epochs: int = 60
    denoiser_epochs: int = 150
    t_max: int = 100


@dataclass
class EditSection:
    prompt: str = 'null'
    t_edit: int = 40
    s_i: float = 1.5
    s_t: float = 1.5


@dataclass
class WatermarkSection:
    text: str = 'RIW1'
    glyphs: int = 4
    rows: int = 3
    cols: int = 3
    margin: int = 0


@dataclass
class InjectionSection:
    alpha: float = Config.ALPHA
    lam: float = Config.LAMBDA
    eps: float = Config.EPS
    mu: float = Config.MU
    steps: int = Config.STEPS
    norm: str = 'inf'


@dataclass
class SweepSection:
    images: int = 20
    alpha_grid: List[float] = field(default_factory=lambda: list(Config.ALPHA_GRID))
    lambda_grid: List[float] = field(default_factory=lambda: list(Config.LAMBDA_GRID))


@dataclass
class ExtractSection:
    recognizer_mode: str = 'template'
    recognizer_epochs: int = 30
    reconstructor_epochs: int = 100
    reconstructor_images: int = 100
    use_reconstructor: bool = False


@dataclass
class BaselineSection:
    ae_epochs: int = 80
    ae_lam: float = 0.01
    payload_chars: int = 3
    alpha_noise: float = 0.05
    finetune_epochs: int = 30
    dct_strength: float = 0.25


@dataclass
class GameSection:
    trials: int = 100
    calibration_trials: int = 20
    distinguisher_epochs: int = 30
    distinguisher_images: int = 100


@dataclass
class PatchSection:
    size: int = 32
    images: int = 40
    classifier_epochs: int = 20


@dataclass
class ExperimentConfig:
    """Complete experiment description; the canonical JSON of its meaningful fields is hashed"""

    seed: int = 0
    out_dir: str = str(Config.DEFAULT_OUT_DIR)
    jobs: int = 1
    corpus: CorpusSection = field(default_factory=CorpusSection)
    codec: CodecSection = field(default_factory=CodecSection)
    editors: List[EditorSection] = field(default_factory=lambda: [
        EditorSection(),
        EditorSection(name='editor-b', codec_seed=22, denoiser_seed=32),
    ])
    edits: List[EditSection] = field(default_factory=lambda: [
        EditSection(),
        EditSection(prompt='tint-red', t_edit=50),
    ])
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    extract: ExtractSection = field(default_factory=ExtractSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    game: GameSection = field(default_factory=GameSection)
    patch: PatchSection = field(default_factory=PatchSection)
    metrics: List[str] = field(default_factory=lambda: ['d_all', 'd_word', 'd_letter'])
    boundary_percentile: float = 95.0

    NON_SEMANTIC = ('out_dir', 'jobs')

    def validate(self):
        """Raise ConfigError on inconsistent settings"""
        if self.corpus.n_train < 1 or self.corpus.n_eval < 1:
            raise ConfigError("Corpus needs at least one training and one evaluation image")
        if self.corpus.path is not None and not (Path(self.corpus.path) / 'corpus.json').exists():
            raise ConfigError(f"Corpus path {self.corpus.path} has no corpus.json manifest")
        if not self.editors:
            raise ConfigError("At least one edit model is required")
        names = [e.name for e in self.editors]
        if len(set(names)) != len(names):
            raise ConfigError(f"Edit model names must be unique, got {names}")
        if not self.edits:
            raise ConfigError("At least one edit specification is required")
        if not self.sweep.alpha_grid or not self.sweep.lambda_grid:
            raise ConfigError("Alpha and lambda grids must be non-empty")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        unknown = set(self.metrics) - {'d_all', 'd_word', 'd_letter'}
        if unknown:
            raise ConfigError(f"Unknown metrics: {sorted(unknown)}")
        if self.extract.recognizer_mode not in ('template', 'classifier'):
            raise ConfigError(f"Unknown recognizer mode {self.extract.recognizer_mode!r}")
        if len(self.watermark.text) != self.watermark.glyphs:
            raise ConfigError(f"Watermark text {self.watermark.text!r} must have {self.watermark.glyphs} glyphs")
        try:
            w, c = self.watermark, self.corpus
            seg_h, seg_w = uniform_grid(c.height, c.width, w.rows, w.cols, w.margin).segment_shape
            glyph_geometry(seg_h, seg_w, w.glyphs)
        except ValueError as e:
            raise ConfigError(f"Watermark does not fit the image: {e}") from e
        if not 0 < self.injection.mu <= self.injection.eps:
            raise ConfigError("Injection step mu must satisfy 0 < mu <= eps")
        if self.injection.lam < 0 or min(self.sweep.lambda_grid) < 0:
            raise ConfigError("Injection lambda must be >= 0")
        if self.game.trials < 1:
            raise ConfigError("Game trials must be >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every semantically meaningful field"""
        data = {k: v for k, v in self.to_dict().items() if k not in self.NON_SEMANTIC}
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        return _build(cls, data, 'config').validate()

    @classmethod
    def load(cls, path: Optional[str] = None) -> 'ExperimentConfig':
        """
        Load a JSON config (defaults when path is None) and apply environment overrides

        Raises:
            ConfigError: Missing file, malformed JSON or invalid fields
        """
        data: Dict[str, Any] = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"Config file not found: {p}")
            try:
                data = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {p} is not valid JSON: {e}") from e
        cfg = _build(cls, data, 'config')
        return cfg.with_overrides(**env_overrides()).validate()

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       jobs: Optional[int] = None) -> 'ExperimentConfig':
        if seed is not None:
            self.seed = seed
        if out_dir is not None:
            self.out_dir = str(out_dir)
        if jobs is not None:
            self.jobs = jobs
        return self


def env_overrides() -> Dict[str, Any]:
    """RIW_SEED, RIW_OUT and RIW_JOBS from the environment"""
    out: Dict[str, Any] = {}
    try:
        if os.environ.get('RIW_SEED'):
            out['seed'] = int(os.environ['RIW_SEED'])
        if os.environ.get('RIW_JOBS'):
            out['jobs'] = int(os.environ['RIW_JOBS'])
    except ValueError as e:
        raise ConfigError(f"Invalid integer in environment override: {e}") from e
    if os.environ.get('RIW_OUT'):
        out['out_dir'] = os.environ['RIW_OUT']
    return out


_LIST_TYPES = {'editors': EditorSection, 'edits': EditSection}


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if name in _LIST_TYPES:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be a list")
            kwargs[name] = [_build(_LIST_TYPES[name], item, f"{where}.{name}[{i}]") for i, item in enumerate(value)]
        elif isinstance(f.default_factory, type) and is_dataclass(f.default_factory):
            kwargs[name] = _build(f.default_factory, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {where}: {e}") from e
