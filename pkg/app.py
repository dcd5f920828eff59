"""
Main application object for the Robust Invisible Watermark Lab
"""
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config, ExperimentConfig
from models import RunManifest
from models.baselines import AeWatermarkParams, load_ae
from models.codec import CodecParams, load_codec
from models.editsim import EditModel, EditSpec, load_denoiser
from models.evalgame import DistinguisherParams, SemanticFeatures, TextureFeatures, load_classifier
from models.extract import (RecognizerParams, ReconstructorParams, WatermarkExtractor, build_template_bank,
                            load_reconstructor, load_recognizer)
from models.riw import InjectionConfig
from utils.errors import StageError
from utils.imaging import SegmentLayout, WatermarkSpec, generate_corpus, image_seed, render_watermark, uniform_grid
from utils.storage import read_corpus, save_json, write_corpus

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'

Item = Tuple[str, np.ndarray]


class Lab:
    """Run context: configuration, output tree, manifest and lazily loaded models"""

    def __init__(self, cfg: ExperimentConfig, manifest: RunManifest):
        self.cfg = cfg
        self.root = cfg.out_path
        self.manifest = manifest
        self.config_hash = cfg.config_hash()
        self._corpus: Optional[Dict[str, List[Item]]] = None
        self._models: Dict[str, object] = {}

    # ------------------------------------------------------------------ paths

    def path(self, *parts) -> Path:
        return self.root.joinpath(*[str(p) for p in parts])

    def checkpoint(self, name: str) -> Path:
        return self.path('checkpoints', f'{name}.pt')

    # ------------------------------------------------------------------ data

    def corpus(self) -> Dict[str, List[Item]]:
        """Train / eval / aux splits, always read back from 8-bit PNGs"""
        if self._corpus is None:
            c = self.cfg.corpus
            directory = Path(c.path) if c.path else self.path('corpus')
            if not (directory / 'corpus.json').exists():
                total = c.n_train + c.n_eval + c.n_aux
                logger.info(f"Generating corpus of {total} images ({c.height}x{c.width}, seed={c.seed})")
                images = generate_corpus(total, c.height, c.width, c.seed, c.channels)
                write_corpus(images, [image_seed(c.seed, i) for i in range(total)], directory)
            rows = read_corpus(directory)
            needed = c.n_train + c.n_eval + c.n_aux
            if len(rows) < needed:
                raise StageError('corpus', f"Corpus at {directory} has {len(rows)} images, config needs {needed}")
            items = [(row['id'], row['image']) for row in rows]
            self._corpus = {
                'train': items[:c.n_train],
                'eval': items[c.n_train:c.n_train + c.n_eval],
                'aux': items[c.n_train + c.n_eval:needed],
            }
        return self._corpus

    def images(self, split: str) -> List[np.ndarray]:
        return [img for _, img in self.corpus()[split]]

    def watermark_spec(self, alpha: Optional[float] = None) -> WatermarkSpec:
        w = self.cfg.watermark
        return WatermarkSpec(text=w.text, glyphs_per_segment=w.glyphs, grid=(w.rows, w.cols),
                             alpha=self.cfg.injection.alpha if alpha is None else alpha)

    def layout(self) -> SegmentLayout:
        w, c = self.cfg.watermark, self.cfg.corpus
        return uniform_grid(c.height, c.width, w.rows, w.cols, w.margin)

    def watermark(self) -> np.ndarray:
        c = self.cfg.corpus
        return render_watermark(self.watermark_spec(), self.layout(), c.height, c.width, c.channels)

    def injection_config(self, alpha: Optional[float] = None, lam: Optional[float] = None) -> InjectionConfig:
        i = self.cfg.injection
        return InjectionConfig(alpha=i.alpha if alpha is None else alpha, lam=i.lam if lam is None else lam,
                               eps=i.eps, mu=i.mu, steps=i.steps, norm=i.norm, seed=self.cfg.seed)

    def edit_specs(self) -> List[EditSpec]:
        return [EditSpec(prompt=e.prompt, t_edit=e.t_edit, s_i=e.s_i, s_t=e.s_t, seed=self.cfg.seed)
                for e in self.cfg.edits]

    # ------------------------------------------------------------------ models (lazy)

    def _cached(self, key: str, loader):
        if key not in self._models:
            self._models[key] = loader()
        return self._models[key]

    def _require(self, name: str, stage: str = 'train') -> Path:
        path = self.checkpoint(name)
        if not path.exists():
            raise StageError(stage, f"Missing checkpoint {path.name}; run the train stage first")
        return path

    def get_codec(self) -> CodecParams:
        """Get or load the injector codec"""
        return self._cached('codec', lambda: load_codec(self._require('codec')))

    def get_editor(self, name: str) -> EditModel:
        """Get or load a named edit model"""
        def load():
            codec = load_codec(self._require(f'{name}_codec'))
            denoiser, schedule = load_denoiser(self._require(f'{name}_denoiser'))
            return EditModel(name=name, codec=codec, denoiser=denoiser, schedule=schedule)
        return self._cached(f'editor:{name}', load)

    def get_recognizer(self) -> RecognizerParams:
        def load():
            if self.cfg.extract.recognizer_mode == 'classifier':
                return load_recognizer(self._require('recognizer'))
            h, w = self.layout().segment_shape
            return build_template_bank(h, w, self.cfg.watermark.glyphs)
        return self._cached('recognizer', load)

    def get_reconstructor(self, name: str = 'reconstructor') -> ReconstructorParams:
        return self._cached(name, lambda: load_reconstructor(self._require(name)))

    def get_extractor(self, reconstruct: bool = False) -> WatermarkExtractor:
        def load():
            return WatermarkExtractor(self.get_recognizer(), self.layout(),
                                      self.get_reconstructor() if reconstruct else None)
        return self._cached(f'extractor:{reconstruct}', load)

    def get_ae(self, variant: str) -> AeWatermarkParams:
        return self._cached(f'ae:{variant}', lambda: load_ae(self._require(variant)))

    def get_classifier(self, name: str) -> DistinguisherParams:
        return self._cached(f'classifier:{name}', lambda: load_classifier(self._require(name)))

    def get_features(self):
        """(semantic, texture) feature extractors for edit distances"""
        def load():
            return SemanticFeatures(self.get_codec()), TextureFeatures(seed=self.cfg.seed + 7,
                                                                       channels=self.cfg.corpus.channels)
        return self._cached('features', load)


def create_lab(cfg: Optional[ExperimentConfig] = None, debug: bool = Config.DEBUG) -> Lab:
    """Lab factory"""
    cfg = cfg or ExperimentConfig.load()

    # Initialize directories
    out_dir = Config.init_app(cfg.out_path)

    # Setup logging
    setup_logging(out_dir, debug)

    manifest = RunManifest(out_dir / Config.MANIFEST_DB)
    lab = Lab(cfg, manifest)
    config_path = save_json(cfg.to_dict(), out_dir / 'config.json')
    manifest.record_artifact(config_path, 'config', 'json', lab.config_hash)

    logger.info(f"Watermark lab initialized at {out_dir} (config {lab.config_hash[:12]})")
    return lab


def setup_logging(out_dir: Path, debug: bool = False):
    """Configure lab logging"""
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, '_lab_handler', False)]:
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    console._lab_handler = True
    root.addHandler(console)

    if not debug:
        # Create logs directory if it doesn't exist
        log_dir = Path(out_dir) / 'logs'
        log_dir.mkdir(parents=True, exist_ok=True)

        # File handler
        file_handler = RotatingFileHandler(
            log_dir / Config.LOG_FILE,
            maxBytes=Config.LOG_MAX_BYTES,
            backupCount=Config.LOG_BACKUPS
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.INFO)
        file_handler._lab_handler = True
        root.addHandler(file_handler)

    root.setLevel(logging.DEBUG if debug else logging.INFO)
    logging.getLogger(__name__).info('Watermark lab startup')
