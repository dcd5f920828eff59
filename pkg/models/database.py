"""
Run manifest for the Robust Invisible Watermark Lab
SQLite tables for stage runs, artifacts, per-image failures and evaluation rows
"""
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pandas as pd
from sqlalchemy import Boolean, Column, DateTime, Float, Integer, String, Text, create_engine, select
from sqlalchemy.orm import declarative_base, sessionmaker
import logging

from utils.storage import file_sha256

logger = logging.getLogger(__name__)

Base = declarative_base()

# Frozen results schema
RESULT_COLUMNS = ['image_id', 'alpha', 'lambda', 'edit_model', 'segment_index', 'decoded',
                  'correct', 'confidence', 'sem_dist', 'vis_dist']


def _now():
    return datetime.now(timezone.utc)


class StageRun(Base):
    """One execution of a pipeline stage"""
    __tablename__ = 'stage_runs'

    id = Column(Integer, primary_key=True)
    stage = Column(String(50), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False, index=True)
    status = Column(String(20), nullable=False)  # 'ok', 'skipped', 'failed'
    message = Column(Text)
    started_at = Column(DateTime, default=_now)
    duration = Column(Float)


class Artifact(Base):
    """A file written by a stage, with its content hash"""
    __tablename__ = 'artifacts'

    id = Column(Integer, primary_key=True)
    path = Column(String(500), unique=True, nullable=False)
    sha256 = Column(String(64), nullable=False)
    stage = Column(String(50), nullable=False, index=True)
    kind = Column(String(30))  # 'image', 'checkpoint', 'csv', 'json', 'plot'
    config_hash = Column(String(64), index=True)
    created_at = Column(DateTime, default=_now)


class ImageFailure(Base):
    """Per-image error recorded while a batch stage continued"""
    __tablename__ = 'image_failures'

    id = Column(Integer, primary_key=True)
    stage = Column(String(50), nullable=False, index=True)
    image_id = Column(String(100), nullable=False)
    message = Column(Text)
    created_at = Column(DateTime, default=_now)


class EvalRow(Base):
    """One extracted segment (or one baseline payload) of one edited image"""
    __tablename__ = 'eval_rows'

    id = Column(Integer, primary_key=True)
    scheme = Column(String(20), nullable=False, index=True, default='riw')
    run = Column(String(50), nullable=False, index=True)
    image_id = Column(String(100), nullable=False, index=True)
    alpha = Column(Float)
    lam = Column('lambda', Float)
    edit_model = Column(String(100), nullable=False)
    segment_index = Column(Integer, nullable=False)
    decoded = Column(String(100))
    correct = Column(Boolean)
    confidence = Column(Float)
    sem_dist = Column(Float)
    vis_dist = Column(Float)
    reconstructed = Column(Boolean, default=False)

    def to_dict(self):
        return {
            'scheme': self.scheme,
            'run': self.run,
            'image_id': self.image_id,
            'alpha': self.alpha,
            'lambda': self.lam,
            'edit_model': self.edit_model,
            'segment_index': self.segment_index,
            'decoded': self.decoded,
            'correct': self.correct,
            'confidence': self.confidence,
            'sem_dist': self.sem_dist,
            'vis_dist': self.vis_dist,
            'reconstructed': self.reconstructed,
        }


class RunManifest:
    """Session wrapper over the manifest database of one output directory"""

    def __init__(self, db_path: Path, root: Optional[Path] = None):
        self.db_path = Path(db_path)
        self.root = Path(root) if root is not None else self.db_path.parent
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{self.db_path}")
        Base.metadata.create_all(self.engine)
        self.Session = sessionmaker(bind=self.engine, expire_on_commit=False)
        logger.info(f"Manifest database ready at {self.db_path}")

    def record_stage(self, stage: str, config_hash: str, status: str, duration: float = 0.0,
                     message: Optional[str] = None) -> StageRun:
        with self.Session() as session:
            run = StageRun(stage=stage, config_hash=config_hash, status=status, duration=duration, message=message)
            session.add(run)
            session.commit()
            return run

    def stage_runs(self, stage: Optional[str] = None) -> List[StageRun]:
        with self.Session() as session:
            query = select(StageRun).order_by(StageRun.id)
            if stage is not None:
                query = query.where(StageRun.stage == stage)
            return list(session.scalars(query))

    def _relative(self, path: Path) -> str:
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(path)

    def record_artifact(self, path: Path, stage: str, kind: str, config_hash: str) -> Artifact:
        """Insert or refresh the artifact row for a file"""
        key = self._relative(path)
        digest = file_sha256(path)
        with self.Session() as session:
            artifact = session.scalars(select(Artifact).where(Artifact.path == key)).first()
            if artifact is None:
                artifact = Artifact(path=key)
                session.add(artifact)
            artifact.sha256 = digest
            artifact.stage = stage
            artifact.kind = kind
            artifact.config_hash = config_hash
            session.commit()
            return artifact

    def artifacts(self, stage: Optional[str] = None) -> List[Artifact]:
        with self.Session() as session:
            query = select(Artifact).order_by(Artifact.path)
            if stage is not None:
                query = query.where(Artifact.stage == stage)
            return list(session.scalars(query))

    def verify(self) -> List[str]:
        """Problems found: missing artifact files or content hash mismatches"""
        problems = []
        for artifact in self.artifacts():
            path = self.root / artifact.path
            if not path.exists():
                problems.append(f"missing: {artifact.path}")
            elif file_sha256(path) != artifact.sha256:
                problems.append(f"hash mismatch: {artifact.path}")
        return problems

    def record_failure(self, stage: str, image_id: str, message: str):
        with self.Session() as session:
            session.add(ImageFailure(stage=stage, image_id=image_id, message=message))
            session.commit()

    def failures(self, stage: Optional[str] = None) -> List[ImageFailure]:
        with self.Session() as session:
            query = select(ImageFailure).order_by(ImageFailure.id)
            if stage is not None:
                query = query.where(ImageFailure.stage == stage)
            return list(session.scalars(query))

    def replace_eval_rows(self, scheme: str, run: str, rows: Iterable[Dict]):
        """Replace all rows of (scheme, run) so reruns never duplicate"""
        with self.Session() as session:
            session.query(EvalRow).filter(EvalRow.scheme == scheme, EvalRow.run == run).delete()
            for row in rows:
                data = dict(row)
                data['lam'] = data.pop('lambda', data.get('lam'))
                session.add(EvalRow(scheme=scheme, run=run, **data))
            session.commit()

    def eval_frame(self, scheme: Optional[str] = None) -> pd.DataFrame:
        """Evaluation rows as a DataFrame in deterministic order"""
        with self.Session() as session:
            query = select(EvalRow)
            if scheme is not None:
                query = query.where(EvalRow.scheme == scheme)
            rows = [r.to_dict() for r in session.scalars(query)]
        columns = ['scheme', 'run', 'reconstructed'] + RESULT_COLUMNS
        if not rows:
            return pd.DataFrame(columns=columns)
        frame = pd.DataFrame(rows)[columns]
        return frame.sort_values(
            ['scheme', 'run', 'reconstructed', 'edit_model', 'image_id', 'segment_index'], kind='mergesort'
        ).reset_index(drop=True)

    def export_results(self, path: Path, scheme: str = 'riw') -> Path:
        """Write the frozen-schema results CSV for one scheme"""
        frame = self.eval_frame(scheme)
        frame = frame[~frame['reconstructed'].astype(bool)] if len(frame) else frame
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame[RESULT_COLUMNS].to_csv(path, index=False, float_format='%.6f')
        return path
