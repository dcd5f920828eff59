"""
Stage runner shared by the CLI verbs
"""
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

from utils.errors import LabError, StageError
from utils.storage import load_json, save_json, sidecar_path

logger = logging.getLogger(__name__)


def execute(lab, stage: str, key: str, fn: Callable[[], None], done: Optional[Callable[[], bool]] = None):
    """
    Run one stage, record it in the manifest and skip it on a cache hit

    Args:
        lab: Lab context
        stage: Stage name
        key: Cache key (hash of the config sections the stage depends on)
        fn: Stage body
        done: Returns True when the outputs for `key` already exist
    """
    started = time.perf_counter()
    if done is not None and done():
        logger.info(f"Stage {stage}: cache hit, skipped")
        lab.manifest.record_stage(stage, key, 'skipped', 0.0)
        return
    logger.info(f"Stage {stage}: started")
    try:
        fn()
    except LabError as e:
        lab.manifest.record_stage(stage, key, 'failed', time.perf_counter() - started, str(e))
        logger.error(f"Stage {stage} failed: {e}", exc_info=True)
        raise
    except Exception as e:
        lab.manifest.record_stage(stage, key, 'failed', time.perf_counter() - started, str(e))
        logger.error(f"Stage {stage} failed: {e}", exc_info=True)
        raise StageError(stage, str(e)) from e
    duration = time.perf_counter() - started
    lab.manifest.record_stage(stage, key, 'ok', duration)
    logger.info(f"Stage {stage}: done in {duration:.1f}s")


def stamp_sidecar(checkpoint: Path, key: str):
    """Record the cache key in a checkpoint sidecar"""
    meta = load_json(sidecar_path(checkpoint))
    meta['config_hash'] = key
    save_json(meta, sidecar_path(checkpoint))


def checkpoint_current(checkpoint: Path, key: str) -> bool:
    side = sidecar_path(checkpoint)
    return checkpoint.exists() and side.exists() and load_json(side).get('config_hash') == key


def marker_current(marker: Path, key: str) -> bool:
    return marker.exists() and load_json(marker).get('config_hash') == key


def stage_key(lab, *names: str, **extra) -> str:
    """Cache key from the run seed, named config sections and extra JSON-able values"""
    data = {'seed': lab.cfg.seed, **{n: lab.cfg.to_dict()[n] for n in names}, **extra}
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def parallel_map(jobs: int, fn: Callable, items) -> list:
    """Map fn over items on `jobs` worker threads; output order matches input order"""
    items = list(items)
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
