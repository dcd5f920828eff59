"""
Persistence helpers: 8-bit PNG images, JSON documents and checkpoint sidecars
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import torch
from PIL import Image as PILImage
import logging

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def save_png(x: np.ndarray, path: PathLike) -> Path:
    """Write an image as 8-bit PNG (pixel = round(value * 255))"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[2] == 1:
        PILImage.fromarray(pixels[..., 0]).save(path)
    else:
        PILImage.fromarray(pixels).save(path)
    return path


def load_png(path: PathLike) -> np.ndarray:
    """Load an 8-bit PNG as a float64 (H, W, C) image in [0, 1]"""
    with PILImage.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.astype(np.float64) / 255.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Round-trip pixels through the 8-bit PNG grid without touching disk"""
    return np.clip(np.round(x * 255.0), 0, 255) / 255.0


def save_json(data: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))
    return path


def load_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text())


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(module: torch.nn.Module, path: PathLike, sidecar: Dict[str, Any]) -> Path:
    """
    Save a module state dict plus a JSON sidecar next to it

    Args:
        module: Trained network
        path: Target .pt path
        sidecar: Metadata (seed, epochs, metrics, shape config)

    Returns:
        Path of the checkpoint
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    save_json(sidecar, sidecar_path(path))
    logger.info(f"Saved checkpoint {path.name}")
    return path


def load_state(path: PathLike) -> Dict[str, torch.Tensor]:
    return torch.load(Path(path), map_location='cpu')


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix('.json')


def load_sidecar(path: PathLike) -> Dict[str, Any]:
    return load_json(sidecar_path(path))


def write_corpus(images: List[np.ndarray], seeds: List[int], directory: PathLike) -> Path:
    """Write corpus PNGs and a manifest JSON list of {id, path, seed}"""
    directory = Path(directory)
    rows = []
    for i, (img, seed) in enumerate(zip(images, seeds)):
        image_id = f"img_{i:04d}"
        png = save_png(img, directory / f"{image_id}.png")
        rows.append({'id': image_id, 'path': png.name, 'seed': int(seed)})
    return save_json(rows, directory / 'corpus.json')


def read_corpus(directory: PathLike) -> List[Dict[str, Any]]:
    """Load corpus manifest rows with their images under key 'image'"""
    directory = Path(directory)
    manifest = directory / 'corpus.json'
    if not manifest.exists():
        raise FileNotFoundError(f"Corpus manifest not found: {manifest}")
    rows = load_json(manifest)
    for row in rows:
        row['image'] = load_png(directory / row['path'])
    return rows
