"""
Latent image codec
Small convolutional encoder/decoder pair standing in for a latent diffusion VAE
"""
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import train_test_split
import logging

from utils.errors import ConvergenceError, ShapeMismatchError
from utils.storage import load_sidecar, load_state, save_checkpoint

logger = logging.getLogger(__name__)

DOWNSAMPLE = 4


def to_tensor(x: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) array -> (1, C, H, W) tensor"""
    return torch.as_tensor(np.ascontiguousarray(x.transpose(2, 0, 1)), dtype=dtype).unsqueeze(0)


def batch_tensor(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """List of (H, W, C) arrays -> (N, C, H, W) tensor"""
    return torch.as_tensor(np.stack([img.transpose(2, 0, 1) for img in images]), dtype=dtype)


def to_array(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) float64 array"""
    return t.detach().cpu().double().squeeze(0).permute(1, 2, 0).numpy()


@dataclass(frozen=True)
class CodecConfig:
    """Shape configuration of the codec"""

    channels: int = 3
    latent_channels: int = 8
    hidden: int = 32


class LatentCodec(nn.Module):
    """3-layer strided conv encoder with a mirrored transposed-conv decoder"""

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        c, h, z = config.channels, config.hidden, config.latent_channels
        self.config = config
        self.encoder = nn.Sequential(
            nn.Conv2d(c, h, 3, stride=2, padding=1),        # H -> H/2
            nn.SiLU(),
            nn.Conv2d(h, 2 * h, 3, stride=2, padding=1),    # H/2 -> H/4
            nn.SiLU(),
            nn.Conv2d(2 * h, z, 3, stride=1, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(z, 2 * h, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * h, h, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(h, c, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass
class CodecParams:
    """A codec network plus the metadata written to its sidecar"""

    model: LatentCodec
    seed: int
    epochs: int = 0
    rmse: Optional[float] = None
    history: List[float] = field(default_factory=list)

    @property
    def config(self) -> CodecConfig:
        return self.model.config

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def sidecar(self) -> dict:
        return {
            'seed': self.seed,
            'epochs': self.epochs,
            'rmse': self.rmse,
            'shape_config': asdict(self.config),
            'downsample': DOWNSAMPLE,
        }


def init_codec(seed: int, config: CodecConfig = CodecConfig()) -> CodecParams:
    """Seeded, untrained codec"""
    torch.manual_seed(seed)
    model = LatentCodec(config)
    model.eval()
    return CodecParams(model=model, seed=seed)


def _check_image_shape(params: CodecParams, x: np.ndarray):
    h, w, c = x.shape
    if c != params.config.channels:
        raise ShapeMismatchError(f"Codec expects {params.config.channels} channels, got {c}")
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeMismatchError(f"Image sides must be divisible by {DOWNSAMPLE}, got {h}x{w}")


def encode(params: CodecParams, x: np.ndarray) -> np.ndarray:
    """
    Encode an image into its latent (H/4, W/4, C_lat)

    Args:
        params: Codec
        x: Image in [0, 1]

    Returns:
        Latent array
    """
    _check_image_shape(params, x)
    with torch.no_grad():
        z = params.model.encoder(to_tensor(x, params.dtype))
    return to_array(z)


def decode(params: CodecParams, z: np.ndarray) -> np.ndarray:
    """Decode a latent into an image clamped to [0, 1]"""
    if z.ndim != 3 or z.shape[2] != params.config.latent_channels:
        raise ShapeMismatchError(
            f"Latent must be (h, w, {params.config.latent_channels}), got {z.shape}"
        )
    with torch.no_grad():
        x = params.model.decoder(to_tensor(z, params.dtype))
    return np.clip(to_array(x), 0.0, 1.0)


def input_gradient(params: Optional[CodecParams], loss: Callable[[torch.Tensor], torch.Tensor],
                   x: np.ndarray, dtype: Optional[torch.dtype] = None):
    """
    Gradient of a scalar loss with respect to the input pixels

    Args:
        params: Codec whose dtype is used when dtype is not given (may be None)
        loss: Function of a (1, C, H, W) tensor returning a scalar tensor; it may call
            the codec encoder/decoder
        x: Point of evaluation
        dtype: Tensor dtype override

    Returns:
        Tuple of (loss value, gradient array shaped like x)
    """
    if dtype is None:
        dtype = params.dtype if params is not None else torch.float64
    xt = to_tensor(x, dtype).requires_grad_(True)
    value = loss(xt)
    if value.dim() != 0:
        raise ValueError("Loss must return a scalar tensor")
    if not value.requires_grad:
        # Constant in x
        return float(value.item()), np.zeros_like(x, dtype=np.float64)
    (grad,) = torch.autograd.grad(value, xt, allow_unused=True)
    if grad is None:
        return float(value.item()), np.zeros_like(x, dtype=np.float64)
    return float(value.item()), to_array(grad)


def train_codec(corpus: Sequence[np.ndarray], epochs: int, seed: int,
                config: Optional[CodecConfig] = None, batch_size: int = 16,
                learning_rate: float = 2e-3, holdout: float = 0.1,
                rmse_threshold: float = 0.08) -> CodecParams:
    """
    Train the codec to minimise mean squared reconstruction error

    Args:
        corpus: Training images (same shape)
        epochs: Passes over the training split; 0 returns the seeded initialization
        seed: Seed for initialization, split and shuffling
        config: Shape configuration (channels inferred from the corpus when omitted)
        batch_size: Minibatch size
        learning_rate: Adam learning rate
        holdout: Held-out fraction used for the RMSE check
        rmse_threshold: Maximum accepted held-out per-pixel RMSE

    Returns:
        Trained CodecParams

    Raises:
        ConvergenceError: Held-out RMSE above threshold after training
    """
    if not corpus:
        raise ValueError("Codec training corpus is empty")
    if config is None:
        config = CodecConfig(channels=corpus[0].shape[2])
    params = init_codec(seed, config)
    if epochs == 0:
        return params

    indices = np.arange(len(corpus))
    if len(corpus) >= 10 and holdout > 0:
        train_idx, test_idx = train_test_split(indices, test_size=holdout, random_state=seed)
    else:
        train_idx, test_idx = indices, indices
    train = batch_tensor([corpus[i] for i in train_idx], params.dtype)
    test = batch_tensor([corpus[i] for i in test_idx], params.dtype)

    model = params.model
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training codec: {len(train)} images, {epochs} epochs, seed={seed}")

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(train), generator=generator)
        total = 0.0
        for start in range(0, len(train), batch_size):
            batch = train[order[start:start + batch_size]]
            optimizer.zero_grad()
            loss = F.mse_loss(model(batch), batch)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        params.history.append(total / len(train))
        if (epoch + 1) % 10 == 0 or epoch == epochs - 1:
            logger.info(f"Codec epoch {epoch + 1}/{epochs}: train mse={params.history[-1]:.5f}")
    model.eval()

    with torch.no_grad():
        rmse = float(torch.sqrt(F.mse_loss(model(test), test)).item())
    params.epochs = epochs
    params.rmse = rmse
    logger.info(f"Codec held-out RMSE: {rmse:.4f}")
    if rmse > rmse_threshold:
        raise ConvergenceError('codec', 'rmse', rmse, rmse_threshold)
    return params


def save_codec(params: CodecParams, path) -> Path:
    return save_checkpoint(params.model, path, params.sidecar())


def load_codec(path) -> CodecParams:
    meta = load_sidecar(path)
    params = init_codec(meta['seed'], CodecConfig(**meta['shape_config']))
    params.model.load_state_dict(load_state(path))
    params.model.eval()
    params.epochs = meta['epochs']
    params.rmse = meta['rmse']
    return params
