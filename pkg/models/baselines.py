"""
Comparison watermark schemes
Blind DCT coefficient-pair watermark and a learned autoencoder watermark with its
noise-robust and edited-image fine-tuned variants
"""
import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import train_test_split
import logging

from models.codec import batch_tensor, to_array, to_tensor
from utils.errors import ConvergenceError, ShapeMismatchError
from utils.storage import load_sidecar, load_state, save_checkpoint

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------- payloads

def text_to_bits(text: str) -> str:
    """8 bits per character, most significant first"""
    return ''.join(format(ord(c), '08b') for c in text)


def bits_to_text(bits: str) -> str:
    if len(bits) % 8:
        raise ValueError(f"Bit string length {len(bits)} is not a multiple of 8")
    return ''.join(chr(int(bits[i:i + 8], 2)) for i in range(0, len(bits), 8))


def random_text(rng: np.random.Generator, length: int = 3) -> str:
    letters = 'ABCDEFGHIJKLMNOPQRSTUVWXYZ'
    return ''.join(rng.choice(list(letters), size=length))


def bit_accuracy(decoded: str, truth: str) -> float:
    if len(decoded) != len(truth):
        raise ValueError(f"Bit strings differ in length: {len(decoded)} vs {len(truth)}")
    if not truth:
        return 1.0
    return sum(a == b for a, b in zip(decoded, truth)) / len(truth)


def _check_bits(bits: str):
    if any(b not in '01' for b in bits):
        raise ValueError(f"Payload must be a string of 0/1, got {bits!r}")


# --------------------------------------------------------------------------- DCT watermark

@dataclass(frozen=True)
class DctWatermarkConfig:
    """Blind luminance DCT watermark: one bit per block from a mid-frequency coefficient pair"""

    payload: str
    block: int = 8
    coeff_a: Tuple[int, int] = (4, 1)
    coeff_b: Tuple[int, int] = (3, 2)
    strength: float = 0.25
    target_ratio: float = 0.85
    iterations: int = 4

    def __post_init__(self):
        _check_bits(self.payload)
        if self.block < 2:
            raise ValueError(f"Block size must be >= 2, got {self.block}")
        for idx in (self.coeff_a, self.coeff_b):
            if not all(0 <= i < self.block for i in idx) or idx == (0, 0):
                raise ValueError(f"Coefficient index {idx} must be a non-DC entry of the block")
        if self.coeff_a == self.coeff_b:
            raise ValueError("Coefficient pair must name two different entries")
        if self.strength < 0:
            raise ValueError(f"Embedding strength must be >= 0, got {self.strength}")
        if not 0 < self.target_ratio < 1:
            raise ValueError(f"target_ratio must lie in (0, 1), got {self.target_ratio}")

    def capacity(self, height: int, width: int) -> int:
        return (height // self.block) * (width // self.block)


def luminance(x: np.ndarray) -> np.ndarray:
    if x.shape[2] == 1:
        return x[..., 0].astype(np.float64)
    return x.astype(np.float64) @ LUMA


def _blocks(height: int, width: int, block: int):
    for r in range(height // block):
        for c in range(width // block):
            yield r * block, c * block


def _coefficient_diff(coeffs: np.ndarray, cfg: DctWatermarkConfig) -> float:
    return float(coeffs[cfg.coeff_a] - coeffs[cfg.coeff_b])


def _bit_from_diff(d: float, strength: float) -> str:
    if strength == 0:
        return '1' if d > 0 else '0'
    return '1' if int(np.floor(d / strength)) % 2 == 0 else '0'


def dct_embed(x: np.ndarray, cfg: DctWatermarkConfig) -> np.ndarray:
    """
    Embed cfg.payload, repeated over every block, into the luminance DCT of x

    Args:
        x: Host image
        cfg: Watermark configuration

    Returns:
        Watermarked image clamped to [0, 1]

    Raises:
        ValueError: Payload longer than the block count
    """
    h, w, _ = x.shape
    capacity = cfg.capacity(h, w)
    if len(cfg.payload) > capacity:
        raise ValueError(f"Payload of {len(cfg.payload)} bits exceeds capacity of {capacity} blocks")
    out = x.astype(np.float64, copy=True)
    if not cfg.payload or cfg.strength == 0:
        return out

    n = cfg.block
    target = cfg.target_ratio * cfg.strength
    for _ in range(cfg.iterations):
        y = luminance(out)
        delta = np.zeros_like(y)
        worst = 0.0
        for b, (top, left) in enumerate(_blocks(h, w, n)):
            coeffs = cv2.dct(np.ascontiguousarray(y[top:top + n, left:left + n]))
            d = _coefficient_diff(coeffs, cfg)
            want = target if cfg.payload[b % len(cfg.payload)] == '1' else -target
            change = want - d
            worst = max(worst, abs(change))
            adjust = np.zeros((n, n))
            adjust[cfg.coeff_a] = change / 2
            adjust[cfg.coeff_b] = -change / 2
            delta[top:top + n, left:left + n] = cv2.idct(adjust)
        out = np.clip(out + delta[..., None], 0.0, 1.0)
        if worst < 1e-6:
            break
    return out


def dct_extract(x: np.ndarray, cfg: DctWatermarkConfig, flat_energy: float = 1e-6) -> str:
    """
    Recover the payload by majority vote over all blocks; flat blocks abstain

    Args:
        x: Possibly perturbed image
        cfg: Configuration used at embedding time
        flat_energy: AC energy below which a block carries no vote

    Returns:
        Bit string of len(cfg.payload)
    """
    length = len(cfg.payload)
    if length == 0:
        return ''
    h, w, _ = x.shape
    n = cfg.block
    y = luminance(x)
    votes = np.zeros((length, 2), dtype=int)
    for b, (top, left) in enumerate(_blocks(h, w, n)):
        coeffs = cv2.dct(np.ascontiguousarray(y[top:top + n, left:left + n]))
        if float(np.sum(coeffs ** 2) - coeffs[0, 0] ** 2) < flat_energy:
            continue
        bit = _bit_from_diff(_coefficient_diff(coeffs, cfg), cfg.strength)
        votes[b % length, int(bit)] += 1
    return ''.join('1' if ones > zeros else '0' for zeros, ones in votes)


# --------------------------------------------------------------------------- autoencoder watermark

class AeEncoder(nn.Module):
    """Image + broadcast bits -> bounded residual"""

    def __init__(self, channels: int, payload_len: int, hidden: int = 32, max_delta: float = 6 / 255):
        super().__init__()
        self.max_delta = max_delta
        self.net = nn.Sequential(
            nn.Conv2d(channels + payload_len, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        planes = (2 * bits - 1).view(b, -1, 1, 1).expand(b, bits.shape[1], h, w)
        residual = self.net(torch.cat([x, planes], dim=1))
        return torch.clamp(x + self.max_delta * torch.tanh(residual), 0.0, 1.0)


class AeDecoder(nn.Module):
    """Image -> bit logits"""

    def __init__(self, channels: int, payload_len: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(2 * hidden, payload_len),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AeWatermarkModel(nn.Module):
    def __init__(self, channels: int, payload_len: int, hidden: int = 32, max_delta: float = 6 / 255):
        super().__init__()
        self.channels = channels
        self.payload_len = payload_len
        self.hidden = hidden
        self.encoder = AeEncoder(channels, payload_len, hidden, max_delta)
        self.decoder = AeDecoder(channels, payload_len, hidden)


@dataclass
class AeWatermarkParams:
    """Autoencoder watermark networks plus training metadata"""

    model: AeWatermarkModel
    seed: int
    lam: float
    alpha_noise: float = 0.0
    epochs: int = 0
    finetune_epochs: int = 0
    bit_accuracy: Optional[float] = None
    history: List[float] = field(default_factory=list)

    @property
    def payload_len(self) -> int:
        return self.model.payload_len

    def sidecar(self) -> dict:
        return {
            'seed': self.seed,
            'lam': self.lam,
            'alpha_noise': self.alpha_noise,
            'epochs': self.epochs,
            'finetune_epochs': self.finetune_epochs,
            'bit_accuracy': self.bit_accuracy,
            'channels': self.model.channels,
            'payload_len': self.model.payload_len,
            'hidden': self.model.hidden,
            'max_delta': self.model.encoder.max_delta,
        }


def _bits_tensor(bits: Sequence[str]) -> torch.Tensor:
    return torch.as_tensor([[int(b) for b in s] for s in bits], dtype=torch.float32)


def ae_embed(params: AeWatermarkParams, x: np.ndarray, bits: str) -> np.ndarray:
    """Watermark x with a bit string of length payload_len"""
    _check_bits(bits)
    if len(bits) != params.payload_len:
        raise ShapeMismatchError(f"Payload has {len(bits)} bits, model expects {params.payload_len}")
    with torch.no_grad():
        x_hat = params.model.encoder(to_tensor(x), _bits_tensor([bits]))
    return to_array(x_hat)


def ae_decode(params: AeWatermarkParams, x: np.ndarray) -> str:
    with torch.no_grad():
        logits = params.model.decoder(to_tensor(x))[0]
    return ''.join('1' if v > 0 else '0' for v in logits.tolist())


def _held_out_accuracy(model: AeWatermarkModel, images: torch.Tensor, generator: torch.Generator,
                       alpha_noise: float = 0.0) -> float:
    with torch.no_grad():
        bits = torch.randint(0, 2, (len(images), model.payload_len), generator=generator).float()
        x_hat = model.encoder(images, bits)
        if alpha_noise > 0:
            x_hat = x_hat + alpha_noise * torch.randn(x_hat.shape, generator=generator)
        predicted = (model.decoder(x_hat) > 0).float()
    return float((predicted == bits).float().mean().item())


def ae_train(corpus: Sequence[np.ndarray], payload_len: int, lam: float, epochs: int, seed: int,
             alpha_noise: float = 0.0, batch_size: int = 16, learning_rate: float = 1e-3,
             error_threshold: float = 0.25) -> AeWatermarkParams:
    """
    Jointly train the watermark encoder and decoder:
    BCE(D(x_hat [+ alpha_noise * N]), w) + lam * ||x_hat - x||_2

    Args:
        corpus: Training images
        payload_len: Bits per payload
        lam: Weight of the pixel term
        epochs: Training epochs; 0 returns the seeded initialization
        seed: Seed for initialization, split, payloads and noise
        alpha_noise: Gaussian noise strength seen by the decoder during training
        batch_size: Minibatch size
        learning_rate: Adam learning rate
        error_threshold: Maximum accepted held-out bit error rate

    Returns:
        AeWatermarkParams

    Raises:
        ConvergenceError: Held-out bit error rate above threshold
    """
    if not corpus:
        raise ValueError("Autoencoder watermark corpus is empty")
    if payload_len < 1:
        raise ValueError(f"payload_len must be >= 1, got {payload_len}")
    torch.manual_seed(seed)
    model = AeWatermarkModel(corpus[0].shape[2], payload_len)
    model.eval()
    params = AeWatermarkParams(model=model, seed=seed, lam=lam, alpha_noise=alpha_noise)
    if epochs == 0:
        return params

    indices = np.arange(len(corpus))
    if len(corpus) >= 10:
        train_idx, test_idx = train_test_split(indices, test_size=0.1, random_state=seed)
    else:
        train_idx, test_idx = indices, indices
    train = batch_tensor([corpus[i] for i in train_idx])
    test = batch_tensor([corpus[i] for i in test_idx])

    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training AE watermark: {len(train)} images, {payload_len} bits, "
                f"lam={lam}, alpha_noise={alpha_noise}, {epochs} epochs")
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(train), generator=generator)
        total = 0.0
        for start in range(0, len(train), batch_size):
            x = train[order[start:start + batch_size]]
            bits = torch.randint(0, 2, (len(x), payload_len), generator=generator).float()
            optimizer.zero_grad()
            x_hat = model.encoder(x, bits)
            noisy = x_hat + alpha_noise * torch.randn(x_hat.shape, generator=generator) if alpha_noise > 0 else x_hat
            pixel = torch.linalg.vector_norm((x_hat - x).flatten(1), dim=1).mean()
            loss = F.binary_cross_entropy_with_logits(model.decoder(noisy), bits) + lam * pixel
            loss.backward()
            optimizer.step()
            total += loss.item() * len(x)
        params.history.append(total / len(train))
        if (epoch + 1) % 10 == 0 or epoch == epochs - 1:
            logger.info(f"AE epoch {epoch + 1}/{epochs}: loss={params.history[-1]:.4f}")
    model.eval()

    accuracy = _held_out_accuracy(model, test, torch.Generator().manual_seed(seed + 1), alpha_noise)
    params.epochs = epochs
    params.bit_accuracy = accuracy
    logger.info(f"AE held-out bit accuracy: {accuracy:.4f}")
    if 1.0 - accuracy > error_threshold:
        raise ConvergenceError('ae', 'bit_error', 1.0 - accuracy, error_threshold)
    return params


def ae_train_adversarial(corpus: Sequence[np.ndarray], payload_len: int, lam: float, alpha_noise: float,
                         epochs: int, seed: int, **kwargs) -> AeWatermarkParams:
    """ae_train with the decoder seeing x_hat + alpha_noise * N(0, I)"""
    if alpha_noise < 0:
        raise ValueError(f"alpha_noise must be >= 0, got {alpha_noise}")
    return ae_train(corpus, payload_len, lam, epochs, seed, alpha_noise=alpha_noise, **kwargs)


def ae_finetune_on_edits(params: AeWatermarkParams, edited_pairs: Sequence[Tuple[np.ndarray, str]],
                         epochs: int, seed: int, batch_size: int = 16,
                         learning_rate: float = 5e-4) -> AeWatermarkParams:
    """
    Fine-tune the decoder on (edited watermarked image, payload) pairs

    Args:
        params: Trained AE watermark (left untouched)
        edited_pairs: (x_hat_e, bits) pairs
        epochs: Fine-tuning epochs
        seed: Shuffling seed
        batch_size: Minibatch size
        learning_rate: Adam learning rate

    Returns:
        New AeWatermarkParams with a fine-tuned decoder and post-fine-tune training-set bit accuracy
    """
    if not edited_pairs:
        raise ValueError("Fine-tuning needs at least one edited pair")
    tuned = copy.deepcopy(params)
    decoder = tuned.model.decoder
    images = batch_tensor([p[0] for p in edited_pairs])
    for _, bits in edited_pairs:
        _check_bits(bits)
    targets = _bits_tensor([p[1] for p in edited_pairs])
    if targets.shape[1] != tuned.payload_len:
        raise ShapeMismatchError(f"Pairs carry {targets.shape[1]} bits, model expects {tuned.payload_len}")

    optimizer = torch.optim.Adam(decoder.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    decoder.train()
    for epoch in range(epochs):
        order = torch.randperm(len(images), generator=generator)
        for start in range(0, len(images), batch_size):
            batch = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(decoder(images[batch]), targets[batch])
            loss.backward()
            optimizer.step()
    decoder.eval()

    with torch.no_grad():
        accuracy = float(((decoder(images) > 0).float() == targets).float().mean().item())
    tuned.finetune_epochs = params.finetune_epochs + epochs
    tuned.bit_accuracy = accuracy
    logger.info(f"AE decoder fine-tuned on {len(images)} edited pairs: bit accuracy {accuracy:.4f}")
    return tuned


def save_ae(params: AeWatermarkParams, path) -> Path:
    return save_checkpoint(params.model, path, params.sidecar())


def load_ae(path) -> AeWatermarkParams:
    meta = load_sidecar(path)
    model = AeWatermarkModel(meta['channels'], meta['payload_len'], meta['hidden'], meta['max_delta'])
    model.load_state_dict(load_state(path))
    model.eval()
    return AeWatermarkParams(model=model, seed=meta['seed'], lam=meta['lam'], alpha_noise=meta['alpha_noise'],
                             epochs=meta['epochs'], finetune_epochs=meta['finetune_epochs'],
                             bit_accuracy=meta['bit_accuracy'])
