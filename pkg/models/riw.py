"""
Robust invisible watermark injection
Per-image projected sign-gradient descent that pulls the latent of x_hat toward the
latent of the watermark-overlaid target while keeping x_hat close to x
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import logging

from models.codec import CodecParams, input_gradient, to_tensor
from utils.errors import ShapeMismatchError
from utils.imaging import validate_image

logger = logging.getLogger(__name__)

NORMS = ('inf', 'l1')


@dataclass(frozen=True)
class InjectionConfig:
    """
    Hyper-parameters of one injection run

    lam = 0 is accepted: the objective then reduces to the latent l1 term alone.
    """

    alpha: float = 0.4
    lam: float = 1.0
    eps: float = 12 / 255
    mu: float = 2 / 255
    steps: int = 400
    norm: str = 'inf'
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.mu <= self.eps:
            raise ValueError(f"Need 0 < mu <= eps, got mu={self.mu}, eps={self.eps}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InjectionReport:
    """Loss trajectory and budget of one injection"""

    objective: float
    latent_terms: List[float] = field(default_factory=list)
    pixel_terms: List[float] = field(default_factory=list)
    roundtrip_terms: List[float] = field(default_factory=list)
    totals: List[float] = field(default_factory=list)
    budget: float = 0.0
    norm: str = 'inf'
    wall_time: float = 0.0

    def trailing_non_increasing(self, window: int = 50, tolerance: float = 0.05) -> bool:
        """True if the last `window` objective values never rise more than `tolerance` above the window start"""
        tail = self.totals[-window:]
        if len(tail) < 2:
            return True
        return max(tail[1:]) <= tail[0] * (1 + tolerance) + 1e-12

    def to_dict(self) -> dict:
        return asdict(self)


def build_target(x: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    """Target image x' = clamp(x + alpha * w, 0, 1)"""
    if x.shape != w.shape:
        raise ShapeMismatchError(f"Watermark shape {w.shape} does not match image {x.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return np.clip(x + alpha * w, 0.0, 1.0)


def project_l1(delta: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection onto the l1 ball of radius eps (sort-based)"""
    flat = delta.ravel()
    if np.abs(flat).sum() <= eps:
        return delta.copy()
    u = np.sort(np.abs(flat))[::-1]
    cssv = np.cumsum(u)
    ks = np.arange(1, len(u) + 1)
    rho = np.nonzero(u * ks > (cssv - eps))[0][-1]
    theta = (cssv[rho] - eps) / (rho + 1.0)
    return (np.sign(flat) * np.maximum(np.abs(flat) - theta, 0.0)).reshape(delta.shape)


def project(delta: np.ndarray, eps: float, norm: str) -> np.ndarray:
    if norm == 'inf':
        return np.clip(delta, -eps, eps)
    return project_l1(delta, eps)


def budget_norm(delta: np.ndarray, norm: str) -> float:
    if norm == 'inf':
        return float(np.abs(delta).max()) if delta.size else 0.0
    return float(np.abs(delta).sum())


@dataclass
class ObjectiveValue:
    total: float
    latent: float
    pixel: float
    roundtrip: float
    grad: np.ndarray


def _module_dtype(module) -> torch.dtype:
    if isinstance(module, nn.Module):
        for p in module.parameters():
            return p.dtype
    return torch.float64


class RiwObjective:
    """
    L(x_hat) = ||E(x_hat) - E(x')||_1 + lam * (||x_hat - x||_2 + ||D(E(x_hat)) - x||_2)

    The target latent E(x') is computed once at construction.
    """

    def __init__(self, encoder: Callable, decoder: Callable, x: np.ndarray, x_prime: np.ndarray, lam: float):
        if x.shape != x_prime.shape:
            raise ShapeMismatchError(f"Target shape {x_prime.shape} does not match image {x.shape}")
        self.encoder = encoder
        self.decoder = decoder
        self.lam = lam
        self.dtype = _module_dtype(encoder)
        self.x = to_tensor(x, self.dtype)
        with torch.no_grad():
            self.z_target = encoder(to_tensor(x_prime, self.dtype))

    def __call__(self, x_hat: np.ndarray) -> ObjectiveValue:
        terms = {}

        def loss(xh: torch.Tensor) -> torch.Tensor:
            z = self.encoder(xh)
            latent = (z - self.z_target).abs().sum()
            pixel = torch.linalg.vector_norm(xh - self.x)
            roundtrip = torch.linalg.vector_norm(self.decoder(z) - self.x)
            terms.update(latent=latent.item(), pixel=pixel.item(), roundtrip=roundtrip.item())
            return latent + self.lam * (pixel + roundtrip)

        total, grad = input_gradient(None, loss, x_hat, dtype=self.dtype)
        return ObjectiveValue(total, terms['latent'], terms['pixel'], terms['roundtrip'], grad)


def riw_objective(codec_e: Callable, codec_d: Callable, x_hat: np.ndarray, x: np.ndarray,
                  x_prime: np.ndarray, lam: float) -> ObjectiveValue:
    """
    Evaluate the injection objective and its gradient with respect to x_hat

    Args:
        codec_e: Encoder on (1, C, H, W) tensors
        codec_d: Decoder on latent tensors
        x_hat: Current watermarked image
        x: Original image
        x_prime: Target image
        lam: Weight of the pixel and round-trip terms

    Returns:
        ObjectiveValue with total, per-term values and gradient
    """
    if x_hat.shape != x.shape:
        raise ShapeMismatchError(f"x_hat shape {x_hat.shape} does not match image {x.shape}")
    return RiwObjective(codec_e, codec_d, x, x_prime, lam)(x_hat)


def inject_with(encoder: Callable, decoder: Callable, x: np.ndarray, w: np.ndarray,
                cfg: InjectionConfig) -> Tuple[np.ndarray, InjectionReport]:
    """Injection loop against arbitrary encoder/decoder callables"""
    if x.shape != w.shape:
        raise ShapeMismatchError(f"Watermark shape {w.shape} does not match image {x.shape}")
    x = validate_image(x)
    return optimize_towards(encoder, decoder, x, build_target(x, w, cfg.alpha), cfg)


def optimize_towards(encoder: Callable, decoder: Callable, x: np.ndarray, x_prime: np.ndarray,
                     cfg: InjectionConfig) -> Tuple[np.ndarray, InjectionReport]:
    """Projected sign-gradient descent towards the latent of an explicit target image"""
    if x.shape != x_prime.shape:
        raise ShapeMismatchError(f"Target shape {x_prime.shape} does not match image {x.shape}")
    started = time.perf_counter()
    x = x.astype(np.float64)
    x_hat = np.clip(x + project(x_prime - x, cfg.eps, cfg.norm), 0.0, 1.0)

    objective = RiwObjective(encoder, decoder, x, x_prime, cfg.lam)
    report = InjectionReport(objective=0.0, norm=cfg.norm)
    for step in range(cfg.steps + 1):
        value = objective(x_hat)
        report.totals.append(value.total)
        report.latent_terms.append(value.latent)
        report.pixel_terms.append(value.pixel)
        report.roundtrip_terms.append(value.roundtrip)
        if step == cfg.steps:
            break
        x_hat = x_hat - cfg.mu * np.sign(value.grad)
        delta = project(x_hat - x, cfg.eps, cfg.norm)
        x_hat = np.clip(x + delta, 0.0, 1.0)

    report.objective = report.totals[-1]
    report.budget = budget_norm(x_hat - x, cfg.norm)
    report.wall_time = time.perf_counter() - started
    logger.debug(
        f"Injection done: objective {report.totals[0]:.3f} -> {report.objective:.3f}, "
        f"budget={report.budget:.5f}"
    )
    return x_hat, report


def inject(codec_params: CodecParams, x: np.ndarray, w: np.ndarray,
           cfg: InjectionConfig) -> Tuple[np.ndarray, InjectionReport]:
    """
    Inject watermark w into x (x_hat <- x_hat - mu * sign(grad L), projected to the eps-ball)

    Args:
        codec_params: Injector codec
        x: Original image
        w: Rendered watermark image
        cfg: Injection configuration

    Returns:
        Tuple of (x_hat, InjectionReport); ||x_hat - x|| <= eps under cfg.norm
    """
    model = codec_params.model
    return inject_with(model.encoder, model.decoder, x, w, cfg)


def inject_to_target(codec_params: CodecParams, x: np.ndarray, x_prime: np.ndarray,
                     cfg: InjectionConfig) -> Tuple[np.ndarray, InjectionReport]:
    """inject() with a caller-built target, e.g. a corner patch overlay"""
    model = codec_params.model
    return optimize_towards(model.encoder, model.decoder, x, x_prime, cfg)


class WatermarkInjector:
    """Batch driver around inject() sharing one read-only codec"""

    def __init__(self, codec_params: CodecParams, config: InjectionConfig = InjectionConfig(), jobs: int = 1):
        """
        Args:
            codec_params: Trained injector codec
            config: Injection hyper-parameters
            jobs: Worker threads for batch injection
        """
        self.codec_params = codec_params
        self.config = config
        self.jobs = max(1, jobs)
        logger.info(f"Watermark injector ready: alpha={config.alpha:.4f}, lam={config.lam}, "
                    f"eps={config.eps:.4f}, steps={config.steps}, norm={config.norm}")

    def inject(self, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, InjectionReport]:
        return inject(self.codec_params, x, w, self.config)

    def inject_batch(self, images: Sequence[np.ndarray], w: np.ndarray) -> List[Tuple[np.ndarray, InjectionReport]]:
        """Inject into every image; output order matches input order"""
        if self.jobs == 1:
            results = [self.inject(x, w) for x in images]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(lambda x: self.inject(x, w), images))
        budgets = [r.budget for _, r in results]
        if budgets:
            logger.info(f"Injected {len(results)} images, max budget {max(budgets):.5f}")
        return results
