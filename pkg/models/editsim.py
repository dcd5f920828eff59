"""
Simulated diffusion-based image editor
Forward noising, a small conditional noise predictor, two-condition classifier-free
guidance and the encode -> partial diffusion -> guided reverse -> decode edit pipeline
"""
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
from sklearn.model_selection import train_test_split
import logging

from models.codec import CodecParams, batch_tensor, to_array, to_tensor
from utils.errors import ConvergenceError, ShapeMismatchError
from utils.storage import load_sidecar, load_state, save_checkpoint

logger = logging.getLogger(__name__)

NULL_PROMPT = 'null'


# --------------------------------------------------------------------------- schedule

@dataclass
class DiffusionSchedule:
    """Cumulative signal coefficients a_t and reverse noise scales sigma_t for t = 1..T_max"""

    a: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.a.ndim != 1 or self.a.shape != self.sigma.shape or len(self.a) < 1:
            raise ValueError("Schedule arrays must be 1-D with equal, non-zero length")
        if np.any(self.a < 0) or np.any(self.a > 1):
            raise ValueError("Schedule coefficients must lie in [0, 1]")
        if np.any(np.diff(self.a) > 0):
            raise ValueError("Schedule coefficients must be non-increasing")
        if np.any(self.sigma < 0):
            raise ValueError("Reverse noise scales must be >= 0")

    @classmethod
    def linear(cls, t_max: int = 100, a_start: float = 0.9999, a_end: float = 0.02) -> 'DiffusionSchedule':
        """Linear a_t with the DDPM fixed small-variance sigma_t (sigma_1 = 0)"""
        if not 0 < a_end < a_start < 1:
            raise ValueError(f"Need 0 < a_end < a_start < 1, got {a_start}, {a_end}")
        a = np.linspace(a_start, a_end, t_max)
        a_prev = np.concatenate([[1.0], a[:-1]])
        beta = 1.0 - a / a_prev
        sigma = np.sqrt((1.0 - a_prev) / (1.0 - a) * beta)
        sigma[0] = 0.0
        return cls(a=a, sigma=sigma)

    @property
    def t_max(self) -> int:
        return len(self.a)

    def check_step(self, t: int):
        if not 1 <= t <= self.t_max:
            raise ValueError(f"Step t={t} outside [1, {self.t_max}]")

    def a_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.a[t - 1])

    def a_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.a[t - 2])

    def sigma_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.sigma[t - 1])

    def describe(self) -> dict:
        return {'t_max': self.t_max, 'a_start': float(self.a[0]), 'a_end': float(self.a[-1])}


def ddpm_forward(schedule: DiffusionSchedule, z0, t: int, noise):
    """
    Forward noising z_t = sqrt(a_t) * z0 + sqrt(1 - a_t) * noise

    Works on numpy arrays and torch tensors alike.
    """
    a_t = schedule.a_at(t)
    if tuple(z0.shape) != tuple(noise.shape):
        raise ShapeMismatchError(f"Noise shape {tuple(noise.shape)} does not match latent {tuple(z0.shape)}")
    return math.sqrt(a_t) * z0 + math.sqrt(1.0 - a_t) * noise


def cfg_combine(f_null, f_img, f_full, s_i: float, s_t: float):
    """
    Two-condition classifier-free guidance:
    f_null + s_I * (f_img - f_null) + s_T * (f_full - f_img)
    """
    if not (tuple(f_null.shape) == tuple(f_img.shape) == tuple(f_full.shape)):
        raise ShapeMismatchError("Guidance inputs must share one shape")
    return f_null + s_i * (f_img - f_null) + s_t * (f_full - f_img)


# --------------------------------------------------------------------------- prompts

def _tint(x: np.ndarray, channel: int, amount: float) -> np.ndarray:
    out = x * 0.9
    out[..., channel] = x[..., channel] + amount
    return np.clip(out, 0.0, 1.0)


def _hue_rotate(x: np.ndarray, degrees: float = 60.0) -> np.ndarray:
    hsv = cv2.cvtColor(x.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = (hsv[..., 0] + degrees) % 360.0
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64), 0.0, 1.0)


def _desaturate(x: np.ndarray) -> np.ndarray:
    gray = x.mean(axis=2, keepdims=True)
    return np.clip(0.2 * x + 0.8 * gray, 0.0, 1.0)


# Deterministic pixel-domain effect paired with each prompt label
EDIT_EFFECTS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    NULL_PROMPT: lambda x: x,
    'tint-red': lambda x: _tint(x, 0, 0.2),
    'tint-blue': lambda x: _tint(x, 2, 0.2),
    'desaturate': _desaturate,
    'darken': lambda x: np.clip(x * 0.7, 0.0, 1.0),
    'hue-rotate': _hue_rotate,
}


class PromptTable:
    """Fixed seeded embedding table for discrete prompt labels; the null prompt embeds to zeros"""

    def __init__(self, labels: Sequence[str], dim: int = 16, seed: int = 1234):
        labels = list(labels)
        if NULL_PROMPT not in labels:
            labels = [NULL_PROMPT] + labels
        unknown = [lab for lab in labels if lab not in EDIT_EFFECTS]
        if unknown:
            raise ValueError(f"Prompt labels without an edit effect: {unknown}")
        self.labels = labels
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(labels), dim)) / math.sqrt(dim)
        table[labels.index(NULL_PROMPT)] = 0.0
        self.table = table

    def index(self, label: str) -> int:
        if label not in self.labels:
            raise ValueError(f"Unknown prompt label {label!r}")
        return self.labels.index(label)

    def embedding(self, label: str) -> np.ndarray:
        return self.table[self.index(label)].copy()

    @property
    def null(self) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> dict:
        return {'labels': self.labels, 'dim': self.dim, 'seed': self.seed}


# --------------------------------------------------------------------------- denoiser

def timestep_embedding(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t / T_max, shape (N, dim)"""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=t_frac.dtype) * (-math.log(1000.0) / max(half - 1, 1)))
    args = t_frac[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConditionalDenoiser(nn.Module):
    """
    Noise predictor f(z_t, t, E(x), p)

    The network predicts a latent offset g; the returned noise estimate is
    eps_c - sqrt(a_t / (1 - a_t)) * g, where eps_c is the noise implied by the
    conditioning latent.
    """

    def __init__(self, latent_channels: int = 8, prompt_dim: int = 16, hidden: int = 64, time_dim: int = 16):
        super().__init__()
        self.latent_channels = latent_channels
        self.prompt_dim = prompt_dim
        self.hidden = hidden
        self.time_dim = time_dim
        self.conv_in = nn.Conv2d(2 * latent_channels, hidden, 3, padding=1)
        self.film = nn.Linear(time_dim + prompt_dim, 2 * hidden)
        self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, z_t, t_frac, a_t, cond, prompt):
        h = self.act(self.conv_in(torch.cat([z_t, cond], dim=1)))
        emb = torch.cat([timestep_embedding(t_frac, self.time_dim), prompt], dim=1)
        scale, shift = self.film(emb).chunk(2, dim=1)
        h = h * (1 + scale[..., None, None]) + shift[..., None, None]
        h = self.act(self.conv_mid(self.act(h)))
        g = self.conv_out(h)
        a = a_t.view(-1, 1, 1, 1)
        one_minus = torch.clamp(1 - a, min=1e-8)
        eps_c = (z_t - torch.sqrt(a) * cond) / torch.sqrt(one_minus)
        return eps_c - torch.sqrt(a / one_minus) * g


@dataclass
class DenoiserParams:
    """Trained noise predictor plus its prompt table and sidecar metadata"""

    model: ConditionalDenoiser
    prompts: PromptTable
    seed: int
    epochs: int = 0
    loss: Optional[float] = None
    history: List[float] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype


def init_denoiser(seed: int, prompts: PromptTable, latent_channels: int = 8, hidden: int = 64) -> DenoiserParams:
    torch.manual_seed(seed)
    model = ConditionalDenoiser(latent_channels, prompts.dim, hidden)
    model.eval()
    return DenoiserParams(model=model, prompts=prompts, seed=seed)


def predict_noise(schedule: DiffusionSchedule, params: DenoiserParams, z_t: torch.Tensor, t: int,
                  cond: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
    """Single-condition noise prediction for a batch sharing one step t"""
    n = z_t.shape[0]
    t_frac = torch.full((n,), t / schedule.t_max, dtype=z_t.dtype)
    a_t = torch.full((n,), schedule.a_at(t), dtype=z_t.dtype)
    if prompt.dim() == 1:
        prompt = prompt.unsqueeze(0).expand(n, -1)
    return params.model(z_t, t_frac, a_t, cond, prompt)


def guided_noise(schedule, params, z_t, t, cond, prompt, s_i: float, s_t: float) -> torch.Tensor:
    """Noise estimate combined from the null, image-only and full conditions"""
    null_cond = torch.zeros_like(cond)
    null_prompt = torch.zeros_like(prompt)
    f_null = predict_noise(schedule, params, z_t, t, null_cond, null_prompt)
    f_img = predict_noise(schedule, params, z_t, t, cond, null_prompt)
    f_full = predict_noise(schedule, params, z_t, t, cond, prompt)
    return cfg_combine(f_null, f_img, f_full, s_i, s_t)


def reverse_step(schedule: DiffusionSchedule, params: DenoiserParams, z_t, t: int, cond, prompt, noise,
                 guidance: Optional[Tuple[float, float]] = None):
    """
    One ancestral step z_{t-1} = mean(z_t, eps_hat) + sigma_t * noise

    Args:
        schedule: Diffusion schedule
        params: Denoiser
        z_t: Noisy latent (1, C, h, w) tensor or (h, w, C) array
        t: Current step (>= 1)
        cond: Conditioning latent, same shape as z_t
        prompt: Prompt embedding vector
        noise: Gaussian noise, same shape as z_t
        guidance: Optional (s_I, s_T); when given the noise estimate is guided

    Returns:
        z_{t-1}, same type as z_t
    """
    schedule.check_step(t)
    as_array = isinstance(z_t, np.ndarray)
    dtype = params.dtype
    if as_array:
        z_t, cond, noise = (to_tensor(v, dtype) for v in (z_t, cond, noise))
    prompt = torch.as_tensor(np.asarray(prompt) if not torch.is_tensor(prompt) else prompt, dtype=dtype)

    with torch.no_grad():
        if guidance is None:
            eps = predict_noise(schedule, params, z_t, t, cond, prompt)
        else:
            eps = guided_noise(schedule, params, z_t, t, cond, prompt, *guidance)
        a_t, a_prev = schedule.a_at(t), schedule.a_prev(t)
        alpha = a_t / a_prev
        beta = 1.0 - alpha
        mean = (z_t - beta / math.sqrt(max(1.0 - a_t, 1e-12)) * eps) / math.sqrt(alpha)
        out = mean + schedule.sigma_at(t) * noise
    return to_array(out) if as_array else out


# --------------------------------------------------------------------------- edit

@dataclass(frozen=True)
class EditSpec:
    """Parameters of one simulated edit"""

    prompt: str = NULL_PROMPT
    t_edit: int = 40
    s_i: float = 1.5
    s_t: float = 1.5
    seed: int = 0

    def validate(self, schedule: DiffusionSchedule, prompts: PromptTable):
        schedule.check_step(self.t_edit)
        if self.s_i < 0 or self.s_t < 0:
            raise ValueError(f"Guidance scales must be >= 0, got {self.s_i}, {self.s_t}")
        prompts.index(self.prompt)

    def to_dict(self) -> dict:
        return asdict(self)


def edit(codec_params: CodecParams, denoiser_params: DenoiserParams, schedule: DiffusionSchedule,
         x: np.ndarray, spec: EditSpec, require_trained: bool = True) -> np.ndarray:
    """
    Edit an image: encode, noise to t_edit, guided reverse chain, decode

    Deterministic given spec.seed. Raises ValueError for untrained models unless
    require_trained is False.
    """
    if require_trained and (denoiser_params.epochs == 0 or codec_params.epochs == 0):
        raise ValueError("Editing requires a trained codec and denoiser")
    spec.validate(schedule, denoiser_params.prompts)
    dtype = denoiser_params.dtype
    generator = torch.Generator().manual_seed(spec.seed)
    prompt = torch.as_tensor(denoiser_params.prompts.embedding(spec.prompt), dtype=dtype)

    with torch.no_grad():
        cond = codec_params.model.encoder(to_tensor(x, codec_params.dtype)).to(dtype)
        noise = torch.randn(cond.shape, generator=generator, dtype=dtype)
        z = ddpm_forward(schedule, cond, spec.t_edit, noise)
        for t in range(spec.t_edit, 0, -1):
            step_noise = torch.randn(cond.shape, generator=generator, dtype=dtype)
            z = reverse_step(schedule, denoiser_params, z, t, cond, prompt, step_noise,
                             guidance=(spec.s_i, spec.s_t))
        out = codec_params.model.decoder(z.to(codec_params.dtype))
    return np.clip(to_array(out), 0.0, 1.0)


@dataclass
class EditModel:
    """A named editor: its own codec, denoiser and schedule"""

    name: str
    codec: CodecParams
    denoiser: DenoiserParams
    schedule: DiffusionSchedule

    def __call__(self, x: np.ndarray, spec: EditSpec) -> np.ndarray:
        return edit(self.codec, self.denoiser, self.schedule, x, spec)


# --------------------------------------------------------------------------- training

def _edit_pairs(codec_params: CodecParams, corpus: Sequence[np.ndarray], prompts: PromptTable):
    """Encode (condition, target) latent pairs for every image and prompt"""
    conds, targets, labels = [], [], []
    with torch.no_grad():
        clean = codec_params.model.encoder(batch_tensor(corpus, codec_params.dtype))
        for label in prompts.labels:
            effect = EDIT_EFFECTS[label]
            edited = codec_params.model.encoder(batch_tensor([effect(x) for x in corpus], codec_params.dtype))
            conds.append(clean)
            targets.append(edited)
            labels.extend([prompts.index(label)] * len(corpus))
    return torch.cat(conds), torch.cat(targets), torch.as_tensor(labels)


def _denoising_loss(params, schedule, z0, cond, prompt_idx, generator, prompt_dropout, cond_dropout,
                    snr_gamma, table):
    n = z0.shape[0]
    t = torch.randint(1, schedule.t_max + 1, (n,), generator=generator)
    a_t = torch.as_tensor(schedule.a[t.numpy() - 1], dtype=z0.dtype)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    a = a_t.view(-1, 1, 1, 1)
    z_t = torch.sqrt(a) * z0 + torch.sqrt(1 - a) * noise

    prompt = table[prompt_idx]
    drop_p = torch.rand(n, generator=generator) < prompt_dropout
    prompt = torch.where(drop_p[:, None], torch.zeros_like(prompt), prompt)
    drop_c = torch.rand(n, generator=generator) < cond_dropout
    cond = torch.where(drop_c[:, None, None, None], torch.zeros_like(cond), cond)

    pred = params.model(z_t, t.to(z0.dtype) / schedule.t_max, a_t, cond, prompt)
    snr = a_t / torch.clamp(1 - a_t, min=1e-8)
    weight = torch.clamp(snr, max=snr_gamma) / snr
    per_sample = ((pred - noise) ** 2).mean(dim=(1, 2, 3))
    return (weight * per_sample).mean()


def train_denoiser(codec_params: CodecParams, corpus: Sequence[np.ndarray], prompts: Sequence[str],
                   epochs: int, seed: int, schedule: Optional[DiffusionSchedule] = None,
                   embedding_dim: int = 16, table_seed: int = 1234, hidden: int = 64,
                   batch_size: int = 32, learning_rate: float = 2e-3, prompt_dropout: float = 0.1,
                   cond_dropout: float = 0.05, snr_gamma: float = 5.0, holdout: float = 0.1,
                   loss_threshold: float = 0.5) -> DenoiserParams:
    """
    Train the conditional noise predictor on (E(x), E(effect_p(x))) pairs

    Args:
        codec_params: Trained editor codec
        corpus: Training images
        prompts: Prompt labels (null prompt added automatically)
        epochs: Training epochs; 0 returns the seeded initialization
        seed: Seed for initialization, splits and noise
        schedule: Diffusion schedule (linear default)
        embedding_dim: Prompt embedding length
        table_seed: Seed of the prompt embedding table
        hidden: Hidden channels
        batch_size: Minibatch size
        learning_rate: Adam learning rate
        prompt_dropout: Probability of replacing the prompt by the null embedding
        cond_dropout: Probability of dropping the conditioning latent
        snr_gamma: Min-SNR loss weighting cap
        holdout: Held-out fraction
        loss_threshold: Maximum held-out weighted loss relative to the skip-only baseline

    Returns:
        DenoiserParams

    Raises:
        ConvergenceError: Held-out relative loss above threshold
    """
    if not corpus:
        raise ValueError("Denoiser training corpus is empty")
    schedule = schedule or DiffusionSchedule.linear()
    table = PromptTable(prompts, embedding_dim, table_seed)
    params = init_denoiser(seed, table, codec_params.config.latent_channels, hidden)
    if epochs == 0:
        return params

    idx = np.arange(len(corpus))
    if len(corpus) >= 10 and holdout > 0:
        train_idx, test_idx = train_test_split(idx, test_size=holdout, random_state=seed)
    else:
        train_idx, test_idx = idx, idx
    cond, z0, labels = _edit_pairs(codec_params, [corpus[i] for i in train_idx], table)
    test_cond, test_z0, test_labels = _edit_pairs(codec_params, [corpus[i] for i in test_idx], table)
    dtype = params.dtype
    cond, z0, test_cond, test_z0 = (v.to(dtype) for v in (cond, z0, test_cond, test_z0))
    emb = torch.as_tensor(table.table, dtype=dtype)

    optimizer = torch.optim.Adam(params.model.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)
    logger.info(f"Training denoiser: {len(z0)} pairs, {epochs} epochs, seed={seed}")
    params.model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(z0), generator=generator)
        total = 0.0
        for start in range(0, len(z0), batch_size):
            b = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = _denoising_loss(params, schedule, z0[b], cond[b], labels[b], generator,
                                   prompt_dropout, cond_dropout, snr_gamma, emb)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(b)
        params.history.append(total / len(z0))
        if (epoch + 1) % 10 == 0 or epoch == epochs - 1:
            logger.info(f"Denoiser epoch {epoch + 1}/{epochs}: loss={params.history[-1]:.5f}")
    params.model.eval()

    with torch.no_grad():
        eval_gen = torch.Generator().manual_seed(seed + 1)
        held = _denoising_loss(params, schedule, test_z0, test_cond, test_labels, eval_gen,
                               0.0, 0.0, snr_gamma, emb).item()
        # Baseline: the skip path alone (g = 0)
        t = torch.randint(1, schedule.t_max + 1, (len(test_z0),), generator=torch.Generator().manual_seed(seed + 1))
        a_t = torch.as_tensor(schedule.a[t.numpy() - 1], dtype=dtype)
        snr = a_t / torch.clamp(1 - a_t, min=1e-8)
        weight = torch.clamp(snr, max=snr_gamma)
        baseline = (weight * ((test_z0 - test_cond) ** 2).mean(dim=(1, 2, 3))).mean().item()
    relative = held / max(baseline, 1e-12)
    params.epochs = epochs
    params.loss = held
    logger.info(f"Denoiser held-out loss {held:.5f} (relative {relative:.3f})")
    if relative > loss_threshold:
        raise ConvergenceError('denoiser', 'relative_loss', relative, loss_threshold)
    return params


def save_denoiser(params: DenoiserParams, schedule: DiffusionSchedule, path) -> Path:
    sidecar = {
        'seed': params.seed,
        'epochs': params.epochs,
        'loss': params.loss,
        'schedule': schedule.describe(),
        'prompts': params.prompts.describe(),
        'latent_channels': params.model.latent_channels,
        'hidden': params.model.hidden,
    }
    return save_checkpoint(params.model, path, sidecar)


def load_denoiser(path) -> Tuple[DenoiserParams, DiffusionSchedule]:
    meta = load_sidecar(path)
    prompts = PromptTable(meta['prompts']['labels'], meta['prompts']['dim'], meta['prompts']['seed'])
    params = init_denoiser(meta['seed'], prompts, meta['latent_channels'], meta['hidden'])
    params.model.load_state_dict(load_state(path))
    params.model.eval()
    params.epochs = meta['epochs']
    params.loss = meta['loss']
    s = meta['schedule']
    return params, DiffusionSchedule.linear(s['t_max'], s['a_start'], s['a_end'])
