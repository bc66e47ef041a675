"""Conditional denoising diffusion over fixed-length state windows.

A window is an (H, state_dim) matrix with one anchor row (first or last) that
is never noised: forward noising resets it to the clean value and the reverse
sampler re-clamps it after every step, so the anchor survives bit-exactly.
Conditioning is a two-slot vector (normalized window return, is-null bit);
the null condition zeroes the return slot and sets the bit. Guidance combines
conditional and unconditional noise predictions as a convex combination
omega * cond + (1 - omega) * uncond, with an opt-in extrapolating variant
(1 + omega) * cond - omega * uncond.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import NormStats

logger = logging.getLogger(__name__)

COND_DIM = 2  # (normalized return, is-null bit)


class SamplerError(RuntimeError):
    """Raised when the reverse chain produces non-finite values."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule beta_1..beta_K with cached cumulative products.

    alpha_bar has K+1 entries; alpha_bar[k] is the product over the first k
    alphas with alpha_bar[0] = 1, matching step indices k = 1..K.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError(f"betas must be a non-empty 1-D array, got shape {betas.shape}")
        if np.any(betas < 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def n_steps(self) -> int:
        return self.betas.size


def linear_schedule(
    n_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.08
) -> NoiseSchedule:
    """Linearly spaced betas. The default endpoint is chosen so the terminal
    signal fraction alpha_bar[K] stays below 0.05 at K=100."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, n_steps))


@dataclass
class StateWindow:
    """H consecutive states with a clamped anchor row at index 0 or H-1."""

    states: np.ndarray
    anchor_pos: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ValueError(f"states must be (H, dim), got shape {self.states.shape}")
        h = self.states.shape[0]
        if self.anchor_pos not in (0, h - 1):
            raise ValueError(f"anchor_pos must be 0 or {h - 1}, got {self.anchor_pos}")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def anchor(self) -> np.ndarray:
        return self.states[self.anchor_pos]


@dataclass(frozen=True)
class GenCondition:
    """Conditioning record for one sampled window."""

    anchor: np.ndarray
    target_return: float  # normalized to [-1, 1]
    direction: str  # "forward" or "backward"
    omega: float = 0.8
    null: bool = False

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64))
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward/backward, got {self.direction!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")


def cond_vector(target_return: float | np.ndarray, null: bool | np.ndarray) -> np.ndarray:
    """Two-slot condition rows: (return, 0) normally, (0, 1) when dropped."""
    r = np.atleast_1d(np.asarray(target_return, dtype=np.float64))
    n = np.atleast_1d(np.asarray(null, dtype=bool))
    r, n = np.broadcast_arrays(r, n)
    out = np.zeros((r.size, COND_DIM))
    out[:, 0] = np.where(n, 0.0, r)
    out[:, 1] = np.where(n, 1.0, 0.0)
    return out


def sinusoidal_embedding(k: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos embedding of integer step indices."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class Denoiser:
    """MLP noise predictor over flattened windows.

    Input layout: flat window (H * state_dim) | sinusoidal step embedding |
    condition slot. Output: predicted noise for every window entry.
    """

    mlp: nn.MlpParams
    horizon: int
    state_dim: int
    k_embed_dim: int = 32

    @property
    def window_size(self) -> int:
        return self.horizon * self.state_dim

    def encode(self, x: np.ndarray, k: np.ndarray, cond: np.ndarray) -> np.ndarray:
        b = x.shape[0]
        flat = x.reshape(b, self.window_size)
        emb = sinusoidal_embedding(k, self.k_embed_dim)
        return np.concatenate([flat, emb, cond], axis=1)

    def predict(self, x: np.ndarray, k: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """x: (B, H, dim); k: (B,) step indices; cond: (B, 2) -> noise (B, H, dim)."""
        out = nn.forward(self.mlp, self.encode(x, k, cond))
        return out.reshape(x.shape)


def make_denoiser(
    horizon: int,
    state_dim: int,
    hidden: tuple[int, ...] = (128, 128),
    k_embed_dim: int = 32,
    seed: int = 0,
) -> Denoiser:
    in_dim = horizon * state_dim + k_embed_dim + COND_DIM
    sizes = [in_dim, *hidden, horizon * state_dim]
    return Denoiser(nn.init_mlp(sizes, seed=seed), horizon, state_dim, k_embed_dim)


def _check_window_batch(x0: np.ndarray, anchor_pos: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3:
        raise ValueError(f"expected (batch, H, dim) windows, got shape {x0.shape}")
    h = x0.shape[1]
    if anchor_pos not in (0, h - 1):
        raise ValueError(f"anchor_pos must be 0 or {h - 1}, got {anchor_pos}")
    return x0


def noise_forward(
    schedule: NoiseSchedule,
    x0: np.ndarray,
    k: int | np.ndarray,
    eps: np.ndarray,
    anchor_pos: int,
) -> np.ndarray:
    """Closed-form noising sqrt(ab_k) x0 + sqrt(1 - ab_k) eps; anchor row kept clean."""
    x0 = _check_window_batch(x0, anchor_pos)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match windows {x0.shape}")
    k_arr = np.atleast_1d(np.asarray(k))
    if np.any(k_arr < 1) or np.any(k_arr > schedule.n_steps):
        raise ValueError(f"step index must be in 1..{schedule.n_steps}")
    ab = schedule.alpha_bar[k_arr][:, None, None]
    xk = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    xk[:, anchor_pos, :] = x0[:, anchor_pos, :]
    return xk


@dataclass
class LossDraws:
    """Per-sample randomness of one training loss evaluation, drawn up front
    so the loss is a deterministic function of (params, draws)."""

    k: np.ndarray  # (B,) ints in 1..K
    eps: np.ndarray  # (B, H, dim)
    null_mask: np.ndarray  # (B,) bool


def sample_loss_draws(
    schedule: NoiseSchedule,
    batch_shape: tuple[int, int, int],
    p_null: float,
    rng: np.random.Generator,
) -> LossDraws:
    if not 0.0 <= p_null <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p_null}")
    b = batch_shape[0]
    k = rng.integers(1, schedule.n_steps + 1, size=b)
    eps = rng.standard_normal(batch_shape)
    null_mask = rng.random(b) < p_null
    return LossDraws(k=k, eps=eps, null_mask=null_mask)


def denoise_loss_from_draws(
    den: Denoiser,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    returns_norm: np.ndarray,
    anchor_pos: int,
    draws: LossDraws,
) -> tuple[float, nn.MlpGrads]:
    """Noise-prediction loss for fixed draws: mean over the batch of the
    squared error summed over non-anchor window entries."""
    x0 = _check_window_batch(x0, anchor_pos)
    b = x0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    xk = noise_forward(schedule, x0, draws.k, draws.eps, anchor_pos)
    cond = cond_vector(np.asarray(returns_norm, dtype=np.float64), draws.null_mask)
    encoded = den.encode(xk, draws.k, cond)
    pred = nn.forward(den.mlp, encoded).reshape(x0.shape)
    residual = pred - draws.eps
    residual[:, anchor_pos, :] = 0.0  # anchor rows carry no noise target
    loss = float(np.sum(residual**2) / b)
    upstream = (2.0 / b) * residual.reshape(b, -1)
    grads = nn.backward(den.mlp, encoded, upstream)
    return loss, grads


def denoise_loss(
    den: Denoiser,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    returns_norm: np.ndarray,
    anchor_pos: int,
    p_null: float,
    rng: np.random.Generator,
) -> tuple[float, nn.MlpGrads]:
    """Draw (k, eps, dropout) per sample, then score the noise prediction."""
    x0 = _check_window_batch(x0, anchor_pos)
    draws = sample_loss_draws(schedule, x0.shape, p_null, rng)
    return denoise_loss_from_draws(den, schedule, x0, returns_norm, anchor_pos, draws)


def cfg_noise(
    den: Denoiser,
    x: np.ndarray,
    k: np.ndarray,
    returns_norm: np.ndarray,
    omega: float,
    extrapolate: bool = False,
) -> np.ndarray:
    """Guided noise estimate. omega=0 and omega=1 return the pure
    unconditional / conditional branches without arithmetic on the other."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    r = np.atleast_1d(np.asarray(returns_norm, dtype=np.float64))
    if not extrapolate and omega == 0.0:
        return den.predict(x, k, cond_vector(r, True))
    if omega == 1.0 and not extrapolate:
        return den.predict(x, k, cond_vector(r, False))
    eps_c = den.predict(x, k, cond_vector(r, False))
    if extrapolate and omega == 0.0:
        return eps_c
    eps_u = den.predict(x, k, cond_vector(r, True))
    if extrapolate:
        return (1.0 + omega) * eps_c - omega * eps_u
    return omega * eps_c + (1.0 - omega) * eps_u


def _stacked_normal(
    rngs, shape: tuple[int, ...], batch: int
) -> np.ndarray:
    """Draw one (batch, *shape) normal block from a shared rng or per-row rngs."""
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal((batch, *shape))
    if len(rngs) != batch:
        raise ValueError(f"{len(rngs)} rng streams for batch of {batch}")
    return np.stack([r.standard_normal(shape) for r in rngs])


def sample_batch(
    den: Denoiser,
    schedule: NoiseSchedule,
    anchors: np.ndarray,
    returns_norm: np.ndarray,
    anchor_pos: int,
    omega: float,
    rngs,
    stats: NormStats,
    extrapolate: bool = False,
) -> np.ndarray:
    """Reverse-diffuse a batch of windows around raw anchor states.

    anchors: (B, dim) in raw units. Returns (B, H, dim) raw windows whose
    anchor rows equal the anchors bit-exactly. rngs is one Generator shared
    across rows or a list of per-row Generators.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    b = anchors.shape[0]
    r = np.broadcast_to(np.atleast_1d(np.asarray(returns_norm, dtype=np.float64)), (b,))
    anchors_norm = stats.norm_state(anchors)
    shape = (den.horizon, den.state_dim)

    x = _stacked_normal(rngs, shape, b)
    x[:, anchor_pos, :] = anchors_norm
    for k in range(schedule.n_steps, 0, -1):
        beta = schedule.betas[k - 1]
        ab_k = schedule.alpha_bar[k]
        k_arr = np.full(b, k)
        eps_hat = cfg_noise(den, x, k_arr, r, omega, extrapolate)
        mean = (x - beta / np.sqrt(1.0 - ab_k) * eps_hat) / np.sqrt(1.0 - beta)
        if k > 1:
            x = mean + np.sqrt(beta) * _stacked_normal(rngs, shape, b)
        else:
            x = mean
        x[:, anchor_pos, :] = anchors_norm
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite window values at reverse step k={k}")
    out = stats.denorm_state(x)
    out[:, anchor_pos, :] = anchors
    return out


def sample(
    den: Denoiser,
    schedule: NoiseSchedule,
    cond: GenCondition,
    rng: np.random.Generator,
    stats: NormStats,
    extrapolate: bool = False,
) -> StateWindow:
    """Sample one window; the anchor sits at row 0 for forward conditions and
    at row H-1 for backward ones."""
    anchor_pos = 0 if cond.direction == "forward" else den.horizon - 1
    target = 0.0 if cond.null else cond.target_return
    omega = 0.0 if cond.null else cond.omega
    out = sample_batch(
        den, schedule, cond.anchor[None, :], np.array([target]), anchor_pos,
        omega, rng, stats, extrapolate,
    )
    return StateWindow(out[0], anchor_pos)
