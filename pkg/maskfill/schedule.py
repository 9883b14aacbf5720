"""Noise schedules and the closed-form arithmetic of the diffusion process.

Timesteps are 1-based everywhere in the public API (``1 <= t <= T``); the tables are stored
zero-based and ``alpha_bar(0) := 1`` is used for terminal steps. All tensor functions follow the
dtype and device of their image argument, so float64 inputs give float64 math.
"""
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import numpy.typing as npt
import torch

from .errors import ConfigError

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    num_timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ConfigError(f"schedule.kind: must be 'linear' or 'cosine', got {self.kind!r}")
        if self.num_timesteps < 1:
            raise ConfigError(f"schedule.num_timesteps: must be >= 1, got {self.num_timesteps}")

    def build(self) -> "NoiseSchedule":
        if self.kind == "cosine":
            return make_cosine_schedule(self.num_timesteps)
        return make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """beta/alpha tables of a discrete diffusion process (float64, read-only)."""

    betas: npt.NDArray[np.float64]
    alphas: npt.NDArray[np.float64]
    alpha_bars: npt.NDArray[np.float64]
    posterior_variances: npt.NDArray[np.float64]

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-based step t, with alpha_bar(0) = 1"""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_betas(cls, betas: npt.NDArray) -> "NoiseSchedule":
        """Derive every table from a beta array

        Parameters
        ----------
        betas : npt.NDArray
            variances beta_1..beta_T, each in (0, 1)

        Returns
        -------
        NoiseSchedule
            immutable schedule
        """
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.shape[0] < 1:
            raise ConfigError("betas: must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas: every value must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_variances = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        for arr in (betas, alphas, alpha_bars, posterior_variances):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars, posterior_variances)

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls.from_betas(np.asarray(data["betas"], dtype=np.float64))


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive.

    Parameters
    ----------
    T : int
        number of diffusion steps
    beta_start : float
        beta_1
    beta_end : float
        beta_T

    Returns
    -------
    NoiseSchedule
        schedule with T entries
    """
    if T < 1:
        raise ConfigError(f"T: must be >= 1, got {T}")
    if not 0 < beta_start < 1:
        raise ConfigError(f"beta_start: must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ConfigError(f"beta_end: must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ConfigError(f"beta_start: must be <= beta_end ({beta_start} > {beta_end})")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def make_cosine_schedule(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine alpha_bar schedule (alternative to the linear default)"""
    if T < 1:
        raise ConfigError(f"T: must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
    betas = np.clip(1 - f[1:] / f[:-1], 1e-8, max_beta)
    return NoiseSchedule.from_betas(betas)


def _check_t(t: Timestep, T: int, name: str = "t", allow_zero: bool = False) -> None:
    low = 0 if allow_zero else 1
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ValueError(f"{name}: empty timestep tensor")
        t_min, t_max = int(t.min()), int(t.max())
    else:
        t_min = t_max = int(t)
    if t_min < low or t_max > T:
        raise ValueError(f"{name}: must lie in [{low}, {T}], got [{t_min}, {t_max}]")


def _lookup(table: npt.NDArray, t: Timestep, like: torch.Tensor, zero_value: float) -> torch.Tensor:
    """Gather a 1-based schedule table at t and shape it to broadcast against `like`."""
    padded = torch.as_tensor(np.concatenate([[zero_value], table]), dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        values = padded[t.to(device=like.device, dtype=torch.long)]
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    return padded[int(t)]


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name_b}: shape {tuple(b.shape)} does not match {name_a} shape {tuple(a.shape)}")


def _check_binary(m: torch.Tensor, name: str = "m") -> None:
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError(f"{name}: mask values must be exactly 0 or 1")


def _spatial_mask(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast an (H, W) / (1, H, W) / (B, 1, H, W) mask against an image tensor as bool."""
    m = torch.as_tensor(m, device=like.device)
    if m.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"m: spatial shape {tuple(m.shape[-2:])} does not match image {tuple(like.shape[-2:])}")
    _check_binary(m)
    if m.ndim == 2:
        m = m.unsqueeze(0)
    if like.ndim == 4 and m.ndim == 3:
        m = m.unsqueeze(1)
    return torch.broadcast_to(m.bool(), like.shape)


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed form forward noising x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps

    Parameters
    ----------
    x0 : torch.Tensor
        clean image(s), (C, H, W) or (B, C, H, W)
    t : Timestep
        1-based step, an int or a (B,) tensor for batched input
    eps : torch.Tensor
        noise with the shape of x0
    sched : NoiseSchedule
        noise schedule

    Returns
    -------
    torch.Tensor
        x_t
    """
    _check_same_shape(x0, eps, "x0", "eps")
    _check_t(t, sched.T)
    alpha_bar = _lookup(sched.alpha_bars, t, x0, 1.0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def masked_q_sample(
    x0: torch.Tensor, m: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising restricted to a mask; pixels outside the mask are returned untouched.

    Parameters
    ----------
    x0 : torch.Tensor
        clean image(s)
    m : torch.Tensor
        binary mask broadcastable to the spatial shape of x0
    t : Timestep
        1-based step
    eps : torch.Tensor
        noise with the shape of x0
    sched : NoiseSchedule
        noise schedule

    Returns
    -------
    torch.Tensor
        noisy composite, bit-identical to x0 where m == 0
    """
    mask = _spatial_mask(m, x0)
    return torch.where(mask, q_sample(x0, t, eps, sched), x0)


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the closed form: x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)"""
    _check_same_shape(x_t, eps_hat, "x_t", "eps_hat")
    _check_t(t, sched.T)
    alpha_bar = _lookup(sched.alpha_bars, t, x_t, 1.0)
    return (x_t - torch.sqrt(1.0 - alpha_bar) * eps_hat) / torch.sqrt(alpha_bar)


def ddpm_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: Timestep,
    sched: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ancestral reverse step with the fixed posterior variance.

    x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * noise,
    sigma_t = sqrt(posterior variance), which is exactly 0 at t = 1.

    Parameters
    ----------
    x_t : torch.Tensor
        current latent
    eps_hat : torch.Tensor
        predicted noise
    t : Timestep
        1-based step
    sched : NoiseSchedule
        noise schedule
    noise : torch.Tensor, optional
        standard normal noise; ignored at t = 1, required otherwise

    Returns
    -------
    torch.Tensor
        x_{t-1}
    """
    _check_same_shape(x_t, eps_hat, "x_t", "eps_hat")
    _check_t(t, sched.T)
    alpha = _lookup(sched.alphas, t, x_t, 1.0)
    beta = _lookup(sched.betas, t, x_t, 0.0)
    alpha_bar = _lookup(sched.alpha_bars, t, x_t, 1.0)
    mean = (x_t - beta / torch.sqrt(1.0 - alpha_bar) * eps_hat) / torch.sqrt(alpha)

    final = bool(torch.all(torch.as_tensor(t) == 1))
    if final:
        return mean
    if noise is None:
        raise ValueError("noise: required for t > 1")
    _check_same_shape(x_t, noise, "x_t", "noise")
    sigma = torch.sqrt(_lookup(sched.posterior_variances, t, x_t, 0.0))
    return mean + sigma * noise


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Skip step through the predicted clean image.

    x_{t_prev} = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat + sigma noise,
    sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev).

    Parameters
    ----------
    x_t : torch.Tensor
        current latent
    eps_hat : torch.Tensor
        predicted noise
    t : int
        current 1-based step
    t_prev : int
        target step, 0 <= t_prev < t
    sched : NoiseSchedule
        noise schedule
    eta : float, optional
        stochasticity in [0, 1], by default 0.0 (deterministic)
    noise : torch.Tensor, optional
        standard normal noise, required when the resulting sigma is non-zero

    Returns
    -------
    torch.Tensor
        x_{t_prev}
    """
    if t_prev >= t:
        raise ValueError(f"t_prev: must be < t, got t_prev={t_prev}, t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta: must lie in [0, 1], got {eta}")
    _check_t(t, sched.T)
    _check_t(t_prev, sched.T, name="t_prev", allow_zero=True)

    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    x_prev = math.sqrt(ab_prev) * x0_hat + direction * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("noise: required when eta > 0")
        _check_same_shape(x_t, noise, "x_t", "noise")
        x_prev = x_prev + sigma * noise
    return x_prev
