"""Background-preserving guided inpainting sampler.

Each reverse step denoises the latent inside the active mask and re-noises the source image
outside of it, so pixels outside the final active mask are copied from the source exactly.
After ``mask_switch_step`` steps the active mask becomes the denoiser's own object prediction
(intersected with the input mask) and is re-estimated on every later step. The denoiser keeps
seeing the input mask and its precision level for the whole run.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch
from tqdm import tqdm

from .errors import ConfigError, NonFiniteError
from .model import Condition
from .schedule import NoiseSchedule, _check_binary, ddim_step, ddpm_step, q_sample

SAMPLER_KINDS = ("ancestral", "deterministic-skip")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    guidance_scale: float = 3.0
    sampler: str = "deterministic-skip"
    mask_switch_step: int = 10
    mask_switch_threshold: float = 0.5
    seed: int = 0
    trace: bool = False
    trace_every: int = 5

    def __post_init__(self):
        try:
            _validate_sampling(self.steps, self.guidance_scale, self.sampler, self.mask_switch_step)
        except ValueError as e:
            raise ConfigError(f"sample.{e}") from None
        if not 0.0 < self.mask_switch_threshold < 1.0:
            raise ConfigError(f"sample.mask_switch_threshold: must lie in (0, 1), got {self.mask_switch_threshold}")
        if self.trace_every < 1:
            raise ConfigError(f"sample.trace_every: must be >= 1, got {self.trace_every}")


def _validate_sampling(steps: int, guidance_scale: float, kind: str, mask_switch_step: int) -> None:
    if steps < 1:
        raise ValueError(f"steps: must be >= 1, got {steps}")
    if guidance_scale < 0:
        raise ValueError(f"guidance_scale: must be >= 0, got {guidance_scale}")
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"sampler: must be one of {SAMPLER_KINDS}, got {kind!r}")
    if not 0 <= mask_switch_step <= steps:
        raise ValueError(f"mask_switch_step: must lie in [0, {steps}], got {mask_switch_step}")


@dataclass
class SampleRequest:
    """One inpainting job.

    x0 is a (C, H, W) image in [-1, 1], mask the (H, W) input mask m_s of precision level s.
    mask_switch_step = 0 disables the predicted-mask switch.
    """

    x0: torch.Tensor
    mask: npt.NDArray[np.bool_]
    s: int
    condition: Condition
    steps: int = 50
    guidance_scale: float = 3.0
    sampler: str = "deterministic-skip"
    mask_switch_step: int = 10
    mask_switch_threshold: float = 0.5
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        _validate_sampling(self.steps, self.guidance_scale, self.sampler, self.mask_switch_step)
        self.mask = np.asarray(self.mask)
        if self.x0.ndim != 3:
            raise ValueError(f"x0: expected shape (C, H, W), got {tuple(self.x0.shape)}")
        if self.mask.shape != tuple(self.x0.shape[1:]):
            raise ValueError(f"mask: shape {self.mask.shape} does not match image {tuple(self.x0.shape[1:])}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask: values must be exactly 0 or 1")
        self.mask = self.mask.astype(np.bool_)
        if not self.mask.any():
            raise ValueError("mask: the input mask is empty")
        if self.s < 0:
            raise ValueError(f"s: must be >= 0, got {self.s}")

    @classmethod
    def from_config(
        cls, x0: torch.Tensor, mask: npt.ArrayLike, s: int, condition: Condition, cfg: SampleConfig, **overrides
    ) -> "SampleRequest":
        values = dict(
            steps=cfg.steps,
            guidance_scale=cfg.guidance_scale,
            sampler=cfg.sampler,
            mask_switch_step=cfg.mask_switch_step,
            mask_switch_threshold=cfg.mask_switch_threshold,
            seed=cfg.seed,
            trace=cfg.trace,
        )
        values.update(overrides)
        return cls(x0=x0, mask=mask, s=s, condition=condition, **values)


@dataclass
class SampleResult:
    image: torch.Tensor  # (C, H, W), equals x0 outside active_mask
    active_mask: npt.NDArray[np.bool_]  # (H, W)
    trace: Optional[List[npt.NDArray[np.float64]]] = field(default=None, repr=False)
    seed: int = 0
    sampler: str = "deterministic-skip"
    timesteps: Tuple[int, ...] = ()
    switched: bool = False


@dataclass
class GuidedPrediction:
    eps: torch.Tensor
    mask_logits: torch.Tensor  # from the conditional pass


def timestep_pairs(T: int, steps: int) -> List[Tuple[int, int]]:
    """Evenly spaced (t, t_prev) pairs from T down to 0

    Parameters
    ----------
    T : int
        number of diffusion steps of the schedule
    steps : int
        number of sampling steps, 1 <= steps <= T

    Returns
    -------
    List[Tuple[int, int]]
        steps pairs with strictly decreasing t, ending at t_prev = 0
    """
    if not 1 <= steps <= T:
        raise ValueError(f"steps: must lie in [1, {T}], got {steps}")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [(int(a), int(b)) for a, b in zip(grid[:-1], grid[1:])]


def _randn(like: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    # drawn on the CPU so a seed gives the same noise on every device
    return torch.randn(like.shape, generator=generator, dtype=like.dtype).to(like.device)


def init_latent(x0: torch.Tensor, m: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """x_T = eps * m + x0 * (1 - m), computed as a select so x0 is copied exactly outside m

    Parameters
    ----------
    x0 : torch.Tensor
        (B, C, H, W) source images
    m : torch.Tensor
        (B, 1, H, W) binary masks
    generator : torch.Generator
        CPU noise generator

    Returns
    -------
    torch.Tensor
        initial latent
    """
    _check_binary(m)
    if m.shape[0] != x0.shape[0] or m.shape[-2:] != x0.shape[-2:]:
        raise ValueError(f"m: shape {tuple(m.shape)} does not match x0 {tuple(x0.shape)}")
    noise = _randn(x0, generator)
    return torch.where(m.bool(), noise, x0)


@torch.no_grad()
def guided_eps(
    model: torch.nn.Module,
    x_t: torch.Tensor,
    m: torch.Tensor,
    t: int,
    c: torch.Tensor,
    s: torch.Tensor,
    w: float,
) -> GuidedPrediction:
    """Classifier-free guided noise eps_null + w (eps_c - eps_null)

    The conditional and null passes share one forward call. w = 1 skips the null pass and
    returns the conditional prediction as is; w = 0 returns the null prediction as is.

    Parameters
    ----------
    model : torch.nn.Module
        denoiser returning a DenoiserOutput
    x_t : torch.Tensor
        (B, C, H, W) latent
    m : torch.Tensor
        (B, 1, H, W) input mask
    t : int
        1-based timestep
    c : torch.Tensor
        (B,) condition tokens
    s : torch.Tensor
        (B,) precision levels
    w : float
        guidance scale >= 0

    Returns
    -------
    GuidedPrediction
        guided noise and the conditional mask logits
    """
    if w < 0:
        raise ValueError(f"w: guidance scale must be >= 0, got {w}")
    batch = x_t.shape[0]
    t_vec = torch.full((batch,), int(t), dtype=torch.long, device=x_t.device)
    c = c.to(x_t.device)
    s = s.to(x_t.device)
    if w == 1:
        out = model(x_t, m, t_vec, c, s)
        return GuidedPrediction(eps=out.eps_hat, mask_logits=out.mask_logits)

    out = model(
        torch.cat([x_t, x_t]),
        torch.cat([m, m]),
        torch.cat([t_vec, t_vec]),
        torch.cat([c, torch.zeros_like(c)]),
        torch.cat([s, s]),
    )
    eps_c, eps_null = out.eps_hat[:batch], out.eps_hat[batch:]
    logits = out.mask_logits[:batch]
    if w == 0:
        return GuidedPrediction(eps=eps_null, mask_logits=logits)
    return GuidedPrediction(eps=eps_null + w * (eps_c - eps_null), mask_logits=logits)


def blended_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    active_mask: torch.Tensor,
    t: int,
    t_prev: int,
    x0: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator,
    kind: str = "deterministic-skip",
) -> torch.Tensor:
    """Reverse step inside the active mask, forward-noised source outside

    Parameters
    ----------
    x_t : torch.Tensor
        (B, C, H, W) current latent
    eps_hat : torch.Tensor
        predicted noise
    active_mask : torch.Tensor
        (B, 1, H, W) binary mask of the region being generated
    t : int
        current 1-based step
    t_prev : int
        target step, 0 <= t_prev < t
    x0 : torch.Tensor
        source images
    sched : NoiseSchedule
        noise schedule
    generator : torch.Generator
        CPU noise generator
    kind : str, optional
        "ancestral" or "deterministic-skip", by default "deterministic-skip"

    Returns
    -------
    torch.Tensor
        x_{t_prev}; equals x0 outside the active mask when t_prev = 0
    """
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"kind: must be one of {SAMPLER_KINDS}, got {kind!r}")
    _check_binary(active_mask, "active_mask")

    if kind == "ancestral" and t_prev == t - 1:
        noise = _randn(x_t, generator) if t > 1 else None
        inner = ddpm_step(x_t, eps_hat, t, sched, noise=noise)
    elif kind == "ancestral":
        inner = ddim_step(x_t, eps_hat, t, t_prev, sched, eta=1.0, noise=_randn(x_t, generator))
    else:
        inner = ddim_step(x_t, eps_hat, t, t_prev, sched, eta=0.0)

    if t_prev == 0:
        outside = x0
    else:
        outside = q_sample(x0, t_prev, _randn(x0, generator), sched)
    return torch.where(active_mask.bool(), inner, outside)


def switch_mask(
    mask_logits: torch.Tensor, input_mask: torch.Tensor, threshold: float = 0.5
) -> Tuple[torch.Tensor, bool]:
    """Predicted object mask restricted to the input mask

    Parameters
    ----------
    mask_logits : torch.Tensor
        (B, 1, H, W) mask head logits
    input_mask : torch.Tensor
        (B, 1, H, W) binary input mask m_s
    threshold : float, optional
        probability threshold, by default 0.5

    Returns
    -------
    Tuple[torch.Tensor, bool]
        bool mask and whether the input mask was used as a fallback for an empty prediction
    """
    predicted = (torch.sigmoid(mask_logits.double()) > threshold) & input_mask.bool()
    empty = predicted.flatten(1).sum(dim=1) == 0
    if bool(empty.any()):
        predicted = torch.where(empty[:, None, None, None], input_mask.bool(), predicted)
        return predicted, True
    return predicted, False


@torch.no_grad()
def sample_inpaint(
    model: torch.nn.Module,
    req: SampleRequest,
    sched: NoiseSchedule,
    device: Optional[Union[str, torch.device]] = None,
    progress: bool = False,
) -> SampleResult:
    """Inpaint the masked region of a source image

    Parameters
    ----------
    model : torch.nn.Module
        frozen denoiser
    req : SampleRequest
        inpainting job
    sched : NoiseSchedule
        schedule the denoiser was trained with
    device : Union[str, torch.device], optional
        device to run on, by default the model's device
    progress : bool, optional
        show a progress bar, by default False

    Returns
    -------
    SampleResult
        output image, final active mask and optional per-step mask probabilities
    """
    if device is None:
        device = next(iter(model.parameters()), torch.empty(0)).device
    dtype = next(iter(model.parameters()), torch.empty(0, dtype=req.x0.dtype)).dtype
    pairs = timestep_pairs(sched.T, req.steps)
    generator = torch.Generator().manual_seed(int(req.seed))

    x0 = req.x0[None].to(device=device, dtype=dtype)
    m_s = torch.from_numpy(req.mask)[None, None].to(device)
    tokens = torch.tensor([req.condition.token_id], dtype=torch.long, device=device)
    levels = torch.tensor([req.s], dtype=torch.long, device=device)

    active = m_s
    switched = False
    trace: List[npt.NDArray[np.float64]] = []
    x = init_latent(x0, m_s, generator)
    for i, (t, t_prev) in enumerate(tqdm(pairs, disable=not progress, desc="sample")):
        pred = guided_eps(model, x, m_s, t, tokens, levels, req.guidance_scale)
        if req.trace:
            trace.append(torch.sigmoid(pred.mask_logits.double())[0, 0].cpu().numpy())
        if 0 < req.mask_switch_step <= i:
            active, fallback = switch_mask(pred.mask_logits, m_s, req.mask_switch_threshold)
            if fallback:
                logging.warning(f"Empty predicted mask at sampling step {i}, keeping the input mask")
            switched = True
        x = blended_step(x, pred.eps, active, t, t_prev, x0, sched, generator, req.sampler)
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteError(f"non-finite latent at sampling step {i} (t={t})", {"step": i, "t": t})

    image = torch.where(active, x, x0)[0].cpu()
    return SampleResult(
        image=image,
        active_mask=active[0, 0].cpu().numpy(),
        trace=trace if req.trace else None,
        seed=req.seed,
        sampler=req.sampler,
        timesteps=tuple(t for t, _ in pairs),
        switched=switched,
    )


def sample_many(
    model: torch.nn.Module,
    requests: Sequence[SampleRequest],
    sched: NoiseSchedule,
    device: Optional[Union[str, torch.device]] = None,
    progress: bool = True,
) -> List[SampleResult]:
    """Run a list of requests one after the other"""
    results = []
    for req in tqdm(requests, disable=not progress, desc="requests"):
        results.append(sample_inpaint(model, req, sched, device=device))
    return results
