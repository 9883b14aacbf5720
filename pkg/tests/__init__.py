import numpy as np
import torch
import torch.nn as nn
from pytest import fixture

from maskfill.maskops import LadderConfig
from maskfill.model import DenoiserConfig, DenoiserOutput
from maskfill.schedule import ScheduleConfig
from maskfill.shapesdata import DatasetSpec, ShapesDataset, Vocabulary, generate_sample, sample_rng

# small enough for unit tests on a CPU
TINY_RESOLUTION = 16
TINY_TIMESTEPS = 20


def tiny_spec(num_samples: int = 24, seed: int = 0) -> DatasetSpec:
    return DatasetSpec(resolution=TINY_RESOLUTION, size_range=(6, 10), margin=2, num_samples=num_samples, seed=seed)


def tiny_model_config(**kwargs) -> DenoiserConfig:
    values = dict(
        resolution=TINY_RESOLUTION,
        base_width=16,
        channel_mults=(1, 2),
        attention_resolutions=(8,),
        embed_dim=32,
        vocab_size=36,
        num_levels=4,
        num_timesteps=TINY_TIMESTEPS,
        num_groups=4,
    )
    values.update(kwargs)
    return DenoiserConfig(**values)


def tiny_schedule_config() -> ScheduleConfig:
    return ScheduleConfig(num_timesteps=TINY_TIMESTEPS, beta_start=1e-3, beta_end=0.2)


class StubDenoiser(nn.Module):
    """Elementwise stand-in for the denoiser with hand-set outputs.

    eps_hat = scale * x_t + token_weight * c, mask logits = logit_value inside the center
    half of the frame and -logit_value elsewhere.
    """

    def __init__(self, scale: float = 0.1, token_weight: float = 0.05, logit_value: float = 4.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(scale), requires_grad=False)
        self.token_weight = token_weight
        self.logit_value = logit_value
        self.calls = 0

    def forward(self, x_t, mask, t, c, s):
        self.calls += 1
        c = torch.as_tensor(c, device=x_t.device).to(x_t.dtype)
        eps = self.scale * x_t + self.token_weight * c[:, None, None, None]
        h, w = mask.shape[-2:]
        center = torch.zeros_like(mask, dtype=torch.bool)
        center[..., h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = True
        logits = torch.full(mask.shape, -self.logit_value, dtype=x_t.dtype, device=x_t.device)
        logits[center] = self.logit_value
        return DenoiserOutput(eps_hat=eps, mask_logits=logits)


# fixture for a small in-memory shapes dataset
@fixture(scope="session")
def tiny_dataset():
    spec = tiny_spec()
    vocab = Vocabulary.from_spec(spec)
    samples = [generate_sample(spec, sample_rng(spec.seed, idx), vocab) for idx in range(spec.num_samples)]
    return ShapesDataset(samples, vocab)


# fixture for the ladder matching the tiny resolution
@fixture(scope="session")
def tiny_ladder():
    return LadderConfig.for_resolution(TINY_RESOLUTION)


# fixture for a random source image and a box mask
@fixture
def image_and_box():
    rng = np.random.default_rng(3)
    x0 = torch.from_numpy(rng.uniform(-1, 1, size=(3, TINY_RESOLUTION, TINY_RESOLUTION)).astype(np.float32))
    mask = np.zeros((TINY_RESOLUTION, TINY_RESOLUTION), dtype=bool)
    mask[3:13, 2:12] = True
    return x0, mask
