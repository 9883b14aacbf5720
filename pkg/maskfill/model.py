import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

CONDITION_KINDS = ("class-label", "caption-template", "null")


@dataclass(frozen=True)
class Condition:
    """Text conditioning: a vocabulary token plus the prompt it came from.

    Token 0 is reserved for the null condition used by classifier-free guidance.
    """

    kind: str
    token_id: int
    prompt_text: str = ""

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"kind: must be one of {CONDITION_KINDS}, got {self.kind!r}")
        if self.kind == "null" and self.token_id != 0:
            raise ValueError("token_id: the null condition uses token 0")
        if self.kind != "null" and self.token_id < 1:
            raise ValueError(f"token_id: vocabulary tokens start at 1, got {self.token_id}")


def null_condition() -> Condition:
    return Condition("null", 0, "")


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 3
    resolution: int = 32
    base_width: int = 48
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    attention_resolutions: Tuple[int, ...] = (8,)
    embed_dim: int = 128
    vocab_size: int = 36
    num_levels: int = 4
    num_timesteps: int = 200
    num_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(self, "attention_resolutions", tuple(int(r) for r in self.attention_resolutions))
        if not self.channel_mults:
            raise ConfigError("model.channel_mults: needs at least one level")
        downsamples = len(self.channel_mults) - 1
        if self.resolution % (2**downsamples) != 0:
            raise ConfigError(
                f"model.resolution: {self.resolution} is not divisible by 2^{downsamples} (number of down levels)"
            )
        for mult in self.channel_mults:
            if (self.base_width * mult) % self.num_groups != 0:
                raise ConfigError(
                    f"model.base_width: width {self.base_width * mult} not divisible by num_groups {self.num_groups}"
                )
        if self.embed_dim % 2 != 0:
            raise ConfigError(f"model.embed_dim: must be even, got {self.embed_dim}")
        if self.vocab_size < 2:
            raise ConfigError(f"model.vocab_size: must include the null token and one more, got {self.vocab_size}")
        if self.num_levels < 1:
            raise ConfigError(f"model.num_levels: must be >= 1, got {self.num_levels}")
        if self.num_timesteps < 1:
            raise ConfigError(f"model.num_timesteps: must be >= 1, got {self.num_timesteps}")


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor  # (B, C, H, W)
    mask_logits: torch.Tensor  # (B, 1, H, W)


def predict_mask_prob(out: DenoiserOutput) -> torch.Tensor:
    """Instance mask probabilities from the extra output channel"""
    return torch.sigmoid(out.mask_logits)


def sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer style sinusoidal embedding of integer steps, (B,) -> (B, dim)"""
    half = dim // 2
    factor = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=steps.device) / half)
    angles = steps.to(torch.float64)[:, None] * factor[None]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TokenConditionEncoder(nn.Module):
    """Learned embedding table over the closed prompt vocabulary.

    Any module mapping (B,) token ids to (B, embed_dim) vectors can be passed to the
    denoiser instead, e.g. a frozen text encoder with a projection head.
    """

    def __init__(self, vocab_size: int, embed_dim: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, embed_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.table(tokens)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, embed_dim: int, num_groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(embed_dim, ch_out)
        self.norm2 = nn.GroupNorm(num_groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single head spatial self-attention"""

    def __init__(self, ch: int, num_groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(num_groups, ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class InpaintingUNet(nn.Module):
    """Noise predictor eps_theta(x_t, t, m_s, c, s) with an extra instance-mask logit channel.

    The (precision) mask is concatenated to x_t as one input channel. Timestep, precision level
    and condition each produce an embedding; their sum modulates every residual block.
    """

    def __init__(self, config: DenoiserConfig, cond_encoder: Optional[nn.Module] = None):
        super().__init__()
        self.config = config
        cfg = config
        widths = [cfg.base_width * m for m in cfg.channel_mults]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim * 4),
            nn.SiLU(),
            nn.Linear(cfg.embed_dim * 4, cfg.embed_dim),
        )
        self.level_embedding = nn.Embedding(cfg.num_levels + 1, cfg.embed_dim)
        self.cond_encoder = (
            cond_encoder if cond_encoder is not None else TokenConditionEncoder(cfg.vocab_size, cfg.embed_dim)
        )

        self.in_conv = nn.Conv2d(cfg.image_channels + 1, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        res = cfg.resolution
        for level, width in enumerate(widths):
            self.down_blocks.append(ResBlock(ch, width, cfg.embed_dim, cfg.num_groups))
            self.down_attn.append(self._attention(width, res))
            ch = width
            if level < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                res //= 2

        self.mid_block1 = ResBlock(ch, ch, cfg.embed_dim, cfg.num_groups)
        self.mid_attn = AttentionBlock(ch, cfg.num_groups)
        self.mid_block2 = ResBlock(ch, ch, cfg.embed_dim, cfg.num_groups)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            self.up_blocks.append(ResBlock(ch + width, width, cfg.embed_dim, cfg.num_groups))
            self.up_attn.append(self._attention(width, res))
            ch = width
            if level > 0:
                self.upsamples.append(nn.Conv2d(ch, widths[level - 1], 3, padding=1))
                ch = widths[level - 1]
                res *= 2

        self.out_norm = nn.GroupNorm(cfg.num_groups, ch)
        # image channels of predicted noise + one mask logit channel
        self.out_conv = nn.Conv2d(ch, cfg.image_channels + 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _attention(self, ch: int, res: int) -> nn.Module:
        if res in self.config.attention_resolutions:
            return AttentionBlock(ch, self.config.num_groups)
        return nn.Identity()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, t: torch.Tensor, tokens: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        dtype = self.in_conv.weight.dtype
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.config.embed_dim).to(dtype))
        return t_emb + self.level_embedding(s) + self.cond_encoder(tokens)

    def _check_inputs(self, x_t: torch.Tensor, mask: torch.Tensor, t: torch.Tensor, tokens, s) -> None:
        cfg = self.config
        expected = (cfg.image_channels, cfg.resolution, cfg.resolution)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"x_t: expected shape (B, *{expected}), got {tuple(x_t.shape)}")
        batch = x_t.shape[0]
        mask_shape = (batch, 1, cfg.resolution, cfg.resolution)
        if tuple(mask.shape) != mask_shape:
            raise ValueError(f"m_s: expected shape {mask_shape}, got {tuple(mask.shape)}")
        for name, value, low, high in (
            ("t", t, 1, cfg.num_timesteps),
            ("s", s, 0, cfg.num_levels),
            ("c", tokens, 0, cfg.vocab_size - 1),
        ):
            if tuple(value.shape) != (batch,):
                raise ValueError(f"{name}: expected shape ({batch},), got {tuple(value.shape)}")
            if int(value.min()) < low or int(value.max()) > high:
                raise ValueError(f"{name}: values must lie in [{low}, {high}]")

    def forward(
        self,
        x_t: torch.Tensor,
        mask: torch.Tensor,
        t: torch.Tensor,
        c: Union[torch.Tensor, Sequence[Condition]],
        s: torch.Tensor,
    ) -> DenoiserOutput:
        """Predict noise and instance mask logits

        Parameters
        ----------
        x_t : torch.Tensor
            (B, C, H, W) noisy composite
        mask : torch.Tensor
            (B, 1, H, W) precision mask m_s
        t : torch.Tensor
            (B,) 1-based timesteps
        c : Union[torch.Tensor, Sequence[Condition]]
            (B,) condition tokens, or the Condition objects themselves
        s : torch.Tensor
            (B,) precision levels

        Returns
        -------
        DenoiserOutput
            predicted noise and mask logits
        """
        device = x_t.device
        tokens = condition_tokens(c, device) if not isinstance(c, torch.Tensor) else c.to(device)
        t = torch.as_tensor(t, device=device).long()
        s = torch.as_tensor(s, device=device).long()
        self._check_inputs(x_t, mask, t, tokens, s)

        emb = self.embed(t, tokens, s)
        h = self.in_conv(torch.cat([x_t, mask.to(x_t.dtype)], dim=1))

        skips: List[torch.Tensor] = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, emb)
            h = self.down_attn[level](h)
            skips.append(h)
            if level < len(self.downsamples):
                h = self.downsamples[level](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)

        for n, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            h = self.up_attn[n](h)
            if n < len(self.upsamples):
                h = self.upsamples[n](F.interpolate(h, scale_factor=2, mode="nearest"))

        out = self.out_conv(F.silu(self.out_norm(h)))
        channels = self.config.image_channels
        return DenoiserOutput(eps_hat=out[:, :channels], mask_logits=out[:, channels:])


def condition_tokens(conditions: Sequence[Condition], device: Optional[torch.device] = None) -> torch.Tensor:
    return torch.tensor([c.token_id for c in conditions], dtype=torch.long, device=device)
