"""Latent diffusion: schedule, conditional denoiser, guidance, sampler.

The denoiser is a small transformer over latent patches. The conditioning
latent (encoded source image, or zeros when there is none) is concatenated
to the noisy latent along channels, so the input has twice the latent
channel count. Timestep conditioning uses adaLN modulation whose
projections start at zero, and every block cross-attends (ungated) to the
encoded instruction sequence. The output head is also zero-initialized,
so a fresh model predicts exactly zero noise.

Guidance runs at two scales, one for the image condition and one for the
full multimodal condition:

    eps = eps(0,0) + s_img * (eps(img,0) - eps(0,0))
                   + s_mm  * (eps(img,cond) - eps(img,0))

``cfg_combine`` folds that into per-term coefficients and skips the terms
whose coefficient is zero, so degenerate scale settings reproduce a single
branch exactly rather than up to rounding.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn as nn

from .backbones import NonFinite, ShapeError


class StepOutOfRange(ValueError):
    """Timestep outside [0, T)."""


class NoiseSchedule:
    """Linear beta schedule with float64 coefficient tables."""

    def __init__(self, n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if n_steps <= 0:
            raise ValueError(f"n_steps must be positive, got {n_steps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        self.n_steps = n_steps
        self.betas = torch.linspace(beta_start, beta_end, n_steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    def check_t(self, t) -> torch.Tensor:
        """Validate timesteps, returning them as a long tensor."""
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() == 0:
            raise StepOutOfRange("empty timestep tensor")
        if int(t.min()) < 0 or int(t.max()) >= self.n_steps:
            raise StepOutOfRange(f"timesteps must lie in [0, {self.n_steps}), got {t.tolist()}")
        return t

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[self.check_t(t)]

    def q_sample(self, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
        """Diffuse x0 to step t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
        if noise.shape != x0.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
        ab = self.alpha_bar(t)
        # Coefficients in float64, cast after the subtraction: 1 - ab loses
        # several digits in float32 when ab is close to 1.
        c_sig = ab.sqrt().to(x0.dtype)
        c_noise = (1.0 - ab).sqrt().to(x0.dtype)
        while c_sig.dim() < x0.dim():
            c_sig = c_sig.unsqueeze(-1)
            c_noise = c_noise.unsqueeze(-1)
        return c_sig * x0 + c_noise * noise


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features for integer timesteps: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)  # (B, half)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1).to(t.device)


class TimestepEmbed(nn.Module):
    def __init__(self, width: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        feats = timestep_features(t, self.freq_dim)
        return self.mlp(feats.to(self.mlp[0].weight.dtype))


class DenoiserBlock(nn.Module):
    """Self-attention and MLP gated by zero-initialized timestep modulation,
    with an ungated cross-attention read of the condition sequence between
    them."""

    def __init__(self, width: int, heads: int, d_cond: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_x = nn.LayerNorm(width)
        self.cross = nn.MultiheadAttention(width, heads, kdim=d_cond, vdim=d_cond, batch_first=True)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c_vec, cond_tokens, cond_pad_mask=None):
        mods = self.ada(c_vec).unsqueeze(1).chunk(6, dim=-1)  # 6 x (B, 1, width)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        h = self.norm1(x) * (1 + scale1) + shift1
        x = x + gate1 * self.attn(h, h, h, need_weights=False)[0]
        x = x + self.cross(
            self.norm_x(x), cond_tokens, cond_tokens,
            key_padding_mask=cond_pad_mask, need_weights=False,
        )[0]
        h = self.norm2(x) * (1 + scale2) + shift2
        return x + gate2 * self.mlp(h)


class Denoiser(nn.Module):
    """Noise predictor over latent patches.

    Input channels are 2 * latent_channels: the noisy latent stacked on the
    conditioning latent (zeros when no source image conditions the draw).
    """

    def __init__(
        self,
        latent_channels: int,
        latent_size: int,
        d_cond: int,
        width: int = 128,
        depth: int = 3,
        heads: int = 4,
        patch: int = 2,
    ):
        super().__init__()
        if latent_size % patch != 0:
            raise ValueError(f"latent_size {latent_size} not divisible by patch {patch}")
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.patch = patch
        self.grid = latent_size // patch
        self.patchify = nn.Conv2d(2 * latent_channels, width, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(self.grid * self.grid, width))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.t_embed = TimestepEmbed(width)
        self.blocks = nn.ModuleList(DenoiserBlock(width, heads, d_cond) for _ in range(depth))
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.head = nn.Linear(width, patch * patch * latent_channels)
        nn.init.zeros_(self.ada_out[1].weight)
        nn.init.zeros_(self.ada_out[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        x_t: torch.Tensor,
        cond_latent: torch.Tensor,
        t: torch.Tensor,
        cond_tokens: torch.Tensor,
        cond_pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        B, C, S, _ = x_t.shape
        if C != self.latent_channels or S != self.latent_size:
            raise ShapeError(
                f"expected latents (B, {self.latent_channels}, {self.latent_size}, "
                f"{self.latent_size}), got {tuple(x_t.shape)}"
            )
        if cond_latent.shape != x_t.shape:
            raise ShapeError(f"cond_latent shape {tuple(cond_latent.shape)} != x_t shape {tuple(x_t.shape)}")
        if cond_tokens.dim() != 3 or cond_tokens.shape[0] != B:
            raise ShapeError(f"cond_tokens must be (B, L, d_cond), got {tuple(cond_tokens.shape)}")

        x = torch.cat([x_t, cond_latent], dim=1)  # (B, 2C, S, S)
        tokens = self.patchify(x).flatten(2).transpose(1, 2) + self.pos  # (B, n_tok, width)
        c_vec = self.t_embed(t.reshape(B))
        for blk in self.blocks:
            tokens = blk(tokens, c_vec, cond_tokens, cond_pad_mask)
        shift, scale = self.ada_out(c_vec).unsqueeze(1).chunk(2, dim=-1)
        tokens = self.norm_out(tokens) * (1 + scale) + shift
        out = self.head(tokens)  # (B, n_tok, p*p*C)

        p, g = self.patch, self.grid
        eps = (
            out.reshape(B, g, g, C, p, p)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(B, C, S, S)
        )
        if not torch.isfinite(eps).all():
            raise NonFinite("denoiser produced non-finite noise prediction")
        return eps


def training_loss(
    model: Denoiser,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    cond_latent: torch.Tensor,
    t: torch.Tensor,
    cond_tokens: torch.Tensor,
    cond_pad_mask: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Standard eps-prediction MSE at the given timesteps."""
    if noise is None:
        noise = torch.randn_like(x0)
    x_t = schedule.q_sample(x0, t, noise)
    eps_hat = model(x_t, cond_latent, t, cond_tokens, cond_pad_mask)
    return torch.mean((eps_hat - noise) ** 2)


def cfg_combine(
    eps_uu: Optional[torch.Tensor],
    eps_iu: Optional[torch.Tensor],
    eps_ic: Optional[torch.Tensor],
    s_img: float,
    s_mm: float,
) -> torch.Tensor:
    """Two-scale guidance as a coefficient sum over the three branches.

    Coefficients are (1 - s_img, s_img - s_mm, s_mm) for the fully
    unconditional, image-only, and fully conditioned predictions. Terms
    with a zero coefficient are skipped entirely (their tensor may be
    None), and a lone unit coefficient returns that branch's tensor
    unchanged, so e.g. s_img = s_mm = 1 is exactly the conditional output.
    """
    terms = (
        (1.0 - s_img, eps_uu, "eps_uu"),
        (s_img - s_mm, eps_iu, "eps_iu"),
        (s_mm, eps_ic, "eps_ic"),
    )
    out = None
    for w, eps, name in terms:
        if w == 0.0:
            continue
        if eps is None:
            raise ValueError(f"{name} is required when its coefficient {w} is nonzero")
        contrib = eps if w == 1.0 else w * eps
        out = contrib if out is None else out + contrib
    if out is None:
        raise ValueError("all guidance coefficients are zero")
    return out


def guidance_branches(s_img: float, s_mm: float) -> tuple:
    """Which of (uncond, image-only, full) predictions cfg_combine will use."""
    return (1.0 - s_img != 0.0, s_img - s_mm != 0.0, s_mm != 0.0)


@torch.no_grad()
def ddim_sample(
    denoise_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    schedule: NoiseSchedule,
    shape: tuple,
    steps: int,
    x_T: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    callback: Optional[Callable[[int, int, torch.Tensor], None]] = None,
    x0_clamp: Optional[float] = None,
) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from step T-1 down to 0.

    denoise_fn(x_t, t) returns the (possibly guidance-combined) noise
    prediction for a batch at one shared timestep. The last update uses
    alpha_bar_prev = 1, so the return value is the model's final x0.

    x0_clamp bounds the per-step clean estimate. Near t = T the estimate
    divides by a tiny sqrt(alpha_bar), so small prediction errors throw
    the trajectory far outside the data range and each later step
    amplifies the drift; clamping to a loose bound on the true latent
    range keeps the trajectory anchored without touching in-range values.
    """
    if steps <= 0 or steps > schedule.n_steps:
        raise ValueError(f"steps must be in [1, {schedule.n_steps}], got {steps}")
    ts = torch.linspace(schedule.n_steps - 1, 0, steps).round().long()
    x = torch.randn(shape, generator=generator) if x_T is None else x_T.clone()
    for i, t in enumerate(ts):
        t_batch = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps = denoise_fn(x, t_batch)
        if eps.shape != x.shape:
            raise ShapeError(f"denoise_fn returned {tuple(eps.shape)}, expected {tuple(x.shape)}")
        ab_t = float(schedule.alpha_bars[int(t)])
        ab_prev = float(schedule.alpha_bars[int(ts[i + 1])]) if i + 1 < len(ts) else 1.0
        x0_pred = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        if x0_clamp is not None:
            x0_pred = x0_pred.clamp(-x0_clamp, x0_clamp)
        x = math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps
        if callback is not None:
            callback(i, int(t), x)
    if not torch.isfinite(x).all():
        raise NonFinite("sampler produced non-finite latents")
    return x
