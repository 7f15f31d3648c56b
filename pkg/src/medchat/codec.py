"""Convolutional autoencoder with three latent-space constraints.

The same encoder/decoder trunk is trained in one of three modes:

* ``UNCONSTRAINED``: raw latent projection, nothing bounds the values;
* ``VAE``: the projection doubles up as (mu, log-variance) heads and the
  latent is reparameterized, trained with an extra KL penalty;
* ``TANH_ADANORM``: the latent is squashed through tanh to [-1, 1] and the
  decoder undoes the squeeze with an adaptive normalization stage.

Three stride-2 stages fix the spatial compression at 8x in each direction,
so a [3, N, N] image maps to a [latent_channels, N/8, N/8] latent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, LossCurve, checkpoint_from_module
from .errors import (
    EmptyDatasetError,
    InvalidConfigError,
    NumericError,
    ShapeError,
)


class CodecMode(enum.Enum):
    UNCONSTRAINED = "unconstrained"
    VAE = "vae"
    TANH_ADANORM = "tanh_adanorm"


@dataclass(frozen=True)
class CodecConfig:
    mode: CodecMode = CodecMode.TANH_ADANORM
    in_channels: int = 3
    latent_channels: int = 6
    base_channels: int = 32
    kl_weight: float = 1e-6  # VAE mode only
    latent_gain: float = 1.0  # scale of the public latent interface

    def __post_init__(self) -> None:
        if self.latent_channels < 1:
            raise InvalidConfigError("latent_channels must be >= 1")
        if self.in_channels not in (1, 3):
            raise InvalidConfigError("in_channels must be 1 or 3")
        if self.base_channels < 2 or self.base_channels % 2:
            raise InvalidConfigError("base_channels must be an even count >= 2")
        if self.kl_weight < 0:
            raise InvalidConfigError("kl_weight must be non-negative")
        if not 0.0 < self.latent_gain <= 1.0:
            raise InvalidConfigError("latent_gain must be in (0, 1]")

    def compression_factor(self) -> float:
        # total element reduction: (C*N*N) / (latent_channels*(N/8)^2)
        return 64.0 * self.in_channels / self.latent_channels


@dataclass(frozen=True)
class CodecTrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-5
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0
    noise_sigma_max: float = 0.3  # latent noise augmentation amplitude
    augment: bool = False  # geometric augmentation of input images

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise InvalidConfigError("epochs, batch_size and learning_rate must be positive")
        if self.noise_sigma_max < 0:
            raise InvalidConfigError("noise_sigma_max must be >= 0")


@dataclass
class EncoderOutput:
    """Latent draw plus, in VAE mode, the distribution parameters."""

    z: torch.Tensor
    mu: torch.Tensor | None
    log_var: torch.Tensor | None
    mode: CodecMode


@dataclass(frozen=True)
class AugmentRanges:
    max_rotate_deg: float = 10.0
    max_translate_frac: float = 0.10
    scale_low: float = 0.9
    scale_high: float = 1.1
    max_shear_deg: float = 5.0


# --- adaptive normalization -------------------------------------------------


def adaptive_norm(x, mean, var, gain, bias, epsilon: float = 1e-5):
    """y = gain * (x - mean) / sqrt(var + epsilon) + bias.

    All four statistics are free parameters shaped (1, C, 1, 1) for feature
    maps or (1, D) for vectors; identity at initialization (m=0, v=1, g=1,
    b=0).
    """
    if mean.dim() != x.dim() or mean.shape[1] != x.shape[1]:
        raise ShapeError(
            f"adaptive_norm params shaped {tuple(mean.shape)} do not match input {tuple(x.shape)}"
        )
    denom = var + epsilon
    if torch.any(denom <= 0):
        raise NumericError("adaptive_norm variance + epsilon must stay positive")
    return gain * (x - mean) / torch.sqrt(denom) + bias


class AdaptiveNorm(nn.Module):
    def __init__(self, shape: tuple[int, ...], epsilon: float = 1e-5):
        super().__init__()
        if len(shape) not in (2, 4) or shape[0] != 1:
            raise InvalidConfigError(f"adaptive norm shape must be (1,C,1,1) or (1,D), got {shape}")
        self.epsilon = epsilon
        self.mean = nn.Parameter(torch.zeros(shape))
        self.var = nn.Parameter(torch.ones(shape))
        self.gain = nn.Parameter(torch.ones(shape))
        self.bias = nn.Parameter(torch.zeros(shape))

    def forward(self, x):
        return adaptive_norm(x, self.mean, self.var, self.gain, self.bias, self.epsilon)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with pre-activation SiLU and a skip connection.

    The skip is an identity when channel counts agree and a 1x1 projection
    otherwise.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        b = cfg.base_channels
        head = cfg.latent_channels * (2 if cfg.mode is CodecMode.VAE else 1)
        self.input_norm = AdaptiveNorm((1, cfg.in_channels, 1, 1))
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, b, 3, padding=1),
            ResBlock(b, b),
            nn.Conv2d(b, b, 4, stride=2, padding=1),
            ResBlock(b, 2 * b),
            nn.Conv2d(2 * b, 2 * b, 4, stride=2, padding=1),
            ResBlock(2 * b, 4 * b),
            nn.Conv2d(4 * b, 4 * b, 4, stride=2, padding=1),
            ResBlock(4 * b, 4 * b),
            nn.Conv2d(4 * b, head, 3, padding=1),
        )

    def forward(self, x):
        return self.net(self.input_norm(x))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        b = cfg.base_channels
        # Only the tanh-constrained codec re-normalizes its squashed latents.
        self.input_norm = (
            AdaptiveNorm((1, cfg.latent_channels, 1, 1))
            if cfg.mode is CodecMode.TANH_ADANORM
            else nn.Identity()
        )
        self.net = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, 4 * b, 1),
            ResBlock(4 * b, 4 * b),
            nn.ConvTranspose2d(4 * b, 2 * b, 4, stride=2, padding=1),
            ResBlock(2 * b, 2 * b),
            nn.ConvTranspose2d(2 * b, b, 4, stride=2, padding=1),
            ResBlock(b, b),
            nn.ConvTranspose2d(b, b // 2, 4, stride=2, padding=1),
            ResBlock(b // 2, b // 2),
            nn.Conv2d(b // 2, cfg.in_channels, 3, padding=1),
        )

    def forward(self, z):
        return torch.tanh(self.net(self.input_norm(z)))


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        self.encoder = Encoder(self.config)
        self.decoder = Decoder(self.config)

    @property
    def mode(self) -> CodecMode:
        return self.config.mode

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4:
            raise ShapeError(f"expected [C,N,N] or [B,C,N,N], got {tuple(image.shape)}")
        b, c, h, w = image.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {c}")
        if h != w:
            raise ShapeError(f"images must be square, got {h}x{w}")
        if h % 8 != 0:
            raise ShapeError(f"spatial size must be divisible by 8, got {h}")
        return image

    def encode(self, image: torch.Tensor, generator: torch.Generator | None = None) -> EncoderOutput:
        squeeze = image.dim() == 3
        image = self._check_image(image)
        raw = self.encoder(image)
        if self.config.mode is CodecMode.VAE:
            mu, log_var = torch.chunk(raw, 2, dim=1)
            log_var = torch.clamp(log_var, -30.0, 20.0)
            eps = torch.empty_like(mu).normal_(generator=generator)
            z = reparameterize(mu, log_var, eps)
        elif self.config.mode is CodecMode.TANH_ADANORM:
            mu, log_var, z = None, None, torch.tanh(raw)
        else:
            mu, log_var, z = None, None, raw
        gain = self.config.latent_gain
        if gain != 1.0:
            z = z * gain
            if mu is not None:
                mu = mu * gain
                log_var = log_var + 2.0 * math.log(gain)
        if squeeze:
            z = z.squeeze(0)
            mu = mu.squeeze(0) if mu is not None else None
            log_var = log_var.squeeze(0) if log_var is not None else None
        return EncoderOutput(z=z, mu=mu, log_var=log_var, mode=self.config.mode)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        if z.dim() != 4 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(
                f"latent must be [B,{self.config.latent_channels},n,n], got {tuple(z.shape)}"
            )
        if self.config.latent_gain != 1.0:
            z = z / self.config.latent_gain
        out = self.decoder(z)
        return out.squeeze(0) if squeeze else out


# --- losses -----------------------------------------------------------------


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(0.5 * log_var) * eps."""
    if mu.shape != log_var.shape or mu.shape != eps.shape:
        raise ShapeError("mu, log_var and eps must share a shape")
    return mu + torch.exp(0.5 * log_var) * eps


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """-0.5 * sum(1 + log_var - mu^2 - exp(log_var)), summed per sample and
    averaged over the batch (leading dim when rank > 3, else batch of 1)."""
    if mu.shape != log_var.shape:
        raise ShapeError("mu and log_var must share a shape")
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise NumericError("kl_loss inputs must be finite")
    batch = mu.shape[0] if mu.dim() >= 4 else 1
    total = -0.5 * torch.sum(1.0 + log_var - mu.pow(2) - log_var.exp())
    return total / batch


def l1_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements (resolution independent)."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def codec_total_loss(
    batch: torch.Tensor,
    codec: LatentCodec,
    generator: torch.Generator | None = None,
    noise_sigma_max: float = 0.0,
):
    """Mode-dependent training loss with its components.

    Returns (total, parts) where parts maps 'l1' and, in VAE mode, 'kl' to
    detached component values.
    """
    if batch.numel() == 0:
        raise EmptyDatasetError("empty batch")
    enc = codec.encode(batch, generator=generator)
    z = enc.z
    if noise_sigma_max > 0:
        # noise rides the interface scale so training is gain-independent
        z = latent_noise_augment(z, generator, noise_sigma_max * codec.config.latent_gain)
    recon = codec.decode(z)
    rec = l1_loss(batch, recon)
    parts = {"l1": float(rec.detach())}
    if codec.mode is CodecMode.VAE:
        kl = kl_loss(enc.mu, enc.log_var)
        parts["kl"] = float(kl.detach())
        total = rec + codec.config.kl_weight * kl
    else:
        total = rec
    return total, parts


# --- augmentation -----------------------------------------------------------


def latent_noise_augment(
    z: torch.Tensor, generator: torch.Generator | None, sigma_max: float
) -> torch.Tensor:
    """Add zero-mean Gaussian noise with a per-sample sigma ~ U(0, sigma_max)."""
    if sigma_max < 0:
        raise InvalidConfigError("sigma_max must be >= 0")
    if sigma_max == 0:
        return z
    squeeze = z.dim() == 3
    if squeeze:
        z = z.unsqueeze(0)
    b = z.shape[0]
    sigma = torch.rand(b, 1, 1, 1, generator=generator, dtype=z.dtype) * sigma_max
    noise = torch.empty_like(z).normal_(generator=generator) * sigma
    out = z + noise
    return out.squeeze(0) if squeeze else out


def apply_affine(
    image: torch.Tensor,
    rotate_deg: float = 0.0,
    translate_px: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    shear_deg: float = 0.0,
) -> torch.Tensor:
    """Affine-warp image content; exposed border regions are zero-filled.

    translate_px is (dx, dy) in pixels: positive dx moves content right,
    positive dy moves it down.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    b, c, h, w = image.shape
    angle = math.radians(rotate_deg)
    shear = math.radians(shear_deg)
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    # Inverse map (output -> input) in normalized [-1, 1] coordinates:
    # invert shear, scale and rotation, then remove the translation.
    inv_rot = torch.tensor([[cos_a, sin_a], [-sin_a, cos_a]], dtype=image.dtype)
    inv_scale = torch.tensor([[1.0 / scale, 0.0], [0.0, 1.0 / scale]], dtype=image.dtype)
    inv_shear = torch.tensor([[1.0, -math.tan(shear)], [0.0, 1.0]], dtype=image.dtype)
    a = inv_shear @ inv_scale @ inv_rot
    t = torch.tensor([2.0 * translate_px[0] / w, 2.0 * translate_px[1] / h], dtype=image.dtype)
    theta = torch.cat([a, (-a @ t).reshape(2, 1)], dim=1)
    grid = F.affine_grid(theta.unsqueeze(0).expand(b, -1, -1), image.shape, align_corners=False)
    return_val = F.grid_sample(
        image, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return return_val.squeeze(0) if squeeze else return_val


def augment_image(
    image: torch.Tensor,
    generator: torch.Generator | None = None,
    ranges: AugmentRanges | None = None,
) -> torch.Tensor:
    """Sample one affine transform per image and apply it with zero padding."""
    ranges = ranges or AugmentRanges()
    squeeze = image.dim() == 3
    batch = image.unsqueeze(0) if squeeze else image
    h, w = batch.shape[-2:]

    def u(lo: float, hi: float) -> float:
        if hi <= lo:
            return lo
        return lo + (hi - lo) * float(torch.rand((), generator=generator))

    out = torch.stack(
        [
            apply_affine(
                img,
                rotate_deg=u(-ranges.max_rotate_deg, ranges.max_rotate_deg),
                translate_px=(
                    u(-ranges.max_translate_frac, ranges.max_translate_frac) * w,
                    u(-ranges.max_translate_frac, ranges.max_translate_frac) * h,
                ),
                scale=u(ranges.scale_low, ranges.scale_high),
                shear_deg=u(-ranges.max_shear_deg, ranges.max_shear_deg),
            )
            for img in batch
        ]
    )
    return out.squeeze(0) if squeeze else out


# --- training ----------------------------------------------------------------


def train_codec(
    dataset: torch.Tensor,
    codec: LatentCodec,
    cfg: CodecTrainConfig,
) -> tuple[Checkpoint, LossCurve]:
    """AdamW training loop over [-1, 1] images, deterministic under cfg.seed.

    Records the per-epoch mean of the total loss (and its components) and
    returns a checkpoint of the final parameters.
    """
    if not isinstance(dataset, torch.Tensor):
        dataset = torch.stack(list(dataset))
    if dataset.numel() == 0 or dataset.shape[0] == 0:
        raise EmptyDatasetError("training dataset is empty")
    if dataset.shape[0] < cfg.batch_size:
        raise EmptyDatasetError(
            f"dataset of {dataset.shape[0]} images is smaller than one batch ({cfg.batch_size})"
        )
    codec._check_image(dataset[0])

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(
        codec.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    curve = LossCurve()
    n = dataset.shape[0]
    is_vae = codec.mode is CodecMode.VAE
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        total_sum = 0.0
        l1_sum = 0.0
        kl_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = dataset[idx]
            if cfg.augment:
                batch = augment_image(batch, generator=gen)
            total, parts = codec_total_loss(
                batch, codec, generator=gen, noise_sigma_max=cfg.noise_sigma_max
            )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            weight = len(idx)
            total_sum += float(total.detach()) * weight
            l1_sum += parts["l1"] * weight
            kl_sum += parts.get("kl", 0.0) * weight
        mean_total = total_sum / n
        if not math.isfinite(mean_total):
            raise NumericError(f"training diverged at epoch {epoch} (loss={mean_total})")
        curve.append(
            epoch=epoch,
            loss=mean_total,
            l1=l1_sum / n,
            kl=kl_sum / n if is_vae else None,
        )
    ckpt = checkpoint_from_module(
        codec,
        kind="codec",
        mode=codec.mode.value,
        in_channels=codec.config.in_channels,
        latent_channels=codec.config.latent_channels,
        base_channels=codec.config.base_channels,
        kl_weight=codec.config.kl_weight,
        latent_gain=codec.config.latent_gain,
        seed=cfg.seed,
        epochs=cfg.epochs,
        final_loss=curve.losses[-1],
    )
    return ckpt, curve


def codec_from_checkpoint(directory) -> LatentCodec:
    """Rebuild a codec (architecture + weights) from a checkpoint directory."""
    ckpt = Checkpoint.load(directory)
    m = ckpt.manifest
    config = CodecConfig(
        mode=CodecMode(m["mode"]),
        in_channels=int(m["in_channels"]),
        latent_channels=int(m["latent_channels"]),
        base_channels=int(m["base_channels"]),
        kl_weight=float(m.get("kl_weight", 0.0)),
        latent_gain=float(m.get("latent_gain", 1.0)),
    )
    codec = LatentCodec(config)
    codec.load_state_dict(ckpt.tensors)
    return codec
