"""Conditional latent diffusion for talking-face video.

The generator denoises face latents conditioned on three signals: the
reference (or previous) frame latent, a window of log-mel columns around the
target video frame, and the diffusion timestep.  Inference does not start
from pure noise: a weakly diffused copy of the reference latent seeds the
chain, so only ``t_start`` of the ``T`` schedule steps are run per frame.
Frames inside a block share the reference conditioning but use independent
per-frame RNG streams, which makes block generation order-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import MelContext
from .checkpoint import Checkpoint, LossCurve, checkpoint_from_module
from .codec import AdaptiveNorm, LatentCodec
from .errors import (
    EmptyDatasetError,
    InvalidConfigError,
    InvalidTimestepError,
    NumericError,
    ShapeError,
    TooShortError,
)

# --- noise schedule -----------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Cosine-shaped beta schedule with its derived alpha products."""

    T: int
    s: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_max_clip: float = 0.999


def cosine_schedule(T: int = 600, s: float = 0.008, beta_max_clip: float = 0.999) -> NoiseSchedule:
    """Squared-cosine noise schedule.

    f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) evaluated at integer t gives the
    raw signal level; betas are the per-step decay of f, clipped at
    beta_max_clip, and alpha_bar is recomputed from the clipped betas so the
    product identity alpha_bar[t] = prod(1 - beta[:t+1]) holds exactly.
    """
    if T < 2:
        raise InvalidConfigError(f"T must be >= 2, got {T}")
    if s <= 0:
        raise InvalidConfigError(f"s must be > 0, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    beta = 1.0 - f[1:] / f[:-1]
    beta = np.clip(beta, None, beta_max_clip)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T, s=s, beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_max_clip=beta_max_clip
    )


def _check_timestep(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise InvalidTimestepError(f"timestep {t} outside [0, {sched.T})")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if int(t.min()) < 0 or int(t.max()) >= sched.T:
            raise InvalidTimestepError(f"timesteps outside [0, {sched.T})")
        ab = sched.alpha_bar[t.cpu().numpy()]
        shape = (-1, *([1] * (x0.dim() - 1)))
        # sqrt in float64 first so batched and scalar lookups agree bitwise
        c_signal = torch.as_tensor(np.sqrt(ab), dtype=x0.dtype, device=x0.device).reshape(shape)
        c_noise = torch.as_tensor(np.sqrt(1.0 - ab), dtype=x0.dtype, device=x0.device).reshape(
            shape
        )
        return c_signal * x0 + c_noise * eps
    t = int(t)
    _check_timestep(t, sched)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    stochastic: bool = True,
) -> torch.Tensor:
    """One ancestral denoising step from t to t-1.

    mu = (x_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t); when t > 0 and
    stochastic, posterior noise sqrt(beta_t*(1-ab_{t-1})/(1-ab_t)) * xi is
    added.  At t = 0 the mean is returned exactly.
    """
    t = int(t)
    _check_timestep(t, sched)
    if x_t.shape != eps_hat.shape:
        raise ShapeError("x_t and eps_hat must share a shape")
    beta_t = float(sched.beta[t])
    alpha_t = float(sched.alpha[t])
    ab_t = float(sched.alpha_bar[t])
    mu = (x_t - (beta_t / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha_t)
    if t == 0 or not stochastic:
        return mu
    ab_prev = float(sched.alpha_bar[t - 1])
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    xi = torch.empty_like(x_t).normal_(generator=generator)
    return mu + math.sqrt(var) * xi


def prediffuse(
    ref_latent: torch.Tensor,
    t_start: int,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Weakly diffused prior: the reference latent pushed forward t_start steps."""
    if not 0 < t_start <= sched.T:
        raise InvalidTimestepError(f"t_start {t_start} outside (0, {sched.T}]")
    eps = torch.empty_like(ref_latent).normal_(generator=generator)
    return forward_diffuse(ref_latent, t_start - 1, eps, sched)


# --- time embedding -----------------------------------------------------------


def time_embedding(t, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal timestep embedding: [sin(t*w_k) | cos(t*w_k)].

    Frequencies w_k fall geometrically from 1 to 1/10000 over dim/2 terms.
    Accepts an int or a 1-D tensor of timesteps.
    """
    if dim % 2 != 0 or dim <= 0:
        raise InvalidConfigError(f"embedding dim must be a positive even number, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        k = torch.arange(half, dtype=torch.float64)
        freqs = torch.exp(-math.log(10000.0) * k / (half - 1))
    scalar = not (isinstance(t, torch.Tensor) and t.dim() > 0)
    ts = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    args = ts[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype=dtype, device=device)
    return emb[0] if scalar else emb


# --- conditional U-Net ----------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    base_channels: int = 64
    stages: int = 3
    attention_heads: int = 4
    time_dim: int = 128
    context_dim: int = 128
    w_mel: int = 16
    n_mels: int = 80

    def __post_init__(self) -> None:
        if self.stages < 1:
            raise InvalidConfigError("stages must be >= 1")
        if self.time_dim % 2:
            raise InvalidConfigError("time_dim must be even")
        if self.base_channels % self.attention_heads:
            raise InvalidConfigError("base_channels must be divisible by attention_heads")

    def stage_channels(self) -> list[int]:
        return [self.base_channels * (2**i) for i in range(self.stages)]


class ContextEncoder(nn.Module):
    """Builds the cross-attention token sequence from the two conditionings.

    The reference latent runs through two stride-2 convolutions and each
    surviving spatial cell becomes one token; every mel column is projected
    by a shared linear layer into one token.  A zero-initialized positional
    table marks the mel columns and a single tag vector marks image tokens,
    so at initialization a zero mel column maps exactly to the projection
    bias.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        d = cfg.context_dim
        self.cfg = cfg
        self.img_conv1 = nn.Conv2d(cfg.in_channels, d // 2, 3, stride=2, padding=1)
        self.img_conv2 = nn.Conv2d(d // 2, d, 3, stride=2, padding=1)
        self.img_tag = nn.Parameter(torch.zeros(1, 1, d))
        self.mel_proj = nn.Linear(cfg.n_mels, d)
        self.mel_pos = nn.Parameter(torch.zeros(1, cfg.w_mel, d))

    def forward(self, ref_latent: torch.Tensor, mel_window: torch.Tensor) -> torch.Tensor:
        if ref_latent.dim() == 3:
            ref_latent = ref_latent.unsqueeze(0)
        if mel_window.dim() == 2:
            mel_window = mel_window.unsqueeze(0)
        if ref_latent.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"reference latent has {ref_latent.shape[1]} channels, expected {self.cfg.in_channels}"
            )
        if mel_window.shape[1] != self.cfg.n_mels or mel_window.shape[2] != self.cfg.w_mel:
            raise ShapeError(
                f"mel window shaped {tuple(mel_window.shape[1:])}, expected "
                f"({self.cfg.n_mels}, {self.cfg.w_mel})"
            )
        h = self.img_conv2(F.silu(self.img_conv1(ref_latent)))
        img_tokens = h.flatten(2).transpose(1, 2) + self.img_tag  # [B, hw, d]
        mel_tokens = self.mel_proj(mel_window.transpose(1, 2)) + self.mel_pos  # [B, W, d]
        return torch.cat([img_tokens, mel_tokens], dim=1)


def encode_context(ref_image_latent, mel_context, encoder: ContextEncoder) -> torch.Tensor:
    """Token sequence for cross attention; accepts a MelContext or raw window."""
    window = mel_context.window if isinstance(mel_context, MelContext) else mel_context
    window = torch.as_tensor(window, dtype=torch.float32)
    return encoder(ref_image_latent, window)


class TimedResBlock(nn.Module):
    """Residual block with the timestep embedding added between convolutions."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(x))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial positions onto the context tokens."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(context_dim)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=context_dim, vdim=context_dim, batch_first=True
        )

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.norm_q(x.flatten(2).transpose(1, 2))
        kv = self.norm_kv(context)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ConditionalUNet(nn.Module):
    """Noise predictor over latents with time and cross-attention conditioning.

    Channel width doubles per stage; cross attention runs at the two lowest
    resolutions and in the bottleneck; skip connections mirror the down path.
    """

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        cfg = self.cfg
        chs = cfg.stage_channels()
        attn_from = max(0, cfg.stages - 2)

        self.input_norm = AdaptiveNorm((1, cfg.in_channels, 1, 1))
        self.time_norm = AdaptiveNorm((1, cfg.time_dim))
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU())
        self.context = ContextEncoder(cfg)
        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = chs[0]
        for s, ch in enumerate(chs):
            self.down_blocks.append(TimedResBlock(prev, ch, cfg.time_dim))
            self.down_attns.append(
                CrossAttention(ch, cfg.context_dim, cfg.attention_heads)
                if s >= attn_from
                else None
            )
            self.downsamples.append(nn.Conv2d(ch, ch, 4, stride=2, padding=1))
            prev = ch

        self.mid1 = TimedResBlock(chs[-1], chs[-1], cfg.time_dim)
        self.mid_attn = CrossAttention(chs[-1], cfg.context_dim, cfg.attention_heads)
        self.mid2 = TimedResBlock(chs[-1], chs[-1], cfg.time_dim)

        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        for s in reversed(range(cfg.stages)):
            ch = chs[s]
            out_ch = chs[s - 1] if s > 0 else chs[0]
            self.up_convs.append(nn.ConvTranspose2d(prev, ch, 4, stride=2, padding=1))
            self.up_blocks.append(TimedResBlock(2 * ch, out_ch, cfg.time_dim))
            self.up_attns.append(
                CrossAttention(out_ch, cfg.context_dim, cfg.attention_heads)
                if s >= attn_from
                else None
            )
            prev = out_ch

        self.out_conv = nn.Conv2d(chs[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t: torch.Tensor, t, context: torch.Tensor) -> torch.Tensor:
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
        if x_t.dim() != 4 or x_t.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"latent batch expected, got {tuple(x_t.shape)}")
        if context.dim() == 2:
            context = context.unsqueeze(0)
        if context.shape[0] == 1 and x_t.shape[0] > 1:
            context = context.expand(x_t.shape[0], -1, -1)

        ts = torch.as_tensor(t).reshape(-1)
        if ts.numel() == 1 and x_t.shape[0] > 1:
            ts = ts.expand(x_t.shape[0])
        t_emb = self.time_mlp(
            self.time_norm(time_embedding(ts, self.cfg.time_dim, dtype=x_t.dtype))
        )

        h = self.stem(self.input_norm(x_t))
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attns, self.downsamples):
            h = block(h, t_emb)
            if attn is not None:
                h = attn(h, context)
            skips.append(h)
            h = down(h)

        h = self.mid1(h, t_emb)
        h = self.mid_attn(h, context)
        h = self.mid2(h, t_emb)

        for up, block, attn in zip(self.up_convs, self.up_blocks, self.up_attns):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
            if attn is not None:
                h = attn(h, context)

        out = self.out_conv(h)
        return out.squeeze(0) if squeeze else out


def unet_predict_noise(x_t: torch.Tensor, t, context: torch.Tensor, unet: ConditionalUNet):
    out = unet(x_t, t, context)
    if out.shape != x_t.shape:
        raise ShapeError("noise prediction lost the input shape")
    return out


# --- losses and training ---------------------------------------------------------


@dataclass
class AvatarModels:
    """Everything inference needs: codec, schedule and the noise predictor."""

    codec: LatentCodec
    sched: NoiseSchedule
    unet: ConditionalUNet


@dataclass(frozen=True)
class DiffusionTrainConfig:
    epochs: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise InvalidConfigError("epochs, batch_size and learning_rate must be positive")


def diffusion_loss(
    batch,
    codec: LatentCodec,
    sched: NoiseSchedule,
    unet: ConditionalUNet,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE over a batch of (frame, prev_frame, mel) triplets.

    Timesteps are drawn uniformly per item; the loss is the elementwise mean
    of (eps_hat - eps)^2.
    """
    frames, prev_frames, mel_windows = _stack_triplets(batch)
    if frames.shape[0] == 0:
        raise EmptyDatasetError("empty batch")
    with torch.no_grad():
        lat = _latent(codec.encode(frames))
        ref = _latent(codec.encode(prev_frames))
    t = torch.randint(0, sched.T, (frames.shape[0],), generator=generator)
    eps = torch.empty_like(lat).normal_(generator=generator)
    x_t = forward_diffuse(lat, t, eps, sched)
    context = unet.context(ref, mel_windows)
    eps_hat = unet(x_t, t, context)
    return (eps_hat - eps).square().mean()


def _stack_triplets(batch):
    if hasattr(batch, "frames"):  # TalkingDataset-like
        return batch.frames[1:], batch.frames[:-1], batch.mel_windows
    frames, prevs, mels = [], [], []
    for frame, prev, mel in batch:
        frames.append(torch.as_tensor(frame, dtype=torch.float32))
        prevs.append(torch.as_tensor(prev, dtype=torch.float32))
        window = mel.window if isinstance(mel, MelContext) else mel
        mels.append(torch.as_tensor(window, dtype=torch.float32))
    if not frames:
        raise EmptyDatasetError("empty batch")
    return torch.stack(frames), torch.stack(prevs), torch.stack(mels)


def train_diffusion(
    dataset,
    codec: LatentCodec,
    sched: NoiseSchedule,
    unet: ConditionalUNet,
    cfg: DiffusionTrainConfig,
) -> tuple[Checkpoint, LossCurve]:
    """Adam + cosine-annealed learning rate over noise-prediction MSE.

    The codec is frozen; since its parameters cannot change, all frame
    latents are encoded once up front and reused every epoch.
    """
    frames, prev_frames, mel_windows = _stack_triplets(dataset)
    n = frames.shape[0]
    if n == 0:
        raise EmptyDatasetError("training dataset is empty")
    codec.requires_grad_(False)
    codec.eval()
    with torch.no_grad():
        lat = _encode_chunked(codec, frames)
        ref = _encode_chunked(codec, prev_frames)

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(unet.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    curve = LossCurve()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            t = torch.randint(0, sched.T, (len(idx),), generator=gen)
            eps = torch.empty(lat[idx].shape).normal_(generator=gen)
            x_t = forward_diffuse(lat[idx], t, eps, sched)
            context = unet.context(ref[idx], mel_windows[idx])
            eps_hat = unet(x_t, t, context)
            loss = (eps_hat - eps).square().mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        scheduler.step()
        mean = total / n
        if not math.isfinite(mean):
            raise NumericError(f"loss diverged at epoch {epoch}")
        curve.append(epoch=epoch, loss=mean)
    ckpt = checkpoint_from_module(
        unet,
        kind="diffusion_unet",
        seed=cfg.seed,
        epochs=cfg.epochs,
        final_loss=curve.losses[-1],
        in_channels=unet.cfg.in_channels,
        base_channels=unet.cfg.base_channels,
        stages=unet.cfg.stages,
        attention_heads=unet.cfg.attention_heads,
        time_dim=unet.cfg.time_dim,
        context_dim=unet.cfg.context_dim,
        w_mel=unet.cfg.w_mel,
        n_mels=unet.cfg.n_mels,
        schedule_T=sched.T,
        schedule_s=sched.s,
    )
    return ckpt, curve


def _latent(enc) -> torch.Tensor:
    # variational codecs enter diffusion at the posterior mean so the whole
    # pipeline stays deterministic under its seeds
    return enc.mu if enc.mu is not None else enc.z


def _encode_chunked(codec: LatentCodec, frames: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    outs = [
        _latent(codec.encode(frames[i : i + chunk]))
        for i in range(0, frames.shape[0], chunk)
    ]
    return torch.cat(outs)


def unet_from_checkpoint(directory) -> tuple[ConditionalUNet, NoiseSchedule]:
    ckpt = Checkpoint.load(directory)
    m = ckpt.manifest
    cfg = UNetConfig(
        in_channels=int(m["in_channels"]),
        base_channels=int(m["base_channels"]),
        stages=int(m["stages"]),
        attention_heads=int(m["attention_heads"]),
        time_dim=int(m["time_dim"]),
        context_dim=int(m["context_dim"]),
        w_mel=int(m["w_mel"]),
        n_mels=int(m["n_mels"]),
    )
    unet = ConditionalUNet(cfg)
    unet.load_state_dict(ckpt.tensors)
    sched = cosine_schedule(int(m.get("schedule_T", 600)), float(m.get("schedule_s", 0.008)))
    return unet, sched


# --- generation --------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationConfig:
    t_start: int = 100
    block_size: int = 30
    fps: float = 30.0
    stochastic: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.t_start <= 0:
            raise InvalidTimestepError(f"t_start must be positive, got {self.t_start}")
        if self.block_size < 1:
            raise InvalidConfigError("block_size must be >= 1")
        if self.fps <= 0:
            raise InvalidConfigError("fps must be positive")


@dataclass
class ConditioningBundle:
    """The complete conditioning for one denoising invocation.

    Nothing from frames earlier than the reference may appear here; the
    Markov structure of generation is exactly these three fields.
    """

    ref_image_latent: torch.Tensor
    mel_context: MelContext
    timestep: int


def frame_rng_seed(seed: int, frame_index: int) -> int:
    """Stable per-frame stream seed so parallel and serial runs agree."""
    mix = (seed * 6364136223846793005 + frame_index * 1442695040888963407) % (2**63)
    return int(mix)


def generate_frame(
    ref_latent: torch.Tensor,
    mel_context: MelContext,
    frame_index: int,
    gen_cfg: GenerationConfig,
    models: AvatarModels,
) -> torch.Tensor:
    """Denoise one frame from the pre-diffused reference latent.

    The frame's RNG stream is derived from (seed, frame_index) alone, so the
    result is bit-identical whether the frame is produced inside a block or
    in isolation.
    """
    sched = models.sched
    if gen_cfg.t_start > sched.T:
        raise InvalidTimestepError(f"t_start {gen_cfg.t_start} exceeds schedule T={sched.T}")
    rng = torch.Generator().manual_seed(frame_rng_seed(gen_cfg.seed, frame_index))
    with torch.no_grad():
        x = prediffuse(ref_latent, gen_cfg.t_start, sched, rng)
        context = encode_context(ref_latent, mel_context, models.unet.context)
        for t in range(gen_cfg.t_start - 1, -1, -1):
            bundle = ConditioningBundle(
                ref_image_latent=ref_latent, mel_context=mel_context, timestep=t
            )
            eps_hat = models.unet(x, bundle.timestep, context)
            x = reverse_step(x, eps_hat, t, sched, rng, stochastic=gen_cfg.stochastic)
        frame = models.codec.decode(x)
    return frame


def generate_block(
    ref_image: torch.Tensor,
    audio_mel,
    gen_cfg: GenerationConfig,
    models: AvatarModels,
    start_frame: int = 0,
) -> list[torch.Tensor]:
    """Generate block_size frames that share one reference conditioning image.

    audio_mel is the MelSpectrogram of the driving audio; each frame i is
    conditioned on the mel window aligned to video frame start_frame + i.
    Frames are mutually independent given the reference latent.
    """
    from .audio import frame_align

    needed = (start_frame + gen_cfg.block_size) / gen_cfg.fps
    available = (
        (audio_mel.n_frames - 1) * audio_mel.config.hop_length + audio_mel.config.window_length
    ) / audio_mel.config.sample_rate
    if available + 0.5 / gen_cfg.fps < needed:
        raise TooShortError(
            f"audio covers {available:.2f}s but {needed:.2f}s are required"
        )
    with torch.no_grad():
        ref_latent = _latent(models.codec.encode(ref_image))
    frames = []
    for i in range(gen_cfg.block_size):
        index = start_frame + i
        ctx = frame_align(audio_mel, index, gen_cfg.fps, models.unet.cfg.w_mel)
        frames.append(generate_frame(ref_latent, ctx, index, gen_cfg, models))
    return frames
