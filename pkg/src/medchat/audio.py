"""Audio front end: loading, resampling, log-mel extraction, frame alignment.

The mel representation is the conditioning signal for the avatar generator,
so the exact conventions matter and are fixed here: magnitude STFT without
center padding, HTK-style mel filterbank spanning 0..Nyquist, natural log
with a configurable floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import (
    EmptyAudioError,
    InvalidConfigError,
    InvalidFrameError,
    RateMismatchError,
    TooShortError,
)

DEFAULT_SAMPLE_RATE = 22050
DEFAULT_LOG_FLOOR = math.log(1e-5)


@dataclass
class AudioClip:
    """Mono audio as float64 samples in [-1, 1] plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidConfigError("audio clips must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InvalidConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """Parameters of the log-mel extraction."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_length: int = 1024
    hop_length: int = 128
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise InvalidConfigError("sample_rate must be positive")
        if self.window_length <= 0 or self.hop_length <= 0:
            raise InvalidConfigError("window_length and hop_length must be positive")
        if self.hop_length > self.window_length:
            raise InvalidConfigError("hop_length must not exceed window_length")
        if self.n_mels <= 0:
            raise InvalidConfigError("n_mels must be positive")
        nyquist = self.sample_rate / 2.0
        fmax = nyquist if self.fmax is None else self.fmax
        if not (0.0 <= self.fmin < fmax <= nyquist):
            raise InvalidConfigError(f"need 0 <= fmin < fmax <= {nyquist}")

    @property
    def effective_fmax(self) -> float:
        return self.sample_rate / 2.0 if self.fmax is None else self.fmax


@dataclass
class MelSpectrogram:
    """Log-mel bins, shape [n_mels, n_frames], column-major in time."""

    bins: np.ndarray
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class MelContext:
    """A fixed-width slice of a mel spectrogram centred on a video frame."""

    window: np.ndarray  # [n_mels, width]
    frame_index: int
    fps: float


def load_wav(path) -> AudioClip:
    """Read a mono WAV file (16-bit PCM or 32/64-bit float)."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise InvalidConfigError(f"expected mono WAV, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidConfigError(f"unsupported WAV sample format {data.dtype}")
    return AudioClip(samples=samples, sample_rate=int(rate))


def save_wav(path, clip: AudioClip) -> None:
    scipy.io.wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited sample-rate conversion (polyphase windowed-sinc FIR).

    Same-rate input is returned unchanged.  Output length is
    ceil(n * target / source), which keeps duration within one sample period.
    """
    if target_rate <= 0:
        raise InvalidConfigError("target_rate must be positive")
    if len(clip.samples) == 0:
        raise EmptyAudioError("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(samples=clip.samples.copy(), sample_rate=target_rate)
    g = math.gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    out = scipy.signal.resample_poly(clip.samples, up, down)
    return AudioClip(samples=out, sample_rate=target_rate)


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def hz_to_mel(hz) -> np.ndarray:
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular filterbank, shape [n_mels, window_length // 2 + 1].

    Triangle corners are spaced uniformly on the mel scale between fmin and
    fmax; each filter peaks at 1 at its centre frequency.
    """
    n_bins = config.window_length // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * config.sample_rate / config.window_length
    corners = mel_to_hz(
        np.linspace(
            hz_to_mel(config.fmin), hz_to_mel(config.effective_fmax), config.n_mels + 2
        )
    )
    lower, centre, upper = corners[:-2], corners[1:-1], corners[2:]
    rising = (fft_freqs[None, :] - lower[:, None]) / np.maximum(centre - lower, 1e-12)[:, None]
    falling = (upper[:, None] - fft_freqs[None, :]) / np.maximum(upper - centre, 1e-12)[:, None]
    bank = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def frame_count(n_samples: int, config: MelConfig) -> int:
    """Number of analysis frames without center padding."""
    if n_samples < config.window_length:
        raise TooShortError(
            f"clip of {n_samples} samples is shorter than one window ({config.window_length})"
        )
    return 1 + (n_samples - config.window_length) // config.hop_length


def mel_spectrogram(clip: AudioClip, config: MelConfig | None = None) -> MelSpectrogram:
    """Log-mel spectrogram: magnitude STFT -> mel filterbank -> ln with floor.

    The clip's rate must match the config; callers resample first.  Every
    output entry is >= config.log_floor, and digital silence maps exactly to
    the floor.
    """
    if config is None:
        config = MelConfig()
    if len(clip.samples) == 0:
        raise EmptyAudioError("cannot analyse an empty clip")
    if clip.sample_rate != config.sample_rate:
        raise RateMismatchError(
            f"clip at {clip.sample_rate} Hz but config expects {config.sample_rate} Hz"
        )
    n = frame_count(len(clip.samples), config)
    window = hann_window(config.window_length)
    starts = np.arange(n) * config.hop_length
    frames = np.stack(
        [clip.samples[s : s + config.window_length] for s in starts], axis=0
    )
    mags = np.abs(np.fft.rfft(frames * window[None, :], axis=1))  # [n, bins]
    bank = mel_filterbank(config)
    energies = bank @ mags.T  # [n_mels, n]
    floor_energy = math.exp(config.log_floor)
    bins = np.maximum(np.log(np.maximum(energies, floor_energy)), config.log_floor)
    return MelSpectrogram(bins=bins, config=config)


def frame_align(
    mel: MelSpectrogram, frame_index: int, fps: float, width: int = 16
) -> MelContext:
    """Cut the mel window conditioning one video frame.

    The centre column is round(frame_index / fps * sample_rate / hop_length);
    the slice spans [centre - width//2, centre + ceil(width/2) - 1] and
    out-of-range columns are filled with the log floor, so the result always
    has shape [n_mels, width].
    """
    if frame_index < 0:
        raise InvalidFrameError(f"frame_index must be >= 0, got {frame_index}")
    if fps <= 0:
        raise InvalidConfigError("fps must be positive")
    if width <= 0:
        raise InvalidConfigError("width must be positive")
    cfg = mel.config
    centre = round(frame_index / fps * cfg.sample_rate / cfg.hop_length)
    lo = centre - width // 2
    hi = lo + width  # exclusive
    out = np.full((cfg.n_mels, width), cfg.log_floor, dtype=np.float64)
    src_lo = max(lo, 0)
    src_hi = min(hi, mel.n_frames)
    if src_lo < src_hi:
        out[:, src_lo - lo : src_hi - lo] = mel.bins[:, src_lo:src_hi]
    return MelContext(window=out, frame_index=frame_index, fps=fps)


def frame_energy(mel: MelSpectrogram, frame_index: int, fps: float) -> float:
    """Mean linear mel energy over the columns whose centres fall inside the
    video frame's time span.  Falls back to the nearest column when the span
    contains none."""
    if frame_index < 0:
        raise InvalidFrameError(f"frame_index must be >= 0, got {frame_index}")
    cfg = mel.config
    centres = np.arange(mel.n_frames) * cfg.hop_length + cfg.window_length / 2.0
    lo = frame_index / fps * cfg.sample_rate
    hi = (frame_index + 1) / fps * cfg.sample_rate
    mask = (centres >= lo) & (centres < hi)
    if not mask.any():
        idx = int(np.argmin(np.abs(centres - (lo + hi) / 2.0)))
        mask = np.zeros(mel.n_frames, dtype=bool)
        mask[idx] = True
    return float(np.exp(mel.bins[:, mask]).mean())


def synthesize_test_audio(
    segments: list[tuple[float, float, float]],
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> AudioClip:
    """Concatenated sine segments (frequency_hz, amplitude, duration_s).

    Phase is continuous across segment boundaries.  The result is peak
    normalized so the loudest sample equals min(1, max requested amplitude);
    an all-silent spec stays exactly zero.
    """
    if not segments:
        raise InvalidConfigError("need at least one segment")
    pieces = []
    phase = 0.0
    for freq, amp, dur in segments:
        if dur <= 0:
            raise InvalidConfigError(f"segment duration must be positive, got {dur}")
        if amp < 0:
            raise InvalidConfigError(f"segment amplitude must be >= 0, got {amp}")
        n = int(round(dur * sample_rate))
        phases = phase + 2.0 * np.pi * freq / sample_rate * np.arange(n)
        pieces.append(amp * np.sin(phases))
        phase = (phase + 2.0 * np.pi * freq / sample_rate * n) % (2.0 * np.pi)
    samples = np.concatenate(pieces)
    peak = np.max(np.abs(samples)) if len(samples) else 0.0
    if peak > 0:
        target = min(1.0, max(a for _, a, _ in segments))
        samples = samples * (target / peak)
    return AudioClip(samples=samples, sample_rate=sample_rate)
