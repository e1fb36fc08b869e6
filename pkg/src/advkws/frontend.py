"""Log-mel filterbank frontend and three-frame stacking."""

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

N_MELS = 40
STACK = 3
STACK_STRIDE = 2
FEATURE_DIM = N_MELS * STACK


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    window_samples: int = 400  # 25 ms
    hop_samples: int = 160  # 10 ms
    n_fft: int = 512
    n_mels: int = N_MELS
    fmin_hz: float = 125.0
    fmax_hz: float = 7500.0
    log_floor: float = 1e-12


@dataclass
class AudioClip:
    samples: np.ndarray  # int16
    sample_rate_hz: int = 16000
    channels: int = 1


@dataclass
class SpectralFrame:
    energies: np.ndarray
    frame_index: int
    hop_ms: int = 10
    window_ms: int = 25


@dataclass
class FeatureSequence:
    vectors: np.ndarray  # (n, 120)
    stride_ms: int = 20

    def __len__(self):
        return self.vectors.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config=FrontendConfig()):
    """n_mels + 2 edge frequencies in Hz; band m peaks at edges[m + 1]."""
    mels = np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(config=FrontendConfig()):
    """Triangular weights, shape (n_mels, n_fft // 2 + 1), unit peak height."""
    edges = mel_band_edges(config)
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate_hz / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples, config=FrontendConfig()):
    return (n_samples - config.window_samples) // config.hop_samples + 1


def compute_filterbank(clip, config=FrontendConfig()):
    """Frame the clip (25 ms Hann windows every 10 ms) into log-mel energies."""
    if clip.channels != 1:
        raise ConfigError(f"expected mono audio, got {clip.channels} channels")
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise ConfigError(
            f"expected {config.sample_rate_hz} Hz audio, got {clip.sample_rate_hz} Hz"
        )
    x = np.asarray(clip.samples, dtype=np.float64) / 32768.0
    if x.ndim != 1 or x.shape[0] < config.window_samples:
        raise DataError(
            f"clip has {x.shape[0]} samples, shorter than one {config.window_samples}-sample window"
        )
    n = frame_count(x.shape[0], config)
    idx = np.arange(config.window_samples)[None, :] + config.hop_samples * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(config.window_samples)
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    energies = np.log(power @ mel_filterbank(config).T + config.log_floor)
    return [SpectralFrame(energies=e, frame_index=i) for i, e in enumerate(energies)]


def stacked_length(n_frames):
    return (n_frames - STACK) // STACK_STRIDE + 1


def stack_frames(frames):
    """Concatenate frames (2j, 2j+1, 2j+2) into output vector j.

    Accepts a list of SpectralFrame or an (n, 40) array.
    """
    if isinstance(frames, np.ndarray):
        e = frames
    else:
        e = np.stack([f.energies for f in frames]) if len(frames) else np.zeros((0, N_MELS))
    if e.ndim != 2 or e.shape[0] < STACK:
        raise DataError(f"need at least {STACK} frames to stack, got {e.shape[0]}")
    m = stacked_length(e.shape[0])
    starts = STACK_STRIDE * np.arange(m)
    out = np.concatenate([e[starts + k] for k in range(STACK)], axis=1)
    return FeatureSequence(vectors=out)


def read_wav(path):
    """Read a mono PCM16 little-endian WAV file."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise ConfigError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            channels, rate = w.getnchannels(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: not a readable RIFF/PCM file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    if channels > 1:
        samples = samples.reshape(-1, channels)
    return AudioClip(samples=samples, sample_rate_hz=rate, channels=channels)


def write_wav(path, clip):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(clip.channels)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate_hz)
        w.writeframes(np.asarray(clip.samples, dtype="<i2").tobytes())


def wav_features(path, config=FrontendConfig()):
    return stack_frames(compute_filterbank(read_wav(path), config))
