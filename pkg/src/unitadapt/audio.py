"""Waveform <-> log-mel conversion.

The inverse direction is a lossy Griffin-Lim reconstruction meant only for
listening to generated mels.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import resample_poly

from .exceptions import ConfigurationError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 22050
    n_mels: int = 80
    hop_length: int = 256
    win_length: int = 1024
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        vals = (self.sample_rate_hz, self.n_mels, self.hop_length, self.win_length, self.log_floor)
        if any(v <= 0 for v in vals) or self.fmin < 0 or self.fmax <= self.fmin:
            raise ConfigurationError(f"invalid mel configuration {self}")
        if self.hop_length > self.win_length:
            raise ConfigurationError("hop length must not exceed the window length")
        if self.fmax > self.sample_rate_hz / 2:
            raise ConfigurationError("fmax exceeds the Nyquist frequency")

    @property
    def frame_rate_hz(self):
        return self.sample_rate_hz / self.hop_length

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular HTK-style filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    n_bins = cfg.win_length // 2 + 1
    fft_freqs = np.linspace(0.0, cfg.sample_rate_hz / 2, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs[None] - lower) / np.maximum(center - lower, 1e-10)
    down = (upper - fft_freqs[None]) / np.maximum(upper - center, 1e-10)
    fb = np.maximum(0.0, np.minimum(up, down))
    # equal-area normalisation
    fb *= (2.0 / np.maximum(upper - lower, 1e-10))
    return fb


def n_frames(n_samples, cfg):
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def _frames(y, cfg):
    t = n_frames(len(y), cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    return y[idx]


def stft_magnitude(y, cfg):
    window = np.hanning(cfg.win_length + 1)[:-1]
    return np.abs(np.fft.rfft(_frames(y, cfg) * window, axis=-1))


def wav_to_mel(waveform, cfg=MelConfig(), sample_rate_hz=None):
    """Log-mel spectrogram ``[T, n_mels]`` with ``T = (samples - win) // hop + 1``."""
    y = np.asarray(waveform, dtype=np.float64)
    if y.ndim == 2:
        y = y.mean(axis=1)
    if sample_rate_hz is not None and sample_rate_hz != cfg.sample_rate_hz:
        g = np.gcd(int(sample_rate_hz), int(cfg.sample_rate_hz))
        y = resample_poly(y, cfg.sample_rate_hz // g, int(sample_rate_hz) // g)
    if len(y) < cfg.win_length:
        raise DataError(f"audio of {len(y)} samples is shorter than one analysis window")
    if not np.any(y):
        logger.warning("audio is silent; every mel frame sits at the log floor")
    mag = stft_magnitude(y, cfg)
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def griffin_lim(log_mel, cfg=MelConfig(), n_iter=32, seed=0):
    """Lossy waveform estimate from a log-mel via Griffin-Lim phase recovery."""
    fb = mel_filterbank(cfg)
    mel = np.exp(np.asarray(log_mel, dtype=np.float64))
    mag = np.maximum(mel @ np.linalg.pinv(fb).T, 0.0)
    t = len(mag)
    n = cfg.win_length + cfg.hop_length * (t - 1)
    window = np.hanning(cfg.win_length + 1)[:-1]
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    norm = np.bincount(idx.ravel(), weights=np.tile(window ** 2, t), minlength=n)
    # edge samples covered only by window tails would be amplified without bound
    norm = np.maximum(norm, 0.1 * norm.max())
    y = np.zeros(n)
    for _ in range(n_iter):
        frames = np.fft.irfft(mag * phase, n=cfg.win_length, axis=-1) * window
        y = np.zeros(n)
        np.add.at(y, idx, frames)
        y /= norm
        spec = np.fft.rfft(y[idx] * window, axis=-1)
        phase = np.exp(1j * np.angle(spec))
    return y.astype(np.float32)
