"""Acoustic front-end: 120-dim log mel-filterbank features.

Each frame is 40 static log-mel energies plus first (delta) and second
(delta-delta) time derivatives, concatenated to 120 columns. Deltas use the
standard +-2 frame regression with edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class FeatureError(ValueError):
    """Bad input to the feature front-end (wrong rate, too short, ...)."""


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    fmin_hz: float = 50.0
    log_floor: float = 1e-10

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fmax_hz(self) -> float:
        return self.sample_rate / 2.0


DEFAULT_FRAME_CONFIG = FrameConfig()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrameConfig = DEFAULT_FRAME_CONFIG) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / (ctr - lo)
        down = (hi - fft_freqs) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_freqs(cfg: FrameConfig = DEFAULT_FRAME_CONFIG) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    return edges[1:-1]


def frame_signal(waveform: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError(f"waveform must be 1-D, got shape {x.shape}")
    win, hop = cfg.win_length, cfg.hop_length
    if x.size < win:
        raise FeatureError(f"waveform has {x.size} samples, need at least one {win}-sample window")
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft_power(waveform: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Power spectrogram, shape (T, n_fft//2 + 1), Hann window."""
    frames = frame_signal(waveform, cfg)
    window = np.hanning(cfg.win_length)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    return np.abs(spec) ** 2


def mel_power(waveform: np.ndarray, cfg: FrameConfig = DEFAULT_FRAME_CONFIG) -> np.ndarray:
    return stft_power(waveform, cfg) @ mel_filterbank(cfg).T


def log_mel(waveform: np.ndarray, cfg: FrameConfig = DEFAULT_FRAME_CONFIG) -> np.ndarray:
    return np.log(mel_power(waveform, cfg) + cfg.log_floor)


def delta(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Delta regression over +-``width`` frames with edge replication.

    d_t = sum_j j * (x_{t+j} - x_{t-j}) / (2 * sum_j j^2). Linear in the
    input, so scaling the features scales the deltas by the same factor.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise FeatureError(f"expected a 2-D feature matrix, got shape {feats.shape}")
    t = feats.shape[0]
    denom = 2.0 * sum(j * j for j in range(1, width + 1))
    out = np.zeros_like(feats)
    for j in range(1, width + 1):
        fwd = feats[np.minimum(np.arange(t) + j, t - 1)]
        bwd = feats[np.maximum(np.arange(t) - j, 0)]
        out += j * (fwd - bwd)
    return out / denom


def compute_features(
    waveform: np.ndarray, rate: int, cfg: FrameConfig = DEFAULT_FRAME_CONFIG
) -> np.ndarray:
    """Full 120-dim feature matrix: [static | delta | delta-delta]."""
    if rate != cfg.sample_rate:
        raise FeatureError(f"waveform rate {rate} != configured rate {cfg.sample_rate}")
    static = log_mel(waveform, cfg)
    d1 = delta(static)
    d2 = delta(d1)
    return np.concatenate([static, d1, d2], axis=1)
