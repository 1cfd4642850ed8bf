"""Deterministic toy multi-speaker synthesizer.

Realizes z = G(X, c_text): a speaker embedding X picks bounded voice
parameters through a frozen affine-then-squash map, the shared character
template engine renders a waveform, and a fixed-iteration Griffin-Lim pass
turns mel spectrograms back into audio. There is no sampling anywhere, so
identical inputs always give identical outputs; any identity the embedding
carries survives into the waveform by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features, voice
from .features import DEFAULT_FRAME_CONFIG, FrameConfig
from .matio import read_matrix, write_matrix
from .voice import FRAMES_PER_CHAR, VoiceParams

# Squash ranges for the three voice parameters. A zero embedding lands on
# the midpoints: f0 230 Hz, formant scale 1.05, brightness 0.04.
F0_BOUNDS = (60.0, 400.0)
FORMANT_BOUNDS = (0.7, 1.4)
BRIGHTNESS_BOUNDS = (0.0, 0.08)

MEL_LOG_SCALE = 1e-8  # mel = log1p(power / MEL_LOG_SCALE), kept nonnegative


class SynthesisParameterError(ValueError):
    """Invalid synthesis request or voice map."""


def midpoint_voice() -> VoiceParams:
    return VoiceParams(
        f0_hz=0.5 * (F0_BOUNDS[0] + F0_BOUNDS[1]),
        formant_scale=0.5 * (FORMANT_BOUNDS[0] + FORMANT_BOUNDS[1]),
        brightness=0.5 * (BRIGHTNESS_BOUNDS[0] + BRIGHTNESS_BOUNDS[1]),
    )


@dataclass(frozen=True, eq=False)
class VoiceMap:
    """Frozen linear map from embedding space to pre-squash voice coordinates."""

    weights: np.ndarray  # (3, embedding_dim), rows: f0, formant, brightness

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[0] != 3:
            raise SynthesisParameterError(f"voice map weights must be (3, d), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise SynthesisParameterError("voice map weights must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _squash(z: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return lo + (hi - lo) * 0.5 * (np.tanh(z) + 1.0)


def _unsquash(value: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    unit = 2.0 * (value - lo) / (hi - lo) - 1.0
    unit = float(np.clip(unit, -1.0 + 1e-9, 1.0 - 1e-9))
    return float(np.arctanh(unit))


def embed_to_voice(vmap: VoiceMap, embedding: np.ndarray) -> VoiceParams:
    """Bounded voice parameters for one embedding (no intercept: 0 -> midpoints)."""
    x = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if x.shape[0] != vmap.dim:
        raise SynthesisParameterError(f"embedding dim {x.shape[0]} != voice map dim {vmap.dim}")
    if not np.all(np.isfinite(x)):
        raise SynthesisParameterError("embedding must be finite")
    z = vmap.weights @ x
    return VoiceParams(
        f0_hz=float(_squash(z[0], F0_BOUNDS)),
        formant_scale=float(_squash(z[1], FORMANT_BOUNDS)),
        brightness=float(_squash(z[2], BRIGHTNESS_BOUNDS)),
    )


def fit_voice_map(embeddings: np.ndarray, params: list[VoiceParams]) -> VoiceMap:
    """Least-squares fit of the pre-squash coordinates onto embeddings.

    Targets are the arctanh-normalized genuine voice parameters, so for
    genuine speakers embed_to_voice approximately inverts to their true
    voice. The map has no intercept by design.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != len(params) or len(params) == 0:
        raise SynthesisParameterError(
            f"need matching embeddings (n, d) and n >= 1 params, got {e.shape} and {len(params)}"
        )
    targets = np.array(
        [
            [
                _unsquash(p.f0_hz, F0_BOUNDS),
                _unsquash(p.formant_scale, FORMANT_BOUNDS),
                _unsquash(p.brightness, BRIGHTNESS_BOUNDS),
            ]
            for p in params
        ]
    )
    coef, *_ = np.linalg.lstsq(e, targets, rcond=None)
    return VoiceMap(weights=coef.T)


def save_voice_map(vmap: VoiceMap, path) -> None:
    write_matrix(path, vmap.weights)


def load_voice_map(path) -> VoiceMap:
    return VoiceMap(weights=read_matrix(path))


@dataclass(frozen=True, eq=False)
class SynthesisRequest:
    text: str
    embedding: np.ndarray
    frame_cfg: FrameConfig = field(default=DEFAULT_FRAME_CONFIG)

    def __post_init__(self):
        if not self.text:
            raise SynthesisParameterError("request text must be non-empty")
        if not np.all(np.isfinite(np.asarray(self.embedding, dtype=np.float64))):
            raise SynthesisParameterError("request embedding must be finite")


def synth_mel(
    vmap: VoiceMap,
    req: SynthesisRequest,
    frames_per_char: int = FRAMES_PER_CHAR,
) -> np.ndarray:
    """Mel spectrogram of the request, exactly len(text) * frames_per_char frames.

    Uses the same per-character spectral templates as corpus generation,
    modulated by the voice parameters decoded from the embedding. Entries are
    log1p-compressed powers, hence nonnegative.
    """
    params = embed_to_voice(vmap, req.embedding)
    wave = voice.render_waveform(req.text, params, req.frame_cfg, frames_per_char)
    power = features.mel_power(wave, req.frame_cfg)
    mel = np.log1p(power / MEL_LOG_SCALE)
    assert mel.shape == (len(req.text) * frames_per_char, req.frame_cfg.n_mels)
    return mel


def _stft_complex(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    frames = features.frame_signal(x, cfg)
    window = np.hanning(cfg.win_length)
    return np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)


def _istft(spec: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Weighted overlap-add inverse of _stft_complex (same Hann window)."""
    win = np.hanning(cfg.win_length)
    t = spec.shape[0]
    hop, wl = cfg.hop_length, cfg.win_length
    segs = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :wl] * win
    n_out = (t - 1) * hop + wl
    y = np.zeros(n_out)
    norm = np.zeros(n_out)
    for k in range(t):
        lo = k * hop
        y[lo : lo + wl] += segs[k]
        norm[lo : lo + wl] += win**2
    return y / np.maximum(norm, 1e-12)


def vocode(
    mel: np.ndarray,
    frame_cfg: FrameConfig = DEFAULT_FRAME_CONFIG,
    n_iters: int = 32,
) -> np.ndarray:
    """Waveform from a mel spectrogram by fixed-iteration phase reconstruction.

    The mel is inverted to a linear power spectrogram through the filterbank
    pseudoinverse, then Griffin-Lim refines phases from a zero-phase start.
    Fully deterministic; an all-zero mel yields an all-zero waveform.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != frame_cfg.n_mels:
        raise SynthesisParameterError(
            f"mel must be (T, {frame_cfg.n_mels}), got shape {mel.shape}"
        )
    if np.any(mel < 0) or not np.all(np.isfinite(mel)):
        raise SynthesisParameterError("mel entries must be finite and nonnegative")
    mel_pow = np.expm1(mel) * MEL_LOG_SCALE
    fb = features.mel_filterbank(frame_cfg)
    # adjoint spreading keeps every covered bin strictly positive, then
    # multiplicative updates drive fb @ lin_pow back to the target mel without
    # the power inflation a clipped pseudoinverse suffers from
    lin_pow = mel_pow @ fb
    col = fb.sum(axis=0)
    covered = col > 0
    tiny = 1e-12 * max(float(mel_pow.max()), 1e-300)
    for _ in range(30):
        recon = lin_pow @ fb.T
        ratio = mel_pow / np.maximum(recon, tiny)
        lin_pow = lin_pow * ((ratio @ fb) / np.maximum(col, 1e-12))
        lin_pow[:, ~covered] = 0.0
    # silent guard frames keep nonzero content away from the overlap-add
    # edges, where a lone window taper makes the 1/sum(win^2) division blow
    # up on phase-inconsistent estimates
    guard = np.zeros((1, lin_pow.shape[1]))
    mag = np.vstack([guard, np.sqrt(lin_pow), guard])
    spec = mag.astype(np.complex128)  # zero-phase start
    for _ in range(n_iters):
        est = _stft_complex(_istft(spec, frame_cfg), frame_cfg)
        phase = est / np.maximum(np.abs(est), 1e-12)
        spec = mag * phase
    hop = frame_cfg.hop_length
    wave = _istft(spec, frame_cfg)[hop:-hop]
    # clip the rare crest excursions instead of rescaling: absolute energy is
    # part of the voice (brightness floor), so a per-utterance renormalization
    # would erase identity cues
    return np.clip(wave, -1.0, 1.0)


def synth_utterance(
    vmap: VoiceMap,
    req: SynthesisRequest,
    frames_per_char: int = FRAMES_PER_CHAR,
    gl_iters: int = 32,
) -> tuple[VoiceParams, np.ndarray, np.ndarray]:
    """Full request pipeline: (voice params, mel, vocoded waveform)."""
    params = embed_to_voice(vmap, req.embedding)
    mel = synth_mel(vmap, req, frames_per_char)
    wave = vocode(mel, req.frame_cfg, gl_iters)
    return params, mel, wave
