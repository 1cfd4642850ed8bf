"""Parametric voice engine shared by corpus generation and synthesis.

A speaker is a harmonic source at ``f0`` filtered by per-character spectral
envelopes whose bump positions are warped by ``formant_scale``, plus a
broadband noise component at amplitude ``brightness``. Corpus generation
draws the noise from a per-utterance RNG; synthesis reuses a fixed buffer so
the whole text-to-speech path is sampling-free.

The per-character envelope bank is built once from a module constant seed,
so corpus audio and synthesized audio share the same character acoustics.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .features import FrameConfig, DEFAULT_FRAME_CONFIG

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
FRAMES_PER_CHAR = 8

_TEMPLATE_SEED = 271828
_FIXED_NOISE_SEED = 314159
_FIXED_NOISE_LEN = 1 << 19


class UnknownCharacterError(ValueError):
    """Character outside the fixed alphabet."""


@dataclass(frozen=True)
class VoiceParams:
    f0_hz: float
    formant_scale: float
    brightness: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f0_hz, self.formant_scale, self.brightness])


@lru_cache(maxsize=1)
def char_templates() -> dict[str, dict[str, np.ndarray]]:
    """Per-character spectral bumps: centers (Hz), widths (Hz), amplitudes."""
    rng = np.random.default_rng(_TEMPLATE_SEED)
    bank: dict[str, dict[str, np.ndarray]] = {}
    for ch in ALPHABET:
        centers = np.sort(rng.uniform(300.0, 3600.0, size=3))
        widths = rng.uniform(80.0, 260.0, size=3)
        amps = rng.uniform(0.4, 1.0, size=3)
        if ch == " ":
            amps = amps * 0.06  # near-silent gap between words
        bank[ch] = {"centers": centers, "widths": widths, "amps": amps}
    return bank


@lru_cache(maxsize=1)
def _fixed_noise() -> np.ndarray:
    return np.random.default_rng(_FIXED_NOISE_SEED).standard_normal(_FIXED_NOISE_LEN)


def char_envelope(ch: str, freqs_hz: np.ndarray, formant_scale: float) -> np.ndarray:
    """Spectral envelope of one character at the given frequencies."""
    if ch not in ALPHABET:
        raise UnknownCharacterError(f"character {ch!r} is not in the engine alphabet")
    tpl = char_templates()[ch]
    f = np.asarray(freqs_hz, dtype=np.float64)[..., None]
    centers = tpl["centers"] * formant_scale
    widths = tpl["widths"] * formant_scale
    bumps = tpl["amps"] * np.exp(-0.5 * ((f - centers) / widths) ** 2)
    return bumps.sum(axis=-1) + 0.02


def waveform_length(n_chars: int, cfg: FrameConfig, frames_per_char: int = FRAMES_PER_CHAR) -> int:
    # chosen so compute_features yields exactly n_chars * frames_per_char frames
    n_frames = n_chars * frames_per_char
    return cfg.win_length + (n_frames - 1) * cfg.hop_length


def render_waveform(
    text: str,
    params: VoiceParams,
    cfg: FrameConfig = DEFAULT_FRAME_CONFIG,
    frames_per_char: int = FRAMES_PER_CHAR,
    noise_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render ``text`` with the given voice, peak-normalized to 0.95.

    ``noise_rng`` supplies the noise component; when None a fixed buffer is
    used instead, making the rendering fully deterministic.
    """
    if not text:
        raise UnknownCharacterError("text must be non-empty")
    bad = sorted(set(text) - set(ALPHABET))
    if bad:
        raise UnknownCharacterError(f"characters {bad} are not in the engine alphabet")

    n_total = waveform_length(len(text), cfg, frames_per_char)
    spc = frames_per_char * cfg.hop_length  # samples per character
    sr = float(cfg.sample_rate)
    f0 = max(params.f0_hz, 1.0)
    n_harm = max(1, int(0.95 * cfg.fmax_hz / f0))
    harmonics = f0 * np.arange(1, n_harm + 1)

    # harmonic amplitudes per character, sqrt(envelope) so power follows it
    amps = np.stack(
        [np.sqrt(char_envelope(ch, harmonics, params.formant_scale)) for ch in text]
    )

    t = np.arange(n_total) / sr
    phase0 = np.random.default_rng(_TEMPLATE_SEED + 1).uniform(
        0.0, 2.0 * np.pi, size=(n_harm, 1)
    )  # fixed phase dispersal, keeps the crest factor down
    sines = np.sin(2.0 * np.pi * harmonics[:, None] * t[None, :] + phase0)

    # the tail past the last grid cell extends the final character so the
    # analysis window count comes out exact
    wave = np.empty(n_total)
    for i in range(len(text)):
        lo = i * spc
        hi = n_total if i == len(text) - 1 else (i + 1) * spc
        wave[lo:hi] = amps[i] @ sines[:, lo:hi]

    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= 0.95 / peak

    if noise_rng is not None:
        noise = noise_rng.standard_normal(n_total)
    else:
        reps = int(np.ceil(n_total / _FIXED_NOISE_LEN))
        noise = np.tile(_fixed_noise(), reps)[:n_total]
    wave = wave + params.brightness * noise

    peak = np.max(np.abs(wave))
    if peak > 0.95:
        wave *= 0.95 / peak
    return wave
