"""Synthetic multi-speaker corpus: speaker profiles, waveforms, features.

Speakers are points in (f0, formant_scale, noise_floor) space kept apart by
a minimum separation, so a small model can learn to tell them apart. Every
utterance is rendered by the shared voice engine and stored as a 120-dim
feature matrix on disk; the manifest is a UTF-8 TSV with one line per
utterance: ``utt_id<TAB>speaker_id<TAB>feature_path<TAB>transcript``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matio
from .features import FrameConfig, DEFAULT_FRAME_CONFIG, compute_features
from .voice import ALPHABET, FRAMES_PER_CHAR, VoiceParams, render_waveform


class CorpusParameterError(ValueError):
    """Invalid corpus generation parameters."""


class ManifestFormatError(ValueError):
    """Malformed manifest file."""


class DanglingReferenceError(ValueError):
    """Manifest entry points at a feature file that does not exist."""


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0_base: float
    formant_scale: float
    noise_floor: float

    def __post_init__(self):
        if self.f0_base <= 0:
            raise CorpusParameterError(f"{self.speaker_id}: f0_base must be positive")
        if self.formant_scale <= 0:
            raise CorpusParameterError(f"{self.speaker_id}: formant_scale must be positive")
        if not 0 <= self.noise_floor < 1:
            raise CorpusParameterError(f"{self.speaker_id}: noise_floor must be in [0, 1)")

    def voice_params(self) -> VoiceParams:
        return VoiceParams(self.f0_base, self.formant_scale, self.noise_floor)


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker_id: str
    feature_path: str  # relative to the manifest directory
    transcript: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path = Path(".")

    @property
    def speaker_set(self) -> set[str]:
        return {e.speaker_id for e in self.entries}

    def speakers(self) -> list[str]:
        return sorted(self.speaker_set)

    def by_speaker(self, speaker_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.speaker_id == speaker_id]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.base_dir / entry.feature_path

    def load_features(self, entry: ManifestEntry) -> np.ndarray:
        return matio.read_matrix(self.resolve(entry))

    def subset(self, speaker_ids) -> "Manifest":
        keep = set(speaker_ids)
        return Manifest([e for e in self.entries if e.speaker_id in keep], self.base_dir)


def profile_distance(a: SpeakerProfile, b: SpeakerProfile) -> float:
    """Separation metric: euclidean in (log f0, formant_scale)."""
    return math.hypot(math.log(a.f0_base) - math.log(b.f0_base), a.formant_scale - b.formant_scale)


def make_speaker_profiles(
    n_speakers: int,
    seed: int,
    min_separation: float = 0.06,
    f0_range: tuple[float, float] = (90.0, 280.0),
    formant_range: tuple[float, float] = (0.85, 1.25),
    noise_range: tuple[float, float] = (0.003, 0.03),
) -> list[SpeakerProfile]:
    """Rejection-sample ``n_speakers`` profiles with pairwise separation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    profiles: list[SpeakerProfile] = []
    attempts = 0
    while len(profiles) < n_speakers:
        attempts += 1
        if attempts > 200 * n_speakers:
            raise CorpusParameterError(
                f"could not place {n_speakers} speakers at separation {min_separation}"
            )
        cand = SpeakerProfile(
            speaker_id=f"spk{len(profiles):02d}",
            f0_base=float(np.exp(rng.uniform(np.log(f0_range[0]), np.log(f0_range[1])))),
            formant_scale=float(rng.uniform(*formant_range)),
            noise_floor=float(np.exp(rng.uniform(np.log(noise_range[0]), np.log(noise_range[1])))),
        )
        if all(profile_distance(cand, p) >= min_separation for p in profiles):
            profiles.append(cand)
    return profiles


def make_transcript(rng: np.random.Generator, length_range: tuple[int, int]) -> str:
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    return "".join(rng.choice(list(ALPHABET), size=length))


def generate_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    transcript_len_range: tuple[int, int],
    seed: int,
    out_dir: str | Path,
    frame_cfg: FrameConfig = DEFAULT_FRAME_CONFIG,
    frames_per_char: int = FRAMES_PER_CHAR,
    min_separation: float = 0.06,
) -> tuple[Manifest, list[SpeakerProfile]]:
    """Generate waveforms + feature files on disk, return the manifest.

    Deterministic: every RNG stream is derived from ``seed`` plus fixed
    indices, so a rerun produces byte-identical feature files.
    """
    if n_speakers < 2:
        raise CorpusParameterError("need at least 2 speakers")
    if utts_per_speaker < 1:
        raise CorpusParameterError("need at least 1 utterance per speaker")
    lo, hi = transcript_len_range
    if not (1 <= lo <= hi):
        raise CorpusParameterError(f"bad transcript length range ({lo}, {hi})")

    out_dir = Path(out_dir)
    feats_dir = out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)

    profiles = make_speaker_profiles(n_speakers, seed, min_separation)
    entries: list[ManifestEntry] = []
    for si, prof in enumerate(profiles):
        for ui in range(utts_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, si, ui]))
            transcript = make_transcript(rng, (lo, hi))
            wave = render_waveform(
                transcript, prof.voice_params(), frame_cfg, frames_per_char, noise_rng=rng
            )
            feats = compute_features(wave, frame_cfg.sample_rate, frame_cfg)
            utt_id = f"{prof.speaker_id}_u{ui:03d}"
            rel = f"feats/{utt_id}.fmat"
            matio.write_matrix(out_dir / rel, feats)
            entries.append(ManifestEntry(utt_id, prof.speaker_id, rel, transcript))

    manifest = Manifest(entries, base_dir=out_dir)
    return manifest, profiles


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    matio.write_tsv(
        path,
        [(e.utt_id, e.speaker_id, e.feature_path, e.transcript) for e in manifest.entries],
    )


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    base = path.parent
    entries = []
    seen: set[str] = set()
    for ln, row in enumerate(matio.read_tsv(path), start=1):
        if len(row) != 4:
            raise ManifestFormatError(f"{path}:{ln}: expected 4 tab-separated fields")
        utt_id, speaker_id, feature_path, transcript = row
        if utt_id in seen:
            raise ManifestFormatError(f"{path}:{ln}: duplicate utt_id {utt_id!r}")
        seen.add(utt_id)
        if not (base / feature_path).exists():
            raise DanglingReferenceError(f"{path}:{ln}: missing feature file {feature_path!r}")
        entries.append(ManifestEntry(utt_id, speaker_id, feature_path, transcript))
    return Manifest(entries, base_dir=base)


def save_profiles(profiles: list[SpeakerProfile], path: str | Path) -> None:
    matio.write_tsv(
        path,
        [(p.speaker_id, repr(p.f0_base), repr(p.formant_scale), repr(p.noise_floor)) for p in profiles],
    )


def load_profiles(path: str | Path) -> list[SpeakerProfile]:
    rows = matio.read_tsv(path)
    return [SpeakerProfile(r[0], float(r[1]), float(r[2]), float(r[3])) for r in rows]
