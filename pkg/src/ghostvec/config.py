"""Pipeline configuration: a flat, typed `section.key = value` text format.

Every key has a schema entry with a type and default; unknown keys are
rejected so typos fail loudly. `render_config` produces a canonical form
used for stage digests, making cache invalidation content-addressed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Unparseable, unknown, or invalid configuration."""


@dataclass(frozen=True)
class CorpusCfg:
    n_speakers: int = 26
    utts_per_speaker: int = 110
    transcript_len_min: int = 5
    transcript_len_max: int = 20
    min_separation: float = 0.06
    train_speakers: int = 20


@dataclass(frozen=True)
class AsrCfg:
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    noise_examples: int = 64


@dataclass(frozen=True)
class SvCfg:
    hidden_dim: int = 64
    embed_dim: int = 32
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64


@dataclass(frozen=True)
class AttackCfg:
    n_targets: int = 6
    variants: int = 100
    epsilon: float = 0.05
    max_iters: int = 50
    frames: int = 64
    noise_std: float = 1.0
    batch_size: int = 40
    max_extra_variants: int = 300


@dataclass(frozen=True)
class SvdCfg:
    stack_rows: int = 100


@dataclass(frozen=True)
class SynthCfg:
    sentences_per_target: int = 20
    text_len_min: int = 5
    text_len_max: int = 20
    gl_iters: int = 32


@dataclass(frozen=True)
class MetricsCfg:
    p_target: float = 0.01
    enroll_utts: int = 10


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_dir: str = "out"
    corpus: CorpusCfg = field(default_factory=CorpusCfg)
    asr: AsrCfg = field(default_factory=AsrCfg)
    sv: SvCfg = field(default_factory=SvCfg)
    attack: AttackCfg = field(default_factory=AttackCfg)
    svd: SvdCfg = field(default_factory=SvdCfg)
    synth: SynthCfg = field(default_factory=SynthCfg)
    metrics: MetricsCfg = field(default_factory=MetricsCfg)


_SECTIONS = {
    "corpus": CorpusCfg,
    "asr": AsrCfg,
    "sv": SvCfg,
    "attack": AttackCfg,
    "svd": SvdCfg,
    "synth": SynthCfg,
    "metrics": MetricsCfg,
}

_GLOBALS = {"seed": int, "out_dir": str}


def _schema() -> dict[str, type]:
    schema: dict[str, type] = dict(_GLOBALS)
    for name, cls in _SECTIONS.items():
        for f in fields(cls):
            schema[f"{name}.{f.name}"] = f.type if isinstance(f.type, type) else {
                "int": int,
                "float": float,
                "str": str,
            }[f.type]
    return schema


def _coerce(key: str, raw: str, typ: type):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(text: str) -> PipelineConfig:
    schema = _schema()
    values: dict[str, object] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, schema[key])

    kwargs: dict[str, object] = {}
    for g in _GLOBALS:
        if g in values:
            kwargs[g] = values.pop(g)
    for name, cls in _SECTIONS.items():
        section = {}
        for f in fields(cls):
            full = f"{name}.{f.name}"
            if full in values:
                section[f.name] = values.pop(full)
        kwargs[name] = cls(**section)
    cfg = PipelineConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def validate_config(cfg: PipelineConfig) -> None:
    c = cfg.corpus
    if c.n_speakers < 2:
        raise ConfigError("corpus.n_speakers must be >= 2")
    if c.utts_per_speaker < 1:
        raise ConfigError("corpus.utts_per_speaker must be >= 1")
    if not 1 <= c.transcript_len_min <= c.transcript_len_max:
        raise ConfigError("corpus transcript length range invalid")
    if not 1 <= c.train_speakers < c.n_speakers:
        raise ConfigError("corpus.train_speakers must leave at least one template speaker")
    if cfg.asr.noise_examples < 0:
        raise ConfigError("asr.noise_examples must be >= 0")
    if cfg.attack.n_targets < 1 or cfg.attack.n_targets > c.train_speakers:
        raise ConfigError("attack.n_targets must be in [1, corpus.train_speakers]")
    if cfg.attack.variants < 1:
        raise ConfigError("attack.variants must be >= 1")
    if cfg.svd.stack_rows < 1:
        raise ConfigError("svd.stack_rows must be >= 1")
    if cfg.synth.sentences_per_target < 1:
        raise ConfigError("synth.sentences_per_target must be >= 1")
    if cfg.synth.sentences_per_target > cfg.svd.stack_rows:
        # per-sentence embeddings come from stack rows, one row per sentence
        raise ConfigError("synth.sentences_per_target cannot exceed svd.stack_rows")
    if not 1 <= cfg.synth.text_len_min <= cfg.synth.text_len_max:
        raise ConfigError("synth text length range invalid")
    if not 0.0 < cfg.metrics.p_target < 1.0:
        raise ConfigError("metrics.p_target must be in (0, 1)")
    if not 1 <= cfg.metrics.enroll_utts <= c.utts_per_speaker:
        raise ConfigError("metrics.enroll_utts must fit within utts_per_speaker")


def render_config(cfg: PipelineConfig) -> str:
    """Canonical text form: every key, sorted, fully explicit."""
    lines = [f"out_dir = {cfg.out_dir}", f"seed = {cfg.seed}"]
    for name in sorted(_SECTIONS):
        section = getattr(cfg, name)
        for f in sorted(fields(section), key=lambda f: f.name):
            lines.append(f"{name}.{f.name} = {getattr(section, f.name)!r}")
    return "\n".join(lines) + "\n"


def section_digest(cfg: PipelineConfig, sections: tuple[str, ...]) -> str:
    """Digest of the seed plus the named config sections (cache key input)."""
    lines = [f"seed = {cfg.seed}"]
    for name in sorted(sections):
        section = getattr(cfg, name)
        for f in sorted(fields(section), key=lambda f: f.name):
            lines.append(f"{name}.{f.name} = {getattr(section, f.name)!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()
