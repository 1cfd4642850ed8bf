"""Sanitizing ghost vectors by SVD factor transplantation.

A stack of converged ghost vectors X = U S V^T keeps its singular value
spectrum but swaps both orthogonal factors for those of the nearest genuine
speaker's template stack: X' = U_t diag(S_ghost) V_t^T. The spectrum (the
energy profile) survives; the subspace geometry is replaced wholesale, which
strips the adversarial structure the attack imprinted on the embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import asr
from .attack import GhostBundle, GhostVec
from .corpus import Manifest
from .matio import read_matrix, read_tsv, write_matrix, write_tsv

INDEX_NAME = "index.tsv"


class InsufficientGhostsError(ValueError):
    """Fewer converged ghost vectors than the stack requires."""


class FactorShapeError(ValueError):
    """Matrices or SVD factors that cannot be recombined."""


class TemplateBankError(ValueError):
    """Template bank construction or IO failure."""


@dataclass(frozen=True, eq=False)
class SVDFactors:
    u: np.ndarray  # (n, n) orthogonal
    s: np.ndarray  # (min(n, d),) nonnegative, descending
    vt: np.ndarray  # (d, d) orthogonal

    def __post_init__(self):
        n, d = self.u.shape[0], self.vt.shape[0]
        if self.u.shape != (n, n) or self.vt.shape != (d, d):
            raise FactorShapeError("u and vt must be square (full-matrices decomposition)")
        if self.s.shape != (min(n, d),):
            raise FactorShapeError(f"expected {min(n, d)} singular values, got {self.s.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.vt.shape[0]


def svd(x: np.ndarray) -> SVDFactors:
    """Full-matrices SVD of an (n, d) embedding stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise FactorShapeError(f"expected a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FactorShapeError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(x, full_matrices=True)
    return SVDFactors(u=u, s=s, vt=vt)


def reconstruct(f: SVDFactors) -> np.ndarray:
    n, d = f.shape
    s_rect = np.zeros((n, d))
    np.fill_diagonal(s_rect, f.s)
    return f.u @ s_rect @ f.vt


def transfer(ghost: SVDFactors, template: SVDFactors) -> np.ndarray:
    """Recombine the template's orthogonal factors with the ghost spectrum."""
    if ghost.shape != template.shape:
        raise FactorShapeError(
            f"ghost stack shape {ghost.shape} != template stack shape {template.shape}"
        )
    n, d = template.shape
    s_rect = np.zeros((n, d))
    np.fill_diagonal(s_rect, ghost.s)
    return template.u @ s_rect @ template.vt


def stack_ghostvecs(ghosts, n: int) -> np.ndarray:
    """First ``n`` converged ghosts' pooled vectors as matrix rows.

    Accepts a GhostBundle or any iterable of GhostVec; rows keep the input
    (provenance) order and skip failed variants.
    """
    if n < 1:
        raise FactorShapeError("stack size must be >= 1")
    if isinstance(ghosts, GhostBundle):
        rows = [ghosts.pooled[i] for i in range(ghosts.count)]
    else:
        rows = [g.pooled for g in ghosts if isinstance(g, GhostVec) and g.succeeded]
    if len(rows) < n:
        raise InsufficientGhostsError(
            f"stack needs {n} converged ghost vectors, "
            f"have {len(rows)} ({n - len(rows)} short)"
        )
    return np.stack(rows[:n]).astype(np.float64)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity; degenerate zero vectors score maximally far."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 2.0
    return float(1.0 - np.dot(a, b) / (na * nb))


@dataclass(frozen=True, eq=False)
class SpeakerTemplate:
    speaker_id: str
    matrix: np.ndarray  # (n_rows, d) pooled genuine embeddings

    @property
    def row_mean(self) -> np.ndarray:
        return self.matrix.mean(axis=0)


@dataclass(frozen=True, eq=False)
class TemplateBank:
    templates: tuple[SpeakerTemplate, ...]

    def __post_init__(self):
        ids = [t.speaker_id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise TemplateBankError("duplicate speaker in template bank")
        shapes = {t.matrix.shape for t in self.templates}
        if len(shapes) > 1:
            raise TemplateBankError(f"template stacks disagree in shape: {sorted(shapes)}")

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(t.speaker_id for t in self.templates)

    def get(self, speaker_id: str) -> SpeakerTemplate:
        for t in self.templates:
            if t.speaker_id == speaker_id:
                return t
        raise TemplateBankError(f"no template for speaker {speaker_id}")


def nearest_template(ghost_matrix: np.ndarray, bank: TemplateBank) -> tuple[str, np.ndarray]:
    """Bank speaker whose template row-mean is cosine-nearest the ghost row-mean.

    Exact distance ties resolve to the lexicographically smallest speaker id,
    so selection is deterministic.
    """
    if not bank.templates:
        raise TemplateBankError("empty template bank")
    ghost_mean = np.asarray(ghost_matrix, dtype=np.float64).mean(axis=0)
    best_id, best_dist = None, np.inf
    for sid in bank.speaker_ids:
        dist = cosine_distance(ghost_mean, bank.get(sid).row_mean)
        if dist < best_dist:
            best_id, best_dist = sid, dist
    return best_id, bank.get(best_id).matrix


def pool_speaker_embedding(x: np.ndarray) -> np.ndarray:
    """Row-wise mean of an embedding stack.

    Per-utterance synthesis that wants one row per sentence can index the
    stack directly; this pools the whole stack to a single speaker vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise FactorShapeError(f"expected a non-empty (n, d) stack, got shape {x.shape}")
    return x.mean(axis=0)


def speaker_mean_embedding(
    model: asr.TrainedModel, manifest: Manifest, speaker_id: str
) -> np.ndarray:
    """Mean of pooled encoder embeddings over a speaker's utterances."""
    entries = manifest.by_speaker(speaker_id)
    if not entries:
        raise TemplateBankError(f"manifest has no utterances for {speaker_id}")
    feats = [manifest.load_features(e) for e in entries]
    pooled = [asr.pooled_embedding(h) for h in asr.encode_batch(model, feats)]
    return np.mean(pooled, axis=0)


def _resample_rows(entries: list, n: int) -> list:
    """Exactly n entries: truncate when long, cycle with repetition when short."""
    if len(entries) >= n:
        return entries[:n]
    reps = [entries[i % len(entries)] for i in range(n)]
    return reps


def build_template_bank(
    model: asr.TrainedModel,
    manifest: Manifest,
    speaker_ids,
    n_rows: int,
    encode_chunk: int = 32,
) -> TemplateBank:
    """Stack pooled genuine embeddings per template speaker.

    Each speaker contributes exactly ``n_rows`` rows so template factors line
    up with the ghost stack: the first n_rows utterances in utterance-id
    order, cycled with repetition if the speaker has fewer.
    """
    templates = []
    for sid in sorted(speaker_ids):
        entries = sorted(manifest.by_speaker(sid), key=lambda e: e.utt_id)
        if not entries:
            raise TemplateBankError(f"manifest has no utterances for {sid}")
        entries = _resample_rows(entries, n_rows)
        rows = []
        for lo in range(0, n_rows, encode_chunk):
            feats = [manifest.load_features(e) for e in entries[lo : lo + encode_chunk]]
            rows.extend(asr.pooled_embedding(h) for h in asr.encode_batch(model, feats))
        templates.append(SpeakerTemplate(speaker_id=sid, matrix=np.stack(rows)))
    return TemplateBank(templates=tuple(templates))


def save_template_bank(bank: TemplateBank, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for sid in bank.speaker_ids:
        t = bank.get(sid)
        rel = f"{sid}.fmat"
        write_matrix(out / rel, t.matrix)
        rows.append((sid, rel, t.matrix.shape[0]))
    write_tsv(out / INDEX_NAME, rows)


def load_template_bank(bank_dir) -> TemplateBank:
    base = Path(bank_dir)
    index = base / INDEX_NAME
    if not index.exists():
        raise TemplateBankError(f"no {INDEX_NAME} under {base}")
    templates = []
    for row in read_tsv(index):
        if len(row) != 3:
            raise TemplateBankError(f"bad index row: {row!r}")
        sid, rel, n_rows = row[0], row[1], int(row[2])
        mat = read_matrix(base / rel)
        if mat.shape[0] != n_rows:
            raise TemplateBankError(f"template {sid}: index says {n_rows} rows, file has {mat.shape[0]}")
        templates.append(SpeakerTemplate(speaker_id=sid, matrix=mat))
    return TemplateBank(templates=tuple(templates))
