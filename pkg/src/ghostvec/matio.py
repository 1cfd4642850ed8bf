"""File formats shared across the lab.

Matrix files (``.fmat``) are self-describing binary: a single ASCII header
line ``FMAT1 <rows> <cols>\\n`` followed by row-major little-endian float32
values. Everything that stores a matrix on disk (features, embeddings,
transfer outputs) uses this one format.

Audio files are 16 kHz mono 16-bit PCM WAV.

All writes go through :func:`atomic_write` (temp file + rename) so an
interrupted run never leaves a half-written artifact behind.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from scipy.io import wavfile

FMAT_MAGIC = b"FMAT1"


class MatrixFormatError(ValueError):
    """Raised for malformed matrix files."""


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def matrix_bytes(mat: np.ndarray) -> bytes:
    mat = np.asarray(mat)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise MatrixFormatError(f"expected a 1-D or 2-D array, got ndim={mat.ndim}")
    header = b"%s %d %d\n" % (FMAT_MAGIC, mat.shape[0], mat.shape[1])
    return header + np.ascontiguousarray(mat, dtype="<f4").tobytes()


def write_matrix(path: str | Path, mat: np.ndarray) -> None:
    atomic_write(path, matrix_bytes(mat))


def parse_matrix(blob: bytes) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0:
        raise MatrixFormatError("missing fmat header line")
    fields = blob[:nl].split()
    if len(fields) != 3 or fields[0] != FMAT_MAGIC:
        raise MatrixFormatError(f"bad fmat header: {blob[:nl]!r}")
    rows, cols = int(fields[1]), int(fields[2])
    body = blob[nl + 1 :]
    expect = rows * cols * 4
    if len(body) != expect:
        raise MatrixFormatError(f"fmat payload is {len(body)} bytes, expected {expect}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def read_matrix(path: str | Path) -> np.ndarray:
    """Load an ``.fmat`` file as float64."""
    return parse_matrix(Path(path).read_bytes())


def write_wav(path: str | Path, samples: np.ndarray, rate: int) -> None:
    """Write mono 16-bit PCM. ``samples`` are floats in [-1, 1]."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        wavfile.write(tmp, rate, pcm)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    rate, pcm = wavfile.read(path)
    if pcm.ndim != 1:
        raise MatrixFormatError(f"{path}: expected mono audio")
    return pcm.astype(np.float64) / 32767.0, int(rate)


def write_tsv(path: str | Path, rows: list[tuple]) -> None:
    lines = ["\t".join(str(c) for c in row) for row in rows]
    atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def read_tsv(path: str | Path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.split("\t") for line in text.splitlines() if line]
