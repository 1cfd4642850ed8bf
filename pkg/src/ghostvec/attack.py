"""Ghost vector extraction by iterative gradient-sign perturbation.

Starting from Gaussian noise features ("empty audio" in feature space),
each iteration takes one signed gradient step against the speaker-slot
cross-entropy until the frozen model's first decoded token is the target
speaker. The encoder output of the converged input is the ghost vector:
a speaker embedding obtained without any recording of the target.

The loop checks before it steps, so an input the model already labels as
the target converges at iteration 0 with zero perturbation. Variants are
independent: each has its own seeded init, and a variant's trajectory does
not depend on which other variants share its batch.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import asr
from .matio import atomic_write, matrix_bytes, parse_matrix

BUNDLE_MAGIC = "GHOSTB1"


class AttackParameterError(ValueError):
    """Invalid attack configuration or target."""


class BundleFormatError(ValueError):
    """Malformed ghost bundle file."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    max_iters: int = 50
    frames: int = 64
    noise_mean: float = 0.0
    noise_std: float = 1.0
    budget: float | None = None  # optional cumulative L-inf bound on x - x0
    seed: int = 0
    batch_size: int = 40

    def __post_init__(self):
        if not self.epsilon > 0:
            raise AttackParameterError("epsilon must be positive")
        if self.max_iters < 1:
            raise AttackParameterError("max_iters must be >= 1")
        if self.frames < 1:
            raise AttackParameterError("frames must be >= 1")
        if not self.noise_std >= 0:
            raise AttackParameterError("noise_std must be >= 0")
        if self.budget is not None and not self.budget > 0:
            raise AttackParameterError("budget, when set, must be positive")
        if self.batch_size < 1:
            raise AttackParameterError("batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class GhostVec:
    """One harvested embedding plus how it was obtained."""

    target_speaker: str
    variant: int
    embedding: np.ndarray  # (T', model_dim) encoder output at the final input
    pooled: np.ndarray  # time mean of embedding
    iterations: int
    final_loss: float
    succeeded: bool
    max_abs_delta: float


@dataclass
class AttackResult:
    target_speaker: str
    config: AttackConfig
    ghostvecs: list[GhostVec] = field(default_factory=list)

    @property
    def successes(self) -> list[GhostVec]:
        return [g for g in self.ghostvecs if g.succeeded]

    @property
    def success_rate(self) -> float:
        if not self.ghostvecs:
            return 0.0
        return len(self.successes) / len(self.ghostvecs)


def init_input(cfg: AttackConfig, variant: int = 0) -> np.ndarray:
    """Seeded Gaussian noise features for one attack variant."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAD, variant]))
    return cfg.noise_mean + cfg.noise_std * rng.standard_normal((cfg.frames, asr.N_FEATURES))


def fgsm_step(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    """One targeted step x' = x - epsilon * sign(grad).

    The minus sign descends the loss toward the target label; zero-gradient
    coordinates stay put (sign(0) = 0).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise AttackParameterError(f"gradient shape {grad.shape} != input shape {x.shape}")
    return x - epsilon * np.sign(grad)


def _speaker_only_mask(label_len: int) -> np.ndarray:
    mask = np.zeros(label_len, dtype=bool)
    mask[1] = True
    return mask


def extract_ghostvec(
    model: asr.TrainedModel,
    target: str,
    cfg: AttackConfig,
    n_variants: int = 1,
    first_variant: int = 0,
) -> AttackResult:
    """Extract ghost vectors for one target speaker over seeded variants.

    Variant k initializes from ``init_input(cfg, first_variant + k)`` and
    runs the check-then-step loop: stop as soon as the model's first decoded
    token is the target, otherwise take a gradient-sign step (loss restricted
    to the speaker position). Exhausting max_iters yields a succeeded=False
    ghost, not an exception; its embedding is still harvested.
    """
    if not model.frozen:
        raise AttackParameterError("attack requires a frozen model")
    if n_variants < 1:
        raise AttackParameterError("n_variants must be >= 1")
    try:
        target_id = model.vocab.speaker_token_id(target)
    except asr.VocabError as exc:
        raise AttackParameterError(f"target {target!r} not in the model vocabulary") from exc
    label = [model.vocab.sos_id, target_id, model.vocab.eos_id]
    mask = _speaker_only_mask(len(label))

    result = AttackResult(target_speaker=target, config=cfg)
    variant_ids = list(range(first_variant, first_variant + n_variants))
    for lo in range(0, n_variants, cfg.batch_size):
        chunk = variant_ids[lo : lo + cfg.batch_size]
        result.ghostvecs.extend(_run_chunk(model, target_id, target, label, mask, cfg, chunk))
    return result


def _run_chunk(model, target_id, target, label, mask, cfg, chunk):
    b = len(chunk)
    x0 = np.stack([init_input(cfg, k) for k in chunk])
    x = torch.from_numpy(x0.copy())
    label_rows = torch.tensor([label] * b, dtype=torch.long)
    active = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=np.int64)
    succeeded = np.zeros(b, dtype=bool)
    final_loss = np.zeros(b, dtype=np.float64)

    for step in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        with torch.no_grad():
            logits = asr.speaker_step_logits(model, x[idx])
            logp = torch.log_softmax(logits, dim=-1)
        final_loss[idx] = -logp[:, target_id].numpy()
        hit = logits.argmax(dim=-1).numpy() == target_id
        succeeded[idx[hit]] = True
        active[idx[hit]] = False
        if step == cfg.max_iters or not active.any():
            break
        idx = np.flatnonzero(active)
        grads, _ = asr.grad_input_batch(model, x[idx], label_rows[: len(idx)], mask)
        stepped = x[idx].numpy() - cfg.epsilon * np.sign(grads.numpy())
        if cfg.budget is not None:
            lo_b, hi_b = x0[idx] - cfg.budget, x0[idx] + cfg.budget
            stepped = np.clip(stepped, lo_b, hi_b)
        x[idx] = torch.from_numpy(stepped)
        iters[idx] += 1

    final = x.numpy()
    embeddings = asr.encode_batch(model, [final[i] for i in range(b)])
    out = []
    for i, k in enumerate(chunk):
        out.append(
            GhostVec(
                target_speaker=target,
                variant=k,
                embedding=embeddings[i],
                pooled=asr.pooled_embedding(embeddings[i]),
                iterations=int(iters[i]),
                final_loss=float(final_loss[i]),
                succeeded=bool(succeeded[i]),
                max_abs_delta=float(np.max(np.abs(final[i] - x0[i]))),
            )
        )
    return out


@dataclass(frozen=True)
class GhostBundle:
    """Converged ghost vectors for one target, ready for stacking."""

    target_speaker: str
    config: AttackConfig
    variants: tuple[int, ...]
    iterations: tuple[int, ...]
    pooled: np.ndarray  # (n, model_dim), one row per converged variant

    def __post_init__(self):
        if self.pooled.ndim != 2 or self.pooled.shape[0] != len(self.variants):
            raise BundleFormatError("pooled matrix rows must match the variant list")
        if len(self.iterations) != len(self.variants):
            raise BundleFormatError("iteration list must match the variant list")

    @property
    def count(self) -> int:
        return len(self.variants)


def bundle_from_results(results: list[AttackResult]) -> GhostBundle:
    """Collect every converged ghost from one target's attack batches."""
    if not results:
        raise BundleFormatError("no attack results to bundle")
    targets = {r.target_speaker for r in results}
    if len(targets) != 1:
        raise BundleFormatError(f"results mix targets: {sorted(targets)}")
    succ = [g for r in results for g in r.successes]
    if not succ:
        raise BundleFormatError(f"no converged variants for {results[0].target_speaker}")
    return GhostBundle(
        target_speaker=results[0].target_speaker,
        config=results[0].config,
        variants=tuple(g.variant for g in succ),
        iterations=tuple(g.iterations for g in succ),
        pooled=np.stack([g.pooled for g in succ]),
    )


def save_bundle(bundle: GhostBundle, path) -> None:
    cfg = bundle.config
    head = io.StringIO()
    head.write(f"{BUNDLE_MAGIC}\n")
    head.write(f"target {bundle.target_speaker}\n")
    head.write(f"epsilon {cfg.epsilon!r}\n")
    head.write(f"max_iters {cfg.max_iters}\n")
    head.write(f"frames {cfg.frames}\n")
    head.write(f"noise_mean {cfg.noise_mean!r}\n")
    head.write(f"noise_std {cfg.noise_std!r}\n")
    head.write(f"seed {cfg.seed}\n")
    head.write(f"count {bundle.count}\n")
    for k, it in zip(bundle.variants, bundle.iterations):
        head.write(f"v {k} {it}\n")
    head.write("matrix\n")
    atomic_write(Path(path), head.getvalue().encode() + matrix_bytes(bundle.pooled))


def load_bundle(path) -> GhostBundle:
    raw = Path(path).read_bytes()
    sep = raw.find(b"matrix\n")
    if not raw.startswith(BUNDLE_MAGIC.encode() + b"\n") or sep < 0:
        raise BundleFormatError(f"{path} is not a ghost bundle")
    lines = raw[:sep].decode().splitlines()[1:]
    fields = {}
    variants, iterations = [], []
    for line in lines:
        key, *rest = line.split(" ")
        if key == "v":
            variants.append(int(rest[0]))
            iterations.append(int(rest[1]))
        else:
            fields[key] = rest[0]
    try:
        cfg = AttackConfig(
            epsilon=float(fields["epsilon"]),
            max_iters=int(fields["max_iters"]),
            frames=int(fields["frames"]),
            noise_mean=float(fields["noise_mean"]),
            noise_std=float(fields["noise_std"]),
            seed=int(fields["seed"]),
        )
        target = fields["target"]
        count = int(fields["count"])
    except KeyError as exc:
        raise BundleFormatError(f"bundle header missing field {exc}") from exc
    pooled = parse_matrix(raw[sep + len(b"matrix\n") :])
    if count != len(variants) or pooled.shape[0] != count:
        raise BundleFormatError("bundle count does not match its variant rows")
    return GhostBundle(
        target_speaker=target,
        config=cfg,
        variants=tuple(variants),
        iterations=tuple(iterations),
        pooled=pooled,
    )
