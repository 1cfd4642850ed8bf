"""Speaker-verification metrics and the small verifier encoder.

EER, minDCF, and Cllr_min are computed purely from score ORDER (operating
points derived from counts), so any strictly increasing transform of the
scores leaves them exactly unchanged. Cllr_act reads scores as
log-likelihood ratios and is deliberately calibration-sensitive.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Manifest
from .matio import atomic_write

LN2 = float(np.log(2.0))

# Published full-scale reference operating points for the same three
# conditions (context for report legends; desk-scale runs target the
# orderings, not these magnitudes).
FULL_SCALE_REFERENCE = {
    "target_target": {"eer_pct": 1.50, "min_dcf": 0.32, "cllr_min": 0.07, "cllr_act": 0.71},
    "target_ghostvec": {"eer_pct": 52.27, "min_dcf": 1.00, "cllr_min": 0.99, "cllr_act": 143.87},
    "target_svdmod": {"eer_pct": 10.83, "min_dcf": 0.46, "cllr_min": 0.34, "cllr_act": 42.22},
    "cer_baseline_pct": 9.80,
    "cer_svdmod_pct": 15.42,
}


class MetricInputError(ValueError):
    """Trial/score sets that the metric definitions cannot accept."""


class DegenerateVarianceError(ValueError):
    """Projection requested on zero-variance data."""


class TrialFormatError(ValueError):
    """Malformed trial or score file."""


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class TrialScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.trials),):
            raise MetricInputError(
                f"{len(self.trials)} trials but {self.scores.shape} scores"
            )
        if not np.all(np.isfinite(self.scores)):
            raise MetricInputError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.target for t in self.trials], dtype=bool)

    def target_scores(self) -> np.ndarray:
        return self.scores[self.labels]

    def nontarget_scores(self) -> np.ndarray:
        return self.scores[~self.labels]

    @classmethod
    def from_arrays(cls, scores, labels) -> "TrialScoreSet":
        labels = np.asarray(labels, dtype=bool)
        trials = [Trial(f"e{i}", f"t{i}", bool(l)) for i, l in enumerate(labels)]
        return cls(trials=trials, scores=np.asarray(scores, dtype=np.float64))


def _require_both_classes(sset: TrialScoreSet) -> tuple[np.ndarray, np.ndarray]:
    tar, non = sset.target_scores(), sset.nontarget_scores()
    if tar.size == 0 or non.size == 0:
        raise MetricInputError(
            f"need both classes: {tar.size} target and {non.size} nontarget trials"
        )
    return tar, non


def _operating_points(sset: TrialScoreSet):
    """All distinct decision points of the detector family 'accept iff s > t'.

    Thresholds sit at midpoints between adjacent distinct scores, plus an
    accept-everything and a reject-everything extreme. Returns (p_miss,
    p_fa, thresholds); the probabilities depend only on score order.
    """
    tar, non = _require_both_classes(sset)
    uniq = np.unique(sset.scores)
    tar_per = np.searchsorted(uniq, tar)
    non_per = np.searchsorted(uniq, non)
    m = uniq.size
    cum_tar = np.cumsum(np.bincount(tar_per, minlength=m))
    cum_non = np.cumsum(np.bincount(non_per, minlength=m))
    # point k accepts scores strictly above uniq[k-1]; k=0 accepts all
    p_miss = np.concatenate([[0.0], cum_tar / tar.size])
    p_fa = np.concatenate([[1.0], (non.size - cum_non) / non.size])
    mids = 0.5 * (uniq[:-1] + uniq[1:])
    thresholds = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    return p_miss, p_fa, thresholds


def eer(sset: TrialScoreSet) -> tuple[float, float]:
    """Equal error rate in percent, plus the crossing threshold.

    The miss/false-alarm crossing is interpolated linearly between adjacent
    operating points in probability space, so the rate is exactly invariant
    to strictly increasing score transforms (the threshold is not).
    """
    p_miss, p_fa, thr = _operating_points(sset)
    d = p_miss - p_fa
    k = int(np.argmax(d >= 0.0))  # first nonnegative; d[0] = -1 always
    alpha = -d[k - 1] / (d[k] - d[k - 1])
    rate = p_miss[k - 1] + alpha * (p_miss[k] - p_miss[k - 1])
    threshold = thr[k - 1] + alpha * (thr[k] - thr[k - 1])
    return 100.0 * float(rate), float(threshold)


def min_dcf(
    sset: TrialScoreSet,
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum normalized detection cost over all operating points."""
    if not 0.0 < p_target < 1.0:
        raise MetricInputError("p_target must be in (0, 1)")
    if c_miss <= 0 or c_fa <= 0:
        raise MetricInputError("costs must be positive")
    p_miss, p_fa, _ = _operating_points(sset)
    dcf = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(dcf.min() / norm)


def _cllr_terms(tar_llr: np.ndarray, non_llr: np.ndarray) -> float:
    # log2(1 + e^x) via logaddexp; +-inf LLRs contribute 0 on their own class
    tar_cost = np.logaddexp(0.0, -tar_llr).mean() / LN2
    non_cost = np.logaddexp(0.0, non_llr).mean() / LN2
    return 0.5 * float(tar_cost + non_cost)


def pav_calibrate(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators fit of P(target | score), per trial.

    Tied scores are merged into one block before pooling, so the fit is a
    function of the score value. Returns probabilities aligned with input
    order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    uniq, inverse = np.unique(scores, return_inverse=True)
    ones = np.bincount(inverse, weights=labels, minlength=uniq.size)
    counts = np.bincount(inverse, minlength=uniq.size).astype(np.float64)

    # stack blocks: [target count, trial count, unique scores spanned]
    blocks: list[list[float]] = []
    for o, c in zip(ones, counts):
        blocks.append([float(o), float(c), 1.0])
        while len(blocks) > 1 and blocks[-2][0] * blocks[-1][1] >= blocks[-1][0] * blocks[-2][1]:
            o2, c2, g2 = blocks.pop()
            blocks[-1][0] += o2
            blocks[-1][1] += c2
            blocks[-1][2] += g2

    per_uniq = np.empty(uniq.size)
    pos = 0
    for o, c, g in blocks:
        per_uniq[pos : pos + int(g)] = o / c
        pos += int(g)
    return per_uniq[inverse]


def cllr(sset: TrialScoreSet) -> tuple[float, float]:
    """(cllr_act, cllr_min) in bits.

    cllr_act reads the raw scores as LLRs. cllr_min first calibrates scores
    to oracle LLRs with PAV (posterior odds against the empirical prior), so
    it measures discrimination alone and is order-invariant.
    """
    tar, non = _require_both_classes(sset)
    act = _cllr_terms(tar, non)

    labels = sset.labels
    post = pav_calibrate(sset.scores, labels)
    prior_logit = np.log(tar.size / non.size)
    with np.errstate(divide="ignore"):
        llr = np.log(post) - np.log1p(-post) - prior_logit
    mn = _cllr_terms(llr[labels], llr[~labels])
    return act, mn


@dataclass(frozen=True)
class MetricReport:
    eer_pct: float
    min_dcf: float
    cllr_min: float
    cllr_act: float
    n_target: int
    n_nontarget: int

    def as_dict(self) -> dict:
        return {
            "eer_pct": self.eer_pct,
            "min_dcf": self.min_dcf,
            "cllr_min": self.cllr_min,
            "cllr_act": self.cllr_act,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
        }


def compute_metric_report(sset: TrialScoreSet, p_target: float = 0.01) -> MetricReport:
    tar, non = _require_both_classes(sset)
    eer_pct, _ = eer(sset)
    act, mn = cllr(sset)
    return MetricReport(
        eer_pct=eer_pct,
        min_dcf=min_dcf(sset, p_target=p_target),
        cllr_min=mn,
        cllr_act=act,
        n_target=int(tar.size),
        n_nontarget=int(non.size),
    )


def project_2d(embeddings: list[tuple[str, np.ndarray]]) -> list[tuple[str, float, float]]:
    """Center the vectors and project onto the top-2 principal directions.

    Axis signs are fixed by convention: along each axis, the coordinate of
    largest magnitude is made positive, so output is deterministic and
    order-independent up to that convention.
    """
    if len(embeddings) < 2:
        raise MetricInputError("projection needs at least 2 vectors")
    labels = [l for l, _ in embeddings]
    x = np.stack([np.asarray(v, dtype=np.float64) for _, v in embeddings])
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 0.0):
        raise DegenerateVarianceError("all vectors identical: no variance to project")
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top2 = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    coords = centered @ top2
    for j in range(2):
        i_star = int(np.argmax(np.abs(coords[:, j])))
        if coords[i_star, j] < 0:
            coords[:, j] = -coords[:, j]
    return [(labels[i], float(coords[i, 0]), float(coords[i, 1])) for i in range(len(labels))]


# ---------------------------------------------------------------------------
# Speaker encoder: the independent verifier used for Table-style scoring.


class EncoderTrainError(RuntimeError):
    """Speaker encoder training failure."""


SV_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64


class _StatsNet(nn.Module):
    def __init__(self, n_feats: int, cfg: EncoderConfig, n_speakers: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(2 * n_feats, cfg.hidden_dim),
            nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.embed_dim),
        )
        self.head = nn.Linear(cfg.embed_dim, n_speakers)

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(stats))


@dataclass
class SpeakerEncoder:
    net: _StatsNet
    config: EncoderConfig
    speakers: tuple[str, ...]
    n_feats: int
    frozen: bool = False
    train_accuracy: float = 0.0

    def freeze(self) -> "SpeakerEncoder":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        state = self.net.state_dict()
        for name in sorted(state):
            h.update(name.encode())
            h.update(state[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def utterance_stats(feats: np.ndarray) -> np.ndarray:
    """Time mean and standard deviation, concatenated (the pooling layer)."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise MetricInputError(f"features must be (T, n), got shape {f.shape}")
    mean = f.mean(axis=0)
    std = np.sqrt(f.var(axis=0) + 1e-8)
    return np.concatenate([mean, std])


def embed(enc: SpeakerEncoder, feats: np.ndarray) -> np.ndarray:
    stats = torch.from_numpy(utterance_stats(feats))[None]
    with torch.no_grad():
        return enc.net.body(stats)[0].numpy()


def train_speaker_encoder(
    manifest: Manifest, cfg: EncoderConfig = EncoderConfig(), seed: int = 0
) -> SpeakerEncoder:
    """Closed-set speaker classifier; the body before the head is the embedding."""
    speakers = manifest.speakers()
    if len(speakers) < 2:
        raise MetricInputError("speaker encoder training needs at least 2 speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}
    stats = np.stack([utterance_stats(manifest.load_features(e)) for e in manifest.entries])
    labels = np.array([spk_index[e.speaker_id] for e in manifest.entries])

    torch.manual_seed(seed)
    net = _StatsNet(stats.shape[1] // 2, cfg, len(speakers)).double()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    xent = nn.CrossEntropyLoss()
    x_all = torch.from_numpy(stats)
    y_all = torch.from_numpy(labels)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57]))

    n = stats.shape[0]
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            logits = net(x_all[idx])
            loss = xent(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise EncoderTrainError("non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()

    with torch.no_grad():
        acc = float((net(x_all).argmax(dim=1) == y_all).double().mean())
    enc = SpeakerEncoder(
        net=net,
        config=cfg,
        speakers=tuple(speakers),
        n_feats=stats.shape[1] // 2,
        train_accuracy=acc,
    )
    return enc.freeze()


def save_encoder(enc: SpeakerEncoder, path) -> None:
    payload = {
        "format_version": SV_CHECKPOINT_VERSION,
        "kind": "speaker-encoder",
        "config": {
            "hidden_dim": enc.config.hidden_dim,
            "embed_dim": enc.config.embed_dim,
            "epochs": enc.config.epochs,
            "lr": enc.config.lr,
            "batch_size": enc.config.batch_size,
        },
        "speakers": list(enc.speakers),
        "n_feats": enc.n_feats,
        "train_accuracy": enc.train_accuracy,
        "state_dict": enc.net.state_dict(),
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(p)


def load_encoder(path) -> SpeakerEncoder:
    from .asr import CheckpointError

    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != SV_CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')!r} unsupported"
        )
    cfg = EncoderConfig(**payload["config"])
    net = _StatsNet(payload["n_feats"], cfg, len(payload["speakers"])).double()
    net.load_state_dict(payload["state_dict"])
    enc = SpeakerEncoder(
        net=net,
        config=cfg,
        speakers=tuple(payload["speakers"]),
        n_feats=payload["n_feats"],
        train_accuracy=payload["train_accuracy"],
    )
    return enc.freeze()


def score_trials(
    enc: SpeakerEncoder,
    enroll_utts: dict[str, list[np.ndarray]],
    test_utts: dict[str, np.ndarray],
    trials: list[Trial],
    allow_self: bool = False,
) -> TrialScoreSet:
    """Cosine scores between averaged enrollment embeddings and test embeddings."""
    enroll_emb = {}
    for eid, utts in enroll_utts.items():
        if not utts:
            raise MetricInputError(f"enrollment {eid} has no utterances")
        enroll_emb[eid] = np.mean([embed(enc, u) for u in utts], axis=0)
    test_emb = {tid: embed(enc, f) for tid, f in test_utts.items()}

    scores = np.empty(len(trials))
    for i, tr in enumerate(trials):
        if tr.enroll_id == tr.test_id and not allow_self:
            raise MetricInputError(f"self-trial {tr.enroll_id} not allowed")
        if tr.enroll_id not in enroll_emb:
            raise MetricInputError(f"unresolvable enroll id {tr.enroll_id}")
        if tr.test_id not in test_emb:
            raise MetricInputError(f"unresolvable test id {tr.test_id}")
        a, b = enroll_emb[tr.enroll_id], test_emb[tr.test_id]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        scores[i] = 0.0 if na == 0.0 or nb == 0.0 else float(np.dot(a, b) / (na * nb))
    return TrialScoreSet(trials=list(trials), scores=scores)


# ---------------------------------------------------------------------------
# Trial and score file IO.


def save_trials(trials: list[Trial], path) -> None:
    lines = [f"{t.enroll_id}\t{t.test_id}\t{'target' if t.target else 'nontarget'}" for t in trials]
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def load_trials(path) -> list[Trial]:
    trials = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise TrialFormatError(f"{path}:{ln}: bad trial line {line!r}")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def save_scores(sset: TrialScoreSet, path) -> None:
    lines = [
        f"{t.enroll_id}\t{t.test_id}\t{'target' if t.target else 'nontarget'}\t{float(s)!r}"
        for t, s in zip(sset.trials, sset.scores)
    ]
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def load_scores(path) -> TrialScoreSet:
    trials, scores = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in ("target", "nontarget"):
            raise TrialFormatError(f"{path}:{ln}: bad score line {line!r}")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
        scores.append(float(parts[3]))
    return TrialScoreSet(trials=trials, scores=np.array(scores))


def build_report(
    scoresets: dict[str, TrialScoreSet],
    cers: dict[str, float],
    p_target: float = 0.01,
) -> dict:
    """Machine-readable report: one row per condition plus the reference legend."""
    if not scoresets:
        raise MetricInputError("report needs at least one scored condition")
    conditions = {
        name: compute_metric_report(sset, p_target=p_target).as_dict()
        for name, sset in scoresets.items()
    }
    return {
        "conditions": conditions,
        "cer_pct": dict(cers),
        "p_target": p_target,
        "full_scale_reference": FULL_SCALE_REFERENCE,
    }


def render_report_text(report: dict) -> str:
    """Human-readable table mirroring the machine-readable report."""
    lines = []
    lines.append("condition            EER%     minDCF   Cllr_min  Cllr_act  tar/non")
    for name in sorted(report["conditions"]):
        row = report["conditions"][name]
        lines.append(
            f"{name:<20} {row['eer_pct']:>7.2f}  {row['min_dcf']:>7.3f}  "
            f"{row['cllr_min']:>8.3f}  {row['cllr_act']:>8.3f}  "
            f"{row['n_target']}/{row['n_nontarget']}"
        )
    if report.get("cer_pct"):
        lines.append("")
        lines.append("condition            CER%")
        for name in sorted(report["cer_pct"]):
            lines.append(f"{name:<20} {report['cer_pct'][name]:>7.2f}")
    ref = report.get("full_scale_reference", {})
    if ref:
        lines.append("")
        lines.append("full-scale reference (context only, not desk-scale targets):")
        for name in ("target_target", "target_svdmod", "target_ghostvec"):
            row = ref[name]
            lines.append(
                f"  {name:<18} EER {row['eer_pct']:.2f}  minDCF {row['min_dcf']:.2f}  "
                f"Cllr {row['cllr_min']:.2f}/{row['cllr_act']:.2f}"
            )
        lines.append(
            f"  CER baseline {ref['cer_baseline_pct']:.2f}%  "
            f"svd-modified {ref['cer_svdmod_pct']:.2f}%"
        )
    return "\n".join(lines) + "\n"
