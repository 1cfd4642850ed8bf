"""Speaker-adapted transformer encoder-decoder ASR.

The decoder is trained on label sequences ``<sos> <speaker> c1..cn <eos>``,
so the first decoded token is a speaker identity and the encoder output
carries speaker information. Everything runs in float64 on CPU: training is
deterministic given a seed, and input gradients match finite differences to
numerical precision.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .corpus import Manifest
from .voice import ALPHABET

N_FEATURES = 120
CHECKPOINT_VERSION = 1


class VocabError(ValueError):
    """Token not representable in the vocabulary."""


class ShapeError(ValueError):
    """Tensor shape does not match the model contract."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CheckpointError(RuntimeError):
    """Unreadable or version-mismatched checkpoint."""


class CerParameterError(ValueError):
    """Invalid arguments to the character error rate."""


def speaker_token(speaker_id: str) -> str:
    return f"<spk:{speaker_id}>"


@dataclass(frozen=True)
class VocabSpec:
    char_tokens: tuple[str, ...]
    speaker_tokens: tuple[str, ...]
    sos: str = "<sos>"
    eos: str = "<eos>"
    pad: str = "<pad>"

    def __post_init__(self):
        all_tokens = self.all_tokens()
        if len(set(all_tokens)) != len(all_tokens):
            raise VocabError("vocabulary tokens must be unique")
        if set(self.char_tokens) & set(self.speaker_tokens):
            raise VocabError("speaker tokens must be disjoint from character tokens")

    @classmethod
    def for_speakers(cls, speaker_ids) -> "VocabSpec":
        return cls(
            char_tokens=tuple(ALPHABET),
            speaker_tokens=tuple(speaker_token(s) for s in sorted(speaker_ids)),
        )

    def all_tokens(self) -> tuple[str, ...]:
        return (self.pad, self.sos, self.eos) + self.char_tokens + self.speaker_tokens

    @property
    def size(self) -> int:
        return len(self.all_tokens())

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def id_of(self, token: str) -> int:
        try:
            return self.all_tokens().index(token)
        except ValueError:
            raise VocabError(f"token {token!r} not in vocabulary") from None

    def token_of(self, idx: int) -> str:
        return self.all_tokens()[idx]

    @property
    def char_id_range(self) -> range:
        return range(3, 3 + len(self.char_tokens))

    @property
    def speaker_id_range(self) -> range:
        lo = 3 + len(self.char_tokens)
        return range(lo, lo + len(self.speaker_tokens))

    def speaker_token_id(self, speaker_id: str) -> int:
        return self.id_of(speaker_token(speaker_id))

    def encode_label(self, speaker_id: str, transcript: str) -> "LabelSequence":
        ids = [self.sos_id, self.speaker_token_id(speaker_id)]
        base = 3
        for ch in transcript:
            if ch not in self.char_tokens:
                raise VocabError(f"character {ch!r} not encodable")
            ids.append(base + self.char_tokens.index(ch))
        ids.append(self.eos_id)
        return LabelSequence(tuple(ids))

    def text_of(self, token_ids) -> str:
        """Characters in a decoded sequence, ignoring specials and speakers."""
        chars = self.char_id_range
        return "".join(self.token_of(i)[0] for i in token_ids if i in chars)


@dataclass(frozen=True)
class LabelSequence:
    tokens: tuple[int, ...]

    def validate(self, vocab: VocabSpec) -> None:
        t = self.tokens
        if len(t) < 3:
            raise VocabError("label sequence needs at least <sos> <speaker> <eos>")
        if t[0] != vocab.sos_id:
            raise VocabError("label sequence must start with <sos>")
        if t[1] not in vocab.speaker_id_range:
            raise VocabError("second label token must be a speaker token")
        if t[-1] != vocab.eos_id:
            raise VocabError("label sequence must end with <eos>")
        for tok in t[2:-1]:
            if tok not in vocab.char_id_range:
                raise VocabError(f"interior token {tok} is not a character token")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("encoder_layers", "decoder_layers", "model_dim", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ShapeError("model_dim must be divisible by heads")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 1.0
    # per-epoch count of pure-noise feature blocks labeled <sos> <eos>; teaches
    # the decoder that empty audio carries no speaker instead of letting it
    # hallucinate one
    noise_examples: int = 0

    def __post_init__(self):
        if self.noise_examples < 0:
            raise TrainingError("noise_examples must be >= 0")


def _sinusoidal_table(max_len: int, dim: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(max_len, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class _Seq2Seq(nn.Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig, max_len: int = 2048):
        super().__init__()
        d = cfg.model_dim
        # raw log-mel magnitudes span ~30 units; per-frame normalization keeps
        # the conv/attention activations in a trainable range from epoch 1
        self.in_norm = nn.LayerNorm(N_FEATURES)
        self.frontend = nn.Conv1d(N_FEATURES, d, kernel_size=3, stride=2, padding=1)
        enc_layer = nn.TransformerEncoderLayer(
            d, cfg.heads, cfg.ffn_dim, cfg.dropout, batch_first=True, norm_first=True
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, cfg.encoder_layers, norm=nn.LayerNorm(d), enable_nested_tensor=False
        )
        self.tok_emb = nn.Embedding(vocab_size, d)
        dec_layer = nn.TransformerDecoderLayer(
            d, cfg.heads, cfg.ffn_dim, cfg.dropout, batch_first=True, norm_first=True
        )
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.decoder_layers, norm=nn.LayerNorm(d))
        self.out_proj = nn.Linear(d, vocab_size)
        self.scale = math.sqrt(d)
        self.register_buffer("pos_table", _sinusoidal_table(max_len, d), persistent=False)

    @staticmethod
    def out_lengths(in_lengths: torch.Tensor) -> torch.Tensor:
        # stride-2 conv with kernel 3, padding 1
        return torch.div(in_lengths - 1, 2, rounding_mode="floor") + 1

    def encode(self, feats: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.frontend(self.in_norm(feats).transpose(1, 2)).transpose(1, 2)
        h = torch.relu(h) + self.pos_table[: h.shape[1]]
        return self.encoder(h, src_key_padding_mask=pad_mask)

    def decode(
        self,
        memory: torch.Tensor,
        tgt_ids: torch.Tensor,
        memory_pad_mask: torch.Tensor | None = None,
        tgt_pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        l = tgt_ids.shape[1]
        tgt = self.tok_emb(tgt_ids) * self.scale + self.pos_table[:l]
        causal = torch.triu(torch.ones(l, l, dtype=torch.bool), diagonal=1)
        h = self.decoder(
            tgt,
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=tgt_pad_mask,
            memory_key_padding_mask=memory_pad_mask,
        )
        return self.out_proj(h)


@dataclass
class TrainedModel:
    net: _Seq2Seq
    vocab: VocabSpec
    config: ModelConfig
    frozen: bool = False
    train_losses: list[float] = field(default_factory=list)

    def freeze(self) -> "TrainedModel":
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


def build_model(vocab: VocabSpec, cfg: ModelConfig, seed: int = 0) -> TrainedModel:
    torch.manual_seed(seed)
    net = _Seq2Seq(vocab.size, cfg).double()
    net.eval()
    return TrainedModel(net=net, vocab=vocab, config=cfg)


def _as_feature_tensor(feats: np.ndarray) -> torch.Tensor:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != N_FEATURES:
        raise ShapeError(f"features must be (T, {N_FEATURES}), got {feats.shape}")
    return torch.from_numpy(np.ascontiguousarray(feats))


def _pad_batch(feat_list: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([f.shape[0] for f in feat_list])
    t_max = int(lengths.max())
    batch = torch.zeros(len(feat_list), t_max, N_FEATURES, dtype=torch.float64)
    for i, f in enumerate(feat_list):
        batch[i, : f.shape[0]] = _as_feature_tensor(f)
    out_len = _Seq2Seq.out_lengths(lengths)
    t_out = int(_Seq2Seq.out_lengths(torch.tensor([t_max])))
    pad_mask = torch.arange(t_out)[None, :] >= out_len[:, None]
    return batch, pad_mask


def _pad_labels(label_list: list, pad_id: int) -> torch.Tensor:
    l_max = max(len(l) for l in label_list)
    out = torch.full((len(label_list), l_max), pad_id, dtype=torch.long)
    for i, l in enumerate(label_list):
        toks = l.tokens if isinstance(l, LabelSequence) else tuple(l)
        out[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return out


def _masked_label_loss(
    model: TrainedModel,
    logits: torch.Tensor,
    labels: torch.Tensor,
    position_mask: np.ndarray | None,
) -> torch.Tensor:
    """Mean cross-entropy over selected label positions.

    ``logits`` has one row per teacher-forcing step; step i predicts label
    position i+1. ``position_mask`` is a boolean vector over label positions
    (index 0, the <sos>, is never predicted and its entry is ignored); None
    selects every position. Padded positions never contribute.
    """
    vocab = model.vocab
    targets = labels[:, 1:]
    logp = torch.log_softmax(logits[:, : targets.shape[1]], dim=-1)
    ce = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    weight = (targets != vocab.pad_id).double()
    if position_mask is not None:
        pm = np.asarray(position_mask, dtype=bool)
        if pm.shape[0] < labels.shape[1]:
            raise ShapeError("position mask shorter than the label sequence")
        weight = weight * torch.from_numpy(pm[1 : labels.shape[1]].astype(np.float64))[None, :]
    total = weight.sum()
    if float(total) == 0.0:
        return (ce * weight).sum()  # empty objective: zero loss, zero gradient
    return (ce * weight).sum() / total


def train(manifest: Manifest, cfg: ModelConfig, train_cfg: TrainConfig) -> TrainedModel:
    """Train on the full label sequences (speaker token included in the loss)."""
    vocab = VocabSpec.for_speakers(manifest.speakers())
    feats = [manifest.load_features(e) for e in manifest.entries]
    labels = [vocab.encode_label(e.speaker_id, e.transcript) for e in manifest.entries]
    for l in labels:
        l.validate(vocab)

    model = build_model(vocab, cfg, seed=train_cfg.seed)
    model.net.train()
    for p in model.net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.net.parameters(), lr=train_cfg.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xA5]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x5E]))
    silence_label = LabelSequence((vocab.sos_id, vocab.eos_id))

    for epoch in range(train_cfg.epochs):
        epoch_feats = feats
        epoch_labels = labels
        if train_cfg.noise_examples:
            # fresh draws every epoch so the empty-audio label covers the
            # whole noise region rather than a memorized handful of samples
            noise = [
                noise_rng.standard_normal((int(noise_rng.integers(24, 97)), N_FEATURES))
                for _ in range(train_cfg.noise_examples)
            ]
            epoch_feats = feats + noise
            epoch_labels = labels + [silence_label] * train_cfg.noise_examples
        perm = order_rng.permutation(len(epoch_feats))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(epoch_feats), train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            batch, pad_mask = _pad_batch([epoch_feats[i] for i in idx])
            lab = _pad_labels([epoch_labels[i] for i in idx], vocab.pad_id)
            tgt_in = lab[:, :-1]
            tgt_pad = tgt_in == vocab.pad_id
            memory = model.net.encode(batch, pad_mask)
            logits = model.net.decode(memory, tgt_in, pad_mask, tgt_pad)
            loss_t = _masked_label_loss(model, logits, lab, None)
            if not torch.isfinite(loss_t):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss_t.backward()
            nn.utils.clip_grad_norm_(model.net.parameters(), train_cfg.grad_clip)
            opt.step()
            epoch_loss += float(loss_t.detach())
            n_batches += 1
        model.train_losses.append(epoch_loss / max(1, n_batches))
    return model.freeze()


def encode(model: TrainedModel, feats: np.ndarray) -> np.ndarray:
    """Encoder embedding for one utterance, shape (T', model_dim)."""
    x = _as_feature_tensor(feats)[None]
    with torch.no_grad():
        memory = model.net.encode(x)
    return memory[0].numpy()


def encode_batch(model: TrainedModel, feat_list: list[np.ndarray]) -> list[np.ndarray]:
    batch, pad_mask = _pad_batch(feat_list)
    with torch.no_grad():
        memory = model.net.encode(batch, pad_mask)
    out_len = _Seq2Seq.out_lengths(torch.tensor([f.shape[0] for f in feat_list]))
    return [memory[i, : int(out_len[i])].numpy() for i in range(len(feat_list))]


def pooled_embedding(embedding: np.ndarray) -> np.ndarray:
    return np.asarray(embedding, dtype=np.float64).mean(axis=0)


def decode_greedy(
    model: TrainedModel, embedding: np.ndarray, max_len: int = 64
) -> tuple[list[int], np.ndarray]:
    """Greedy autoregressive decode from an encoder embedding.

    Returns the token ids (starting with <sos>) and the per-step posterior
    matrix. Decoding stops at <eos> or after ``max_len`` generated tokens.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != model.config.model_dim:
        raise ShapeError(f"embedding must be (T', {model.config.model_dim}), got {emb.shape}")
    if not np.all(np.isfinite(emb)):
        raise ShapeError("embedding contains non-finite values")
    memory = torch.from_numpy(emb)[None]
    tokens = [model.vocab.sos_id]
    posteriors = []
    with torch.no_grad():
        for _ in range(max_len):
            tgt = torch.tensor(tokens, dtype=torch.long)[None]
            logits = model.net.decode(memory, tgt)
            post = torch.softmax(logits[0, -1], dim=-1)
            posteriors.append(post.numpy())
            nxt = int(post.argmax())
            tokens.append(nxt)
            if nxt == model.vocab.eos_id:
                break
    return tokens, np.stack(posteriors)


def decode_greedy_batch(
    model: TrainedModel, feat_list: list[np.ndarray], max_len: int = 64
) -> list[list[int]]:
    """Batched greedy decode straight from features (no posteriors kept)."""
    batch, pad_mask = _pad_batch(feat_list)
    n = len(feat_list)
    with torch.no_grad():
        memory = model.net.encode(batch, pad_mask)
        tokens = torch.full((n, 1), model.vocab.sos_id, dtype=torch.long)
        done = torch.zeros(n, dtype=torch.bool)
        for _ in range(max_len):
            logits = model.net.decode(memory, tokens, pad_mask)
            nxt = logits[:, -1].argmax(dim=-1)
            nxt = torch.where(done, torch.tensor(model.vocab.pad_id), nxt)
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            done = done | (nxt == model.vocab.eos_id)
            if bool(done.all()):
                break
    out = []
    for i in range(n):
        seq = []
        for tok in tokens[i].tolist():
            seq.append(tok)
            if tok == model.vocab.eos_id:
                break
        out.append(seq)
    return out


def speaker_step_logits(model: TrainedModel, batch: torch.Tensor) -> torch.Tensor:
    """Logits of the first decoded token (the speaker slot) for a batch."""
    memory = model.net.encode(batch)
    tgt = torch.full((batch.shape[0], 1), model.vocab.sos_id, dtype=torch.long)
    return model.net.decode(memory, tgt)[:, 0]


def predict_speaker_tokens(model: TrainedModel, feat_list: list[np.ndarray]) -> list[int]:
    """First decoded token id per utterance (variable lengths, padded batch)."""
    batch, pad_mask = _pad_batch(feat_list)
    with torch.no_grad():
        memory = model.net.encode(batch, pad_mask)
        tgt = torch.full((len(feat_list), 1), model.vocab.sos_id, dtype=torch.long)
        logits = model.net.decode(memory, tgt, pad_mask)
    return logits[:, 0].argmax(dim=-1).tolist()


def loss(
    model: TrainedModel,
    feats: np.ndarray,
    labels: LabelSequence,
    position_mask: np.ndarray | None = None,
) -> float:
    """Teacher-forced cross-entropy, averaged over selected positions."""
    labels.validate(model.vocab)
    x = _as_feature_tensor(feats)[None]
    lab = _pad_labels([labels], model.vocab.pad_id)
    with torch.no_grad():
        memory = model.net.encode(x)
        logits = model.net.decode(memory, lab[:, :-1])
        return float(_masked_label_loss(model, logits, lab, position_mask))


def grad_input(
    model: TrainedModel,
    feats: np.ndarray,
    labels: LabelSequence,
    position_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of the masked loss w.r.t. the input features."""
    if not model.frozen:
        raise ShapeError("grad_input requires a frozen model")
    labels.validate(model.vocab)
    x = _as_feature_tensor(feats)[None].requires_grad_(True)
    lab = _pad_labels([labels], model.vocab.pad_id)
    with torch.enable_grad():
        memory = model.net.encode(x)
        logits = model.net.decode(memory, lab[:, :-1])
        loss_t = _masked_label_loss(model, logits, lab, position_mask)
        (grad,) = torch.autograd.grad(loss_t, x)
    return grad[0].numpy()


def grad_input_batch(
    model: TrainedModel,
    batch: torch.Tensor,
    label_rows: torch.Tensor,
    position_mask: np.ndarray,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched input gradients plus the per-item masked losses."""
    if not model.frozen:
        raise ShapeError("grad_input requires a frozen model")
    x = batch.detach().requires_grad_(True)
    vocab = model.vocab
    with torch.enable_grad():
        memory = model.net.encode(x)
        logits = model.net.decode(memory, label_rows[:, :-1])
        targets = label_rows[:, 1:]
        logp = torch.log_softmax(logits, dim=-1)
        ce = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        pm = torch.from_numpy(np.asarray(position_mask[1:], dtype=np.float64))
        per_item = (ce * pm[None, :]).sum(dim=1) / pm.sum().clamp(min=1.0)
        (grad,) = torch.autograd.grad(per_item.sum(), x)
    return grad.detach(), per_item.detach()


def cer(hypothesis: str, reference: str) -> float:
    """Character error rate, percent: edit distance / reference length * 100."""
    if not reference:
        raise CerParameterError("reference must be non-empty")
    m, n = len(hypothesis), len(reference)
    prev = np.arange(n + 1)
    for i in range(1, m + 1):
        cur = np.empty(n + 1, dtype=np.int64)
        cur[0] = i
        for j in range(1, n + 1):
            sub = prev[j - 1] + (hypothesis[i - 1] != reference[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return 100.0 * float(prev[n]) / n


def save_model(model: TrainedModel, path) -> None:
    """Single-file checkpoint with an embedded format version."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "asr",
        "char_tokens": list(model.vocab.char_tokens),
        "speaker_tokens": list(model.vocab.speaker_tokens),
        "config": {
            "encoder_layers": model.config.encoder_layers,
            "decoder_layers": model.config.decoder_layers,
            "model_dim": model.config.model_dim,
            "heads": model.config.heads,
            "ffn_dim": model.config.ffn_dim,
            "dropout": model.config.dropout,
        },
        "frozen": model.frozen,
        "train_losses": list(model.train_losses),
        "state_dict": model.net.state_dict(),
    }
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(p)


def load_model(path) -> TrainedModel:
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} does not match supported version {CHECKPOINT_VERSION}"
        )
    vocab = VocabSpec(
        char_tokens=tuple(payload["char_tokens"]),
        speaker_tokens=tuple(payload["speaker_tokens"]),
    )
    cfg = ModelConfig(**payload["config"])
    model = build_model(vocab, cfg)
    model.net.load_state_dict(payload["state_dict"])
    model.train_losses = list(payload.get("train_losses", []))
    if payload.get("frozen"):
        model.freeze()
    return model
