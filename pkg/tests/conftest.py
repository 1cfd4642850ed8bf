"""Shared fixtures: a small end-to-end lab that several suites reuse.

Session scope keeps the expensive pieces (corpus rendering, model training)
to one build per pytest run.
"""

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from ghostvec import asr, config, corpus, metrics, pipeline

torch.set_num_threads(1)

_CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    return _CRITERION_LINES


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """6 speakers x 10 short utterances, rendered once per session."""
    root = tmp_path_factory.mktemp("mini_corpus")
    manifest, profiles = corpus.generate_corpus(
        n_speakers=6,
        utts_per_speaker=10,
        transcript_len_range=(3, 6),
        seed=11,
        out_dir=root,
    )
    return manifest, profiles


@pytest.fixture(scope="session")
def mini_asr(mini_corpus):
    """Small trained ASR; accurate enough on speaker tokens to attack."""
    manifest, _ = mini_corpus
    model = asr.train(
        manifest,
        asr.ModelConfig(dropout=0.1),
        asr.TrainConfig(epochs=40, lr=2e-3, batch_size=8, seed=3),
    )
    return model


@pytest.fixture(scope="session")
def mini_sv(mini_corpus):
    manifest, _ = mini_corpus
    return metrics.train_speaker_encoder(
        manifest, metrics.EncoderConfig(epochs=120), seed=5
    )


@pytest.fixture(scope="session")
def memorization_lab(tmp_path_factory):
    """1 speaker, 1 utterance, enough epochs to memorize it completely."""
    root = tmp_path_factory.mktemp("memo_corpus")
    two, _ = corpus.generate_corpus(
        n_speakers=2,
        utts_per_speaker=1,
        transcript_len_range=(4, 6),
        seed=23,
        out_dir=root,
    )
    manifest = two.subset([two.speakers()[0]])
    model = asr.train(
        manifest,
        asr.ModelConfig(dropout=0.0),
        asr.TrainConfig(epochs=200, lr=2e-3, batch_size=1, seed=1),
    )
    return manifest, model


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# Small enough to run the whole pipeline in a few seconds; large enough that
# every stage produces real artifacts (two attack targets, three conditions).
LAB_CONFIG = """\
seed = 0
corpus.n_speakers = 5
corpus.utts_per_speaker = 12
corpus.transcript_len_min = 3
corpus.transcript_len_max = 5
corpus.train_speakers = 3
asr.encoder_layers = 1
asr.decoder_layers = 1
asr.model_dim = 32
asr.heads = 2
asr.ffn_dim = 64
asr.dropout = 0.0
asr.epochs = 25
asr.lr = 2e-3
asr.batch_size = 8
asr.noise_examples = 4
sv.epochs = 40
attack.n_targets = 2
attack.variants = 6
attack.epsilon = 0.1
attack.max_iters = 40
attack.frames = 24
attack.batch_size = 4
attack.max_extra_variants = 12
svd.stack_rows = 6
synth.sentences_per_target = 3
synth.text_len_min = 3
synth.text_len_max = 4
synth.gl_iters = 8
metrics.enroll_utts = 4
"""


@pytest.fixture(scope="session")
def pipeline_lab(tmp_path_factory):
    """One fast end-to-end pipeline run shared by the pipeline and cli suites."""
    out = tmp_path_factory.mktemp("pipeline_lab")
    cfg_path = out / "lab.cfg"
    cfg_path.write_text(LAB_CONFIG)
    cfg = config.parse_config(LAB_CONFIG)
    records = pipeline.run_all(cfg, out)
    return SimpleNamespace(cfg=cfg, cfg_path=cfg_path, out=out, records=records)
