"""Encoder-decoder recognizer: vocabulary, encoding, gradients, decoding, CER."""

import numpy as np
import pytest
import torch

from ghostvec import asr


def _tiny_model(seed=0, dropout=0.0, speakers=("spk00", "spk01")):
    vocab = asr.VocabSpec.for_speakers(speakers)
    cfg = asr.ModelConfig(
        encoder_layers=1, decoder_layers=1, model_dim=16, heads=2, ffn_dim=32, dropout=dropout
    )
    return asr.build_model(vocab, cfg, seed=seed)


def _feats(rng, t=20):
    return rng.normal(size=(t, asr.N_FEATURES))


# ---------------------------------------------------------------------------
# vocabulary and labels


def test_vocab_layout_and_special_ids():
    v = asr.VocabSpec.for_speakers(["b", "a"])
    assert v.pad_id == 0 and v.sos_id == 1 and v.eos_id == 2
    assert v.size == 3 + 27 + 2
    assert v.speaker_tokens == ("<spk:a>", "<spk:b>")  # sorted
    assert v.token_of(v.speaker_token_id("a")) == "<spk:a>"
    assert set(v.char_id_range).isdisjoint(v.speaker_id_range)


def test_vocab_rejects_collisions():
    with pytest.raises(asr.VocabError):
        asr.VocabSpec(char_tokens=("a", "a"), speaker_tokens=())
    with pytest.raises(asr.VocabError):
        asr.VocabSpec(char_tokens=("a",), speaker_tokens=("a",))


def test_unknown_token_lookup_raises():
    v = asr.VocabSpec.for_speakers(["a"])
    with pytest.raises(asr.VocabError):
        v.id_of("<spk:missing>")
    with pytest.raises(asr.VocabError):
        v.encode_label("a", "Q")  # uppercase not in the alphabet


def test_encode_label_structure():
    v = asr.VocabSpec.for_speakers(["spk03"])
    lab = v.encode_label("spk03", "ab c")
    assert lab.tokens[0] == v.sos_id
    assert lab.tokens[1] == v.speaker_token_id("spk03")
    assert lab.tokens[-1] == v.eos_id
    assert v.text_of(lab.tokens) == "ab c"
    lab.validate(v)


def test_label_validation_rejects_malformed_sequences():
    v = asr.VocabSpec.for_speakers(["a"])
    spk = v.speaker_token_id("a")
    ch = v.char_id_range[0]
    for bad in [
        (v.sos_id, spk),  # too short
        (v.eos_id, spk, v.eos_id),  # wrong start
        (v.sos_id, ch, v.eos_id),  # second token not a speaker
        (v.sos_id, spk, v.sos_id),  # wrong end
        (v.sos_id, spk, spk, v.eos_id),  # speaker token in the interior
    ]:
        with pytest.raises(asr.VocabError):
            asr.LabelSequence(bad).validate(v)


# ---------------------------------------------------------------------------
# model construction and encoding


def test_build_model_is_seed_deterministic():
    assert _tiny_model(seed=4).checksum() == _tiny_model(seed=4).checksum()
    assert _tiny_model(seed=4).checksum() != _tiny_model(seed=5).checksum()


def test_model_config_validation():
    with pytest.raises(asr.ShapeError):
        asr.ModelConfig(model_dim=30, heads=4)
    with pytest.raises(asr.ShapeError):
        asr.ModelConfig(encoder_layers=0)


def test_encode_shape_follows_conv_length_rule(rng):
    model = _tiny_model()
    for t in (5, 6, 20, 33):
        emb = asr.encode(model, _feats(rng, t))
        assert emb.shape == ((t - 1) // 2 + 1, 16)
        assert np.all(np.isfinite(emb))


def test_encode_is_deterministic(rng):
    model = _tiny_model()
    x = _feats(rng)
    assert np.array_equal(asr.encode(model, x), asr.encode(model, x))


def test_encode_rejects_bad_shapes(rng):
    model = _tiny_model()
    with pytest.raises(asr.ShapeError):
        asr.encode(model, rng.normal(size=(10, 7)))
    with pytest.raises(asr.ShapeError):
        asr.encode(model, rng.normal(size=(10,)))


def test_encode_batch_matches_single_despite_padding(rng):
    model = _tiny_model()
    items = [_feats(rng, t) for t in (9, 17, 30)]
    batched = asr.encode_batch(model, items)
    for x, got in zip(items, batched):
        want = asr.encode(model, x)
        assert got.shape == want.shape
        assert got == pytest.approx(want, abs=1e-9)


def test_pooled_embedding_is_time_mean(rng):
    emb = rng.normal(size=(7, 16))
    assert np.array_equal(asr.pooled_embedding(emb), emb.mean(axis=0))


# ---------------------------------------------------------------------------
# loss and gradients


def test_zeroed_output_head_gives_log_vocab_loss(rng):
    # all-zero logits make every posterior uniform: CE = ln(vocab size)
    model = _tiny_model()
    with torch.no_grad():
        model.net.out_proj.weight.zero_()
        model.net.out_proj.bias.zero_()
    lab = model.vocab.encode_label("spk00", "abc")
    got = asr.loss(model, _feats(rng), lab)
    assert got == pytest.approx(np.log(model.vocab.size), abs=1e-12)


def test_zeroed_output_head_kills_input_gradient(rng):
    # with W = 0 the logits no longer depend on x, so dJ/dx vanishes
    model = _tiny_model()
    with torch.no_grad():
        model.net.out_proj.weight.zero_()
        model.net.out_proj.bias.zero_()
    model.freeze()
    lab = model.vocab.encode_label("spk00", "ab")
    g = asr.grad_input(model, _feats(rng), lab)
    assert np.all(g == 0.0)


def test_grad_input_requires_frozen_model(rng):
    model = _tiny_model()
    lab = model.vocab.encode_label("spk00", "ab")
    with pytest.raises(asr.ShapeError):
        asr.grad_input(model, _feats(rng), lab)


def test_all_masked_positions_give_zero_loss_and_gradient(rng):
    model = _tiny_model().freeze()
    lab = model.vocab.encode_label("spk00", "abc")
    mask = np.zeros(len(lab), dtype=bool)
    assert asr.loss(model, _feats(rng), lab, position_mask=mask) == 0.0
    g = asr.grad_input(model, _feats(rng), lab, position_mask=mask)
    assert np.all(g == 0.0)


def test_grad_input_shape_matches_input(rng):
    model = _tiny_model().freeze()
    lab = model.vocab.encode_label("spk01", "ba")
    x = _feats(rng, 14)
    assert asr.grad_input(model, x, lab).shape == x.shape


def test_grad_input_matches_finite_differences(rng):
    # small-scale version of the acceptance check: three coordinates
    model = _tiny_model().freeze()
    lab = model.vocab.encode_label("spk00", "ab")
    mask = np.zeros(len(lab), dtype=bool)
    mask[1] = True
    x = _feats(rng, 9)
    g = asr.grad_input(model, x, lab, position_mask=mask)
    h = 1e-3
    for t, f in [(0, 3), (4, 60), (8, 119)]:
        up, dn = x.copy(), x.copy()
        up[t, f] += h
        dn[t, f] -= h
        fd = (
            asr.loss(model, up, lab, position_mask=mask)
            - asr.loss(model, dn, lab, position_mask=mask)
        ) / (2 * h)
        assert g[t, f] == pytest.approx(fd, rel=1e-4, abs=1e-10)


def test_speaker_position_loss_matches_decode_posterior(rng):
    # dual route: masked teacher-forced loss vs the first greedy-decode step
    model = _tiny_model().freeze()
    lab = model.vocab.encode_label("spk01", "abc")
    mask = np.zeros(len(lab), dtype=bool)
    mask[1] = True
    x = _feats(rng)
    masked = asr.loss(model, x, lab, position_mask=mask)
    _, post = asr.decode_greedy(model, asr.encode(model, x), max_len=1)
    spk_id = model.vocab.speaker_token_id("spk01")
    assert masked == pytest.approx(-np.log(post[0][spk_id]), abs=1e-9)


def test_grad_input_batch_agrees_with_single(rng):
    model = _tiny_model().freeze()
    lab = model.vocab.encode_label("spk00", "ab")
    mask = np.zeros(len(lab), dtype=bool)
    mask[1] = True
    xs = np.stack([_feats(rng, 12), _feats(rng, 12)])
    rows = torch.tensor([list(lab.tokens)] * 2)
    grads, losses = asr.grad_input_batch(model, torch.from_numpy(xs), rows, mask)
    for i in range(2):
        g1 = asr.grad_input(model, xs[i], lab, position_mask=mask)
        assert grads[i].numpy() == pytest.approx(g1, abs=1e-9)
        assert float(losses[i]) == pytest.approx(
            asr.loss(model, xs[i], lab, position_mask=mask), abs=1e-9
        )


# ---------------------------------------------------------------------------
# decoding


def test_decode_greedy_posteriors_are_distributions(rng):
    model = _tiny_model()
    tokens, post = asr.decode_greedy(model, asr.encode(model, _feats(rng)), max_len=5)
    assert tokens[0] == model.vocab.sos_id
    assert len(tokens) <= 6
    assert post.shape[1] == model.vocab.size
    assert post.sum(axis=1) == pytest.approx(np.ones(post.shape[0]), abs=1e-6)
    assert np.all(post >= 0.0)


def test_decode_greedy_validates_embeddings(rng):
    model = _tiny_model()
    with pytest.raises(asr.ShapeError):
        asr.decode_greedy(model, rng.normal(size=(4, 7)))
    bad = np.full((4, 16), np.nan)
    with pytest.raises(asr.ShapeError):
        asr.decode_greedy(model, bad)


def test_decode_batch_matches_single_decode(rng):
    model = _tiny_model()
    items = [_feats(rng, t) for t in (11, 24)]
    batched = asr.decode_greedy_batch(model, items, max_len=8)
    for x, got in zip(items, batched):
        want, _ = asr.decode_greedy(model, asr.encode(model, x), max_len=8)
        assert got == want


# ---------------------------------------------------------------------------
# character error rate


def test_cer_reference_values():
    assert asr.cer("abc", "abc") == 0.0
    assert asr.cer("axc", "abc") == pytest.approx(100.0 / 3.0)
    assert asr.cer("ab", "abc") == pytest.approx(100.0 / 3.0)  # deletion
    assert asr.cer("abxc", "abc") == pytest.approx(100.0 / 3.0)  # insertion
    assert asr.cer("", "abc") == 100.0
    assert asr.cer("aaaa", "b") == 400.0  # can exceed 100 on long hypotheses


def test_cer_rejects_empty_reference():
    with pytest.raises(asr.CerParameterError):
        asr.cer("abc", "")


def test_cer_is_symmetric_under_swap_scaling():
    # d(h, r) is the same edit distance both ways; only the denominator moves
    h, r = "kitten", "sitting"
    assert asr.cer(h, r) * len(r) == pytest.approx(asr.cer(r, h) * len(h))


# ---------------------------------------------------------------------------
# training behavior (session-scoped labs)


def test_memorization_reaches_zero_error(memorization_lab):
    manifest, model = memorization_lab
    assert model.frozen
    assert len(model.train_losses) == 200
    assert model.train_losses[-1] < model.train_losses[0]
    e = manifest.entries[0]
    feats = manifest.load_features(e)
    tokens = asr.decode_greedy_batch(model, [feats])[0]
    assert tokens[1] == model.vocab.speaker_token_id(e.speaker_id)
    assert asr.cer(model.vocab.text_of(tokens), e.transcript) == 0.0


def test_memorized_speaker_token_prediction(memorization_lab):
    manifest, model = memorization_lab
    e = manifest.entries[0]
    pred = asr.predict_speaker_tokens(model, [manifest.load_features(e)])
    assert pred == [model.vocab.speaker_token_id(e.speaker_id)]


def test_mini_model_learns_most_speaker_tokens(mini_corpus, mini_asr):
    manifest, _ = mini_corpus
    feats = [manifest.load_features(e) for e in manifest.entries]
    want = [mini_asr.vocab.speaker_token_id(e.speaker_id) for e in manifest.entries]
    got = asr.predict_speaker_tokens(mini_asr, feats)
    acc = np.mean([g == w for g, w in zip(got, want)])
    assert acc >= 0.9


def test_speaker_step_logits_agree_with_prediction(mini_corpus, mini_asr):
    manifest, _ = mini_corpus
    # same-length features so the unpadded batch path is exercised too
    e = manifest.entries[0]
    x = manifest.load_features(e)
    logits = asr.speaker_step_logits(mini_asr, torch.from_numpy(x[None]))
    assert int(logits[0].argmax()) == asr.predict_speaker_tokens(mini_asr, [x])[0]


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip(tmp_path, rng):
    model = _tiny_model(seed=8)
    model.train_losses = [3.1, 2.2]
    model.freeze()
    p = tmp_path / "asr.pt"
    asr.save_model(model, p)
    back = asr.load_model(p)
    assert back.checksum() == model.checksum()
    assert back.vocab == model.vocab
    assert back.config == model.config
    assert back.frozen
    assert back.train_losses == [3.1, 2.2]
    x = _feats(rng)
    assert asr.encode(back, x) == pytest.approx(asr.encode(model, x), abs=0)


def test_checkpoint_version_gate(tmp_path):
    model = _tiny_model()
    p = tmp_path / "asr.pt"
    asr.save_model(model, p)
    payload = torch.load(p, weights_only=True)
    payload["format_version"] = 999
    torch.save(payload, p)
    with pytest.raises(asr.CheckpointError, match="version"):
        asr.load_model(p)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(asr.CheckpointError):
        asr.load_model(p)
