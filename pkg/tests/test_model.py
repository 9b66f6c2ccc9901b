import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from textonly_adapt.config import ModelConfig
from textonly_adapt.data import FeatureSequence
from textonly_adapt.errors import CapacityError, ConfigurationError, EmptyProjectionError, UsageError
from textonly_adapt.model import (SpeechLLM, asr_loss, decode_greedy, features_tensor, masked_nll, shift_right,
                                  targets_tensor, text_logits, text_loss)
from textonly_adapt.vocab import DEFAULT_VOCAB, PAD

from conftest import SENTS, SMALL, make_texts, make_utts, tiny_spec


def test_encoder_downsamples_by_two():
    cfg = ModelConfig(feature_dim=4, model_dim=8, heads=2, encoder_layers=1, max_frames=3000)
    m = SpeechLLM(cfg)
    assert m.encode(torch.randn(1, 3000, 4)).shape == (1, 1500, 8)
    desk = SpeechLLM(ModelConfig())
    assert desk.encode(torch.randn(2, 120, 16)).shape == (2, 60, 64)


def test_encoder_zero_input_is_finite(small_model):
    out = small_model.encode(torch.zeros(3, SMALL.max_frames, SMALL.feature_dim))
    assert torch.isfinite(out).all()


def test_encoder_rejects_wrong_dim(small_model):
    with pytest.raises(ConfigurationError):
        small_model.encode(torch.zeros(1, SMALL.max_frames, SMALL.feature_dim + 1))


@pytest.mark.parametrize("T,n", [(1500, 300), (1502, 300), (5, 1), (9, 1)])
def test_projector_folding(T, n, small_model):
    out = small_model.project(torch.randn(1, T, SMALL.model_dim))
    assert out.shape == (1, n, SMALL.model_dim)


def test_projector_too_short(small_model):
    with pytest.raises(EmptyProjectionError):
        small_model.project(torch.randn(1, 4, SMALL.model_dim))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(5, 200))
def test_folding_length_law(T):
    m = SpeechLLM(SMALL)
    assert m.project(torch.randn(1, T, SMALL.model_dim)).shape[1] == T // SMALL.fold_k


def test_folding_concatenates_consecutive_frames(small_model):
    frames = torch.randn(1, 10, SMALL.model_dim)
    p = small_model.projector
    manual = p.fc2(torch.relu(p.fc1(frames[0, 5:10].reshape(-1))))
    assert torch.allclose(small_model.project(frames)[0, 1], manual, atol=1e-6)


def test_lm_forward_shape_and_capacity(small_model):
    L = 7
    t = torch.randint(4, len(DEFAULT_VOCAB), (2, L))
    assert small_model.lm_forward(None, t).shape == (2, L, SMALL.vocab_size)
    too_long = torch.randint(4, 10, (1, SMALL.max_positions))
    with pytest.raises(CapacityError):
        small_model.lm_forward(torch.zeros(1, SMALL.acoustic_tokens, SMALL.model_dim), too_long)


@settings(max_examples=20, deadline=None)
@given(j=st.integers(1, 9), tok=st.integers(4, 30))
def test_causality(j, tok):
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    for a in m.adapters.values():
        a.B.data.normal_()
    m.eval()
    prefix = torch.randn(1, SMALL.acoustic_tokens, SMALL.model_dim)
    t = torch.arange(4, 14)[None]
    t2 = t.clone()
    t2[0, j] = tok
    a, b = m.lm_forward(prefix, t), m.lm_forward(prefix, t2)
    assert torch.equal(a[:, :j], b[:, :j])


def test_losses_near_uniform_at_init():
    m = SpeechLLM(SMALL, seed=0)
    lnV = math.log(SMALL.vocab_size)
    utts = make_utts(SENTS)
    assert abs(float(asr_loss(m, utts)) - lnV) / lnV < 0.1
    assert abs(float(text_loss(m, make_texts(SENTS))) - lnV) / lnV < 0.1


def test_loss_mean_invariance_and_empty(small_model):
    small_model.eval()
    u = make_utts(["ab ba"])
    assert torch.allclose(asr_loss(small_model, u), asr_loss(small_model, u * 2), atol=1e-7)
    with pytest.raises(UsageError):
        asr_loss(small_model, [])
    with pytest.raises(UsageError):
        text_loss(small_model, [])


def test_pad_positions_carry_no_weight(small_model):
    small_model.eval()
    t = targets_tensor([DEFAULT_VOCAB.encode("ab da")], SMALL)
    padded = torch.cat([t, torch.full((1, 3), PAD)], dim=1)
    feats = features_tensor([make_utts(["ab da"])[0].features], SMALL)
    from textonly_adapt.model import asr_logits

    a = masked_nll(asr_logits(small_model, t, feats=feats), t)
    b = masked_nll(asr_logits(small_model, padded, feats=feats), padded)
    assert torch.allclose(a, b, atol=1e-6)
    a = masked_nll(text_logits(small_model, t), t)
    b = masked_nll(text_logits(small_model, padded), padded)
    assert torch.allclose(a, b, atol=1e-6)


def test_text_logits_default_layout_skips_acoustic_slots(small_model):
    small_model.eval()
    t = targets_tensor([DEFAULT_VOCAB.encode("dab")], SMALL)
    P, E = len(SMALL.prompt_tokens), SMALL.acoustic_tokens
    ref = small_model.lm_forward(None, shift_right(t), prefix_gap=E)
    assert torch.equal(text_logits(small_model, t), ref)
    # an explicit offset packs prompt and text contiguously
    contiguous = small_model.lm_forward(None, shift_right(t), position_offset=0)
    assert torch.equal(text_logits(small_model, t, position_offset=0), contiguous)
    assert not torch.allclose(ref, contiguous)


def _train_all(model, loss_fn, steps, lr=3e-3):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_fn()
        loss.backward()
        opt.step()
    model.eval()
    return float(loss_fn())


def test_text_loss_memorizes_single_sentence():
    torch.manual_seed(0)
    m = SpeechLLM(SMALL, seed=0)
    data = make_texts(["bad dab"])
    assert _train_all(m, lambda: text_loss(m, data), 300) < 0.1


def test_decode_memorized_pair():
    torch.manual_seed(0)
    cfg = ModelConfig(feature_dim=8, model_dim=32, heads=2, encoder_layers=1, decoder_layers=1, max_frames=40,
                      max_text_len=16, projector_hidden=32, ffn_mult=2)
    spec = tiny_spec(fpc=(3, 3))
    utts = make_utts(["hello world"], spec)
    m = SpeechLLM(cfg, seed=0)
    _train_all(m, lambda: asr_loss(m, utts), 300)
    out = decode_greedy(m, utts[0].features)
    assert DEFAULT_VOCAB.decode(out) == "hello world"
    assert decode_greedy(m, utts[0].features) == out
    assert decode_greedy(m, utts[0].features, max_len=0) == []


def test_decode_deterministic_untrained(small_model):
    f = make_utts(["ab"])[0].features
    assert decode_greedy(small_model, f, 5) == decode_greedy(small_model, f, 5)
    assert len(decode_greedy(small_model, f, 5)) <= 5


def test_features_tensor_checks():
    fs = FeatureSequence(np.zeros((SMALL.max_frames + 1, SMALL.feature_dim), np.float32), 1)
    with pytest.raises(ConfigurationError):
        features_tensor([fs], SMALL)
    with pytest.raises(CapacityError):
        targets_tensor([list(range(4, 4 + SMALL.max_text_len + 1))], SMALL)
