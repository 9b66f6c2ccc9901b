import numpy as np
import pytest
import torch

from textonly_adapt import lora
from textonly_adapt.config import FULL_SCALE, LORA_SITES
from textonly_adapt.errors import ConfigurationError, UsageError
from textonly_adapt.lora import LoraAdapter, Strategy, apply, init_adapter, merge, unmerge
from textonly_adapt.model import SpeechLLM, targets_tensor, text_logits
from textonly_adapt.vocab import DEFAULT_VOCAB

from conftest import SMALL


def rel(a, b):
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-30))


def test_fresh_adapter_has_zero_delta():
    a = init_adapter(6, 5, 3, 16.0, 0.05, seed=0)
    assert torch.count_nonzero(a.B) == 0
    x = torch.randn(4, 6)
    W = torch.randn(5, 6)
    assert torch.equal(apply(x, W, a, training_mode=False), apply(x, W, None))
    # dropout sits on the adapter branch, so a zero B hides it as well
    assert torch.equal(apply(x, W, a, training_mode=True), apply(x, W, None))


def test_init_is_seeded_and_validates_rank():
    a1 = init_adapter(8, 8, 2, 16.0, 0.0, seed=3)
    a2 = init_adapter(8, 8, 2, 16.0, 0.0, seed=3)
    assert torch.equal(a1.A, a2.A)
    assert not torch.equal(a1.A, init_adapter(8, 8, 2, 16.0, 0.0, seed=4).A)
    assert float(a1.A.abs().max()) <= 1 / np.sqrt(8)
    with pytest.raises(ConfigurationError):
        init_adapter(4, 3, 4, 16.0, 0.0, seed=0)


def test_apply_hand_example():
    a = LoraAdapter(torch.tensor([[1.0, 0.0]]), torch.tensor([[2.0], [0.0]]), alpha=1.0)
    W = torch.zeros(2, 2)
    out = apply(torch.tensor([3.0, 5.0]), W, a)
    assert out.tolist() == [6.0, 0.0]


def test_apply_shape_mismatch():
    a = init_adapter(4, 4, 2, 1.0, 0.0, seed=0)
    with pytest.raises(ConfigurationError):
        apply(torch.randn(3), torch.randn(4, 4), a)
    with pytest.raises(ConfigurationError):
        apply(torch.randn(5), torch.randn(4, 5), a)


def test_merge_equivalence_random():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for case in range(100):
        i, o = int(torch.randint(2, 12, (1,), generator=g)), int(torch.randint(2, 12, (1,), generator=g))
        r = int(torch.randint(1, min(i, o) + 1, (1,), generator=g))
        a = LoraAdapter(torch.randn(r, i, generator=g), torch.randn(o, r, generator=g), alpha=16.0, dropout_p=0.1)
        W = torch.randn(o, i, generator=g)
        x = torch.randn(7, i, generator=g)
        dyn = apply(x, W, a, training_mode=False)
        merged = x @ merge(W, a).T
        worst = max(worst, rel(dyn, merged))
    assert worst < 1e-5


def test_merge_identity_and_inverse():
    W = torch.randn(5, 4)
    a = init_adapter(4, 5, 2, 16.0, 0.0, seed=0)
    assert torch.equal(merge(W, a), W)
    a.B.data = torch.randn(5, 2)
    assert rel(unmerge(merge(W, a), a), W) < 1e-6
    with pytest.raises(ConfigurationError):
        merge(torch.randn(4, 4), a)


def test_zero_init_identity_in_model():
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    t = targets_tensor([DEFAULT_VOCAB.encode("ab ba")], SMALL)
    m.eval()
    on = m.lm_forward(None, t, adapters_active=True)
    off = m.lm_forward(None, t, adapters_active=False)
    assert rel(on, off) <= 1e-6


def test_model_merge_matches_dynamic():
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    for a in m.adapters.values():
        a.B.data = torch.randn_like(a.B) * 0.1
    m.eval()
    t = targets_tensor([DEFAULT_VOCAB.encode("dab add")], SMALL)
    dyn = text_logits(m, t)
    for i, layer in enumerate(m.lm.layers):
        for s in SMALL.lora_sites:
            w = layer.site(s).weight
            w.data = merge(w, m.adapters[m.site_key(i, s)])
    m.adapters_active = False
    assert rel(text_logits(m, t), dyn) < 1e-5


def test_param_count_formula_matches_enumeration():
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    mask = lora.mask_for_strategy(Strategy.TEXT_ONLY, m)
    shapes = []
    for layer in m.lm.layers:
        for s in SMALL.lora_sites:
            o, i = layer.site(s).weight.shape
            shapes.append((i, o))
    assert lora.trainable_count(m, mask) == lora.lora_count(shapes, SMALL.lora_rank)
    assert lora.trainable_count(m, mask) == sum(a.A.numel() + a.B.numel() for a in m.adapters.values())


def test_full_scale_counts():
    # attention projections only: 28 layers * 64 * (q 7168 + k 4096 + v 4096 + o 7168)
    qkvo = lora.full_scale_lora_count(FULL_SCALE)
    assert qkvo == 28 * 64 * (7168 + 4096 + 4096 + 7168) == 40_370_176
    # every linear projection of the decoder lands on the quoted 161M
    everything = lora.full_scale_lora_count(FULL_SCALE, sites=("q", "k", "v", "o", "gate", "up", "down"))
    assert abs(everything - 161e6) / 161e6 < 0.05


def test_masks_per_strategy():
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    groups = {n: lora.param_group(n) for n, _ in m.named_parameters()}
    text = lora.mask_for_strategy("text", m)
    assert {groups[n] for n, t in text.items() if t} == {"adapters"}
    for s in ("speech", "text-then-speech"):
        mask = lora.mask_for_strategy(s, m)
        assert {groups[n] for n, t in mask.items() if t} == {"projector", "adapters"}
    with pytest.raises(UsageError):
        lora.mask_for_strategy("tts", m)
    with pytest.raises(UsageError):
        lora.mask_for_strategy("text", SpeechLLM(SMALL, seed=0))


def test_sites_cover_attention_and_mlp():
    m = SpeechLLM(SMALL, seed=0).attach_adapters()
    assert set(LORA_SITES) == {"q", "k", "v", "o", "up", "down"}
    assert len(m.adapters) == SMALL.decoder_layers * len(SMALL.lora_sites)
