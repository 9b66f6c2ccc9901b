import numpy as np
import pytest
import torch
import zipfile

from textonly_adapt.checkpoint import (load_adapters, load_checkpoint, read_meta, save_adapters, save_checkpoint,
                                       weight_payload)
from textonly_adapt.errors import ConfigurationError
from textonly_adapt.model import SpeechLLM, targets_tensor, text_logits
from textonly_adapt.vocab import DEFAULT_VOCAB

from conftest import SMALL


def trained_like(seed=0):
    m = SpeechLLM(SMALL, seed=seed).attach_adapters()
    g = torch.Generator().manual_seed(seed)
    for a in m.adapters.values():
        a.B.data = torch.randn(a.B.shape, generator=g)
    return m


def test_round_trip_is_bit_exact(tmp_path):
    m = trained_like()
    save_checkpoint(m, tmp_path / "a.ckpt", {"stage": "test"})
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt", {"stage": "test"})
    assert weight_payload(tmp_path / "a.ckpt") == weight_payload(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    t = targets_tensor([DEFAULT_VOCAB.encode("ab")], SMALL)
    m.eval(), back.eval()
    assert torch.equal(text_logits(m, t), text_logits(back, t))
    assert read_meta(tmp_path / "a.ckpt")["meta"] == {"stage": "test"}


def test_members_are_plain_npy(tmp_path):
    m = trained_like()
    save_checkpoint(m, tmp_path / "a.ckpt")
    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        names = zf.namelist()
        assert "meta.json" in names
        assert any(n.startswith("adapters/layer0_q/") for n in names)
        import io

        arr = np.load(io.BytesIO(zf.read("adapters/layer0_q/B.npy")))
    assert np.array_equal(arr, m.adapters["layer0_q"].B.detach().numpy())


def test_adapters_extract_and_reattach(tmp_path):
    m = trained_like(seed=1)
    save_adapters(m, tmp_path / "lora.ckpt")
    other = SpeechLLM(SMALL, seed=1)
    other.set_adapters(load_adapters(tmp_path / "lora.ckpt"))
    for k, a in m.adapters.items():
        assert torch.equal(a.A, other.adapters[k].A) and torch.equal(a.B, other.adapters[k].B)
    with pytest.raises(ConfigurationError):
        other.set_adapters({"layer9_q": m.adapters["layer0_q"]})


def test_shape_mismatch_rejected(tmp_path):
    save_checkpoint(trained_like(), tmp_path / "a.ckpt")
    import json

    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(members["meta.json"])
    meta["config"]["projector_hidden"] = 8
    members["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
        for n, b in members.items():
            zf.writestr(n, b)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "bad.ckpt")
