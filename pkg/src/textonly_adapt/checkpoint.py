"""Self-describing checkpoint archive.

A zip of ``.npy`` members (readable with ``numpy.load``) plus ``meta.json``:

    meta.json                    config echo, adapter hyper-parameters, metadata
    weights/<param name>.npy     encoder / projector / lm tensors
    adapters/<site>/A.npy, B.npy LoRA pairs keyed by attachment site
    optimizer/...                optional TrainState moments

Members are sorted and time-stamped at a fixed epoch, so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import lora
from .config import ModelConfig
from .errors import ConfigurationError
from .model import SpeechLLM
from .optim import TrainState

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _write_zip(path, members: dict):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def adapter_arrays(model: SpeechLLM) -> dict:
    return {site: (a.A.detach().clone(), a.B.detach().clone()) for site, a in model.adapters.items()}


def save_checkpoint(model: SpeechLLM, path, meta: dict | None = None, state: TrainState | None = None):
    members = {}
    for name, p in model.named_parameters():
        if not name.startswith("adapters."):
            members[f"weights/{name}.npy"] = _npy_bytes(p)
    adapters_meta = {}
    for site, a in model.adapters.items():
        members[f"adapters/{site}/A.npy"] = _npy_bytes(a.A)
        members[f"adapters/{site}/B.npy"] = _npy_bytes(a.B)
        adapters_meta[site] = {"alpha": a.alpha, "dropout_p": a.dropout_p, "rank": a.rank}
    info = {
        "format": "speechllm-checkpoint/1",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "adapters": adapters_meta,
        "adapters_active": model.adapters_active,
        "provenance": getattr(model, "provenance", {}),
        "meta": meta or {},
    }
    if state is not None:
        info["train_state"] = {"step": state.step, "seed": state.seed, "label": state.label,
                               "mask": state.mask}
        for name, (m, v) in state.moments.items():
            members[f"optimizer/{name}/m.npy"] = _npy_bytes(m)
            members[f"optimizer/{name}/v.npy"] = _npy_bytes(v)
    members["meta.json"] = json.dumps(info, sort_keys=True, indent=1).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_zip(path, members)


def _read(zf: zipfile.ZipFile, name: str) -> torch.Tensor:
    return torch.from_numpy(np.load(io.BytesIO(zf.read(name)), allow_pickle=False).copy())


def read_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_checkpoint(path, with_state: bool = False):
    """Rebuild the model (and optionally its TrainState) from an archive."""
    with zipfile.ZipFile(path) as zf:
        info = json.loads(zf.read("meta.json"))
        cfg = ModelConfig.from_dict(info["config"])
        model = SpeechLLM(cfg, seed=info["seed"])
        names = set(zf.namelist())
        adapters = {}
        for site, hp in info["adapters"].items():
            A = _read(zf, f"adapters/{site}/A.npy")
            B = _read(zf, f"adapters/{site}/B.npy")
            adapters[site] = lora.LoraAdapter(A, B, hp["alpha"], hp["dropout_p"], site)
        model.set_adapters(adapters)
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name, p in params.items():
                if name.startswith("adapters."):
                    continue
                key = f"weights/{name}.npy"
                if key not in names:
                    raise ConfigurationError(f"checkpoint {path} lacks weight {name!r}")
                t = _read(zf, key)
                if t.shape != p.shape:
                    raise ConfigurationError(f"shape mismatch for {name!r}: {tuple(t.shape)} vs {tuple(p.shape)}")
                p.data = t
        model.adapters_active = info.get("adapters_active", True)
        model.provenance = info.get("provenance", {})
        model.checkpoint_meta = info.get("meta", {})
        if not with_state:
            return model
        state = None
        if "train_state" in info:
            ts = info["train_state"]
            moments = {}
            for name in ts["mask"]:
                if f"optimizer/{name}/m.npy" in names:
                    moments[name] = (_read(zf, f"optimizer/{name}/m.npy"), _read(zf, f"optimizer/{name}/v.npy"))
            state = TrainState(mask=ts["mask"], seed=ts["seed"], label=ts["label"], step=ts["step"], moments=moments)
        return model, state


def save_adapters(model: SpeechLLM, path, meta: dict | None = None):
    """Adapters alone, e.g. the text-tuned LoRA to re-attach later."""
    members = {}
    hp = {}
    for site, a in model.adapters.items():
        members[f"adapters/{site}/A.npy"] = _npy_bytes(a.A)
        members[f"adapters/{site}/B.npy"] = _npy_bytes(a.B)
        hp[site] = {"alpha": a.alpha, "dropout_p": a.dropout_p, "rank": a.rank}
    members["meta.json"] = json.dumps({"format": "speechllm-adapters/1", "adapters": hp, "meta": meta or {}},
                                      sort_keys=True, indent=1).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_zip(path, members)


def load_adapters(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        info = json.loads(zf.read("meta.json"))
        return {site: lora.LoraAdapter(_read(zf, f"adapters/{site}/A.npy"), _read(zf, f"adapters/{site}/B.npy"),
                                       hp["alpha"], hp["dropout_p"], site)
                for site, hp in info["adapters"].items()}


def weight_payload(path) -> dict:
    """Raw bytes of every array member, for bit-exact comparisons."""
    with zipfile.ZipFile(path) as zf:
        return {n: zf.read(n) for n in zf.namelist() if n.endswith(".npy")}
