"""Speech LLM: acoustic encoder -> frame-folding projector -> decoder-only LM with LoRA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import lora
from .config import ModelConfig, derive_seed
from .data import FeatureSequence, TextSample, Utterance
from .errors import CapacityError, ConfigurationError, EmptyProjectionError, UsageError
from .vocab import BOS, EOS, PAD


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def forward(self, x, causal: bool, adapters=None, training: bool = False):
        adapters = adapters or {}
        B, S, D = x.shape
        h = self.heads

        def proj(name, inp):
            return lora.apply(inp, getattr(self, name).weight, adapters.get(name), training)

        q, k, v = (proj(n, x).view(B, S, h, D // h).transpose(1, 2) for n in "qkv")
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return proj("o", y.transpose(1, 2).reshape(B, S, D))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x, adapters=None, training: bool = False):
        adapters = adapters or {}
        h = lora.apply(x, self.up.weight, adapters.get("up"), training) + self.up.bias
        return lora.apply(F.gelu(h), self.down.weight, adapters.get("down"), training) + self.down.bias


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, ffn_mult * dim)

    def site(self, name: str) -> nn.Linear:
        return getattr(self.mlp if name in ("up", "down") else self.attn, name)

    def forward(self, x, causal, adapters=None, training=False):
        x = x + self.attn(self.ln1(x), causal, adapters, training)
        return x + self.mlp(self.ln2(x), adapters, training)


class AcousticEncoder(nn.Module):
    """Stride-2 temporal convolution followed by bidirectional transformer layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = nn.Conv1d(cfg.feature_dim, cfg.model_dim, kernel_size=3, stride=2, padding=1)
        self.pos = nn.Parameter(torch.randn(cfg.encoder_frames, cfg.model_dim) * 0.02)
        self.layers = nn.ModuleList(Block(cfg.model_dim, cfg.heads, cfg.ffn_mult)
                                    for _ in range(cfg.encoder_layers))
        self.ln = nn.LayerNorm(cfg.model_dim)

    def forward(self, feats):
        x = F.gelu(self.conv(feats.transpose(1, 2))).transpose(1, 2)
        x = x + self.pos[: x.shape[1]]
        for layer in self.layers:
            x = layer(x, causal=False)
        return self.ln(x)


class Projector(nn.Module):
    """Fold ``fold_k`` consecutive frames feature-wise, then Linear-ReLU-Linear."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fold_k = cfg.fold_k
        self.fc1 = nn.Linear(cfg.fold_k * cfg.model_dim, cfg.projector_hidden)
        self.fc2 = nn.Linear(cfg.projector_hidden, cfg.model_dim)

    def forward(self, frames):
        B, T, D = frames.shape
        n = T // self.fold_k
        if n == 0:
            raise EmptyProjectionError(f"{T} frames cannot fill one fold of {self.fold_k}")
        folded = frames[:, : n * self.fold_k].reshape(B, n, self.fold_k * D)
        return self.fc2(F.relu(self.fc1(folded)))


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos = nn.Parameter(torch.randn(cfg.max_positions, cfg.model_dim) * 0.02)
        self.layers = nn.ModuleList(Block(cfg.model_dim, cfg.heads, cfg.ffn_mult)
                                    for _ in range(cfg.decoder_layers))
        self.ln = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)

    def forward(self, x, adapters_by_layer, training=False, offset: int = 0, positions=None):
        """``positions`` (one index per input slot) overrides the contiguous
        range starting at ``offset``."""
        S = x.shape[1]
        if positions is None:
            positions = torch.arange(offset, offset + S)
        top = int(positions.max()) + 1 if S else 0
        if top > self.pos.shape[0]:
            raise CapacityError(f"sequence reaching position {top} exceeds capacity {self.pos.shape[0]}")
        x = x + self.pos[positions]
        for layer, adapters in zip(self.layers, adapters_by_layer):
            x = layer(x, causal=True, adapters=adapters, training=training)
        return self.head(self.ln(x))


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)


class SpeechLLM(nn.Module):
    """Parameters live in four groups: ``encoder``, ``projector``, ``lm`` and ``adapters``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "init"))
            self.encoder = AcousticEncoder(cfg)
            self.projector = Projector(cfg)
            self.lm = DecoderLM(cfg)
            self.lm.apply(_init_weights)
        self.adapters = nn.ModuleDict()
        self.adapters_active = True

    # -- adapters -----------------------------------------------------------
    @staticmethod
    def site_key(layer: int, proj: str) -> str:
        return f"layer{layer}_{proj}"

    def site_names(self) -> list[str]:
        return [self.site_key(i, s) for i in range(self.config.decoder_layers) for s in self.config.lora_sites]

    def attach_adapters(self, seed: int | None = None, rank: int | None = None,
                        alpha: float | None = None, dropout_p: float | None = None):
        cfg = self.config
        rank = cfg.lora_rank if rank is None else rank
        alpha = cfg.lora_alpha if alpha is None else alpha
        dropout_p = cfg.lora_dropout if dropout_p is None else dropout_p
        seed = self.seed if seed is None else seed
        dtype = self.lm.head.weight.dtype
        for i, layer in enumerate(self.lm.layers):
            for s in cfg.lora_sites:
                w = layer.site(s).weight
                key = self.site_key(i, s)
                self.adapters[key] = lora.init_adapter(
                    w.shape[1], w.shape[0], rank, alpha, dropout_p,
                    derive_seed(seed, f"adapter:{key}"), site=key, dtype=dtype)
        return self

    def set_adapters(self, adapters: dict[str, lora.LoraAdapter]):
        """Replace adapters wholesale (used to re-attach text-tuned LoRA)."""
        valid = set(self.site_names())
        unknown = set(adapters) - valid
        if unknown:
            raise ConfigurationError(f"adapter sites {sorted(unknown)} not in the LM")
        self.adapters = nn.ModuleDict(adapters)
        return self

    def _adapters_by_layer(self, active: bool):
        if not active or len(self.adapters) == 0:
            return [None] * self.config.decoder_layers
        return [{s: self.adapters[self.site_key(i, s)] for s in self.config.lora_sites
                 if self.site_key(i, s) in self.adapters}
                for i in range(self.config.decoder_layers)]

    # -- forward pieces -----------------------------------------------------
    def encode(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T, feature_dim) -> (B, ceil(T/2), model_dim)."""
        if feats.ndim != 3 or feats.shape[-1] != self.config.feature_dim:
            raise ConfigurationError(
                f"features of shape {tuple(feats.shape)} do not match feature_dim={self.config.feature_dim}")
        if feats.shape[1] > self.config.max_frames:
            raise ConfigurationError(f"{feats.shape[1]} frames exceed max_frames={self.config.max_frames}")
        return self.encoder(feats)

    def project(self, frames: torch.Tensor) -> torch.Tensor:
        return self.projector(frames)

    def lm_forward(self, prefix: torch.Tensor | None, inputs: torch.Tensor,
                   adapters_active: bool | None = None, position_offset: int = 0,
                   prefix_gap: int = 0) -> torch.Tensor:
        """Logits for each input position given prompt + optional acoustic prefix.

        ``inputs`` are teacher-forcing tokens (BOS followed by the shifted target).
        ``prefix_gap`` skips that many position ids between the prompt (or
        prefix) and the inputs without placing anything there.
        """
        active = self.adapters_active if adapters_active is None else adapters_active
        B = inputs.shape[0]
        prompt = torch.tensor(self.config.prompt_tokens, dtype=torch.long).expand(B, -1)
        parts = [self.lm.tok(prompt)]
        if prefix is not None and prefix.shape[1] > 0:
            parts.append(prefix)
        head = sum(p.shape[1] for p in parts)
        parts.append(self.lm.tok(inputs))
        x = torch.cat(parts, dim=1)
        positions = torch.cat([torch.arange(head), torch.arange(inputs.shape[1]) + head + prefix_gap]) + position_offset
        logits = self.lm(x, self._adapters_by_layer(active), training=self.training, positions=positions)
        return logits[:, -inputs.shape[1]:]

    def acoustic_prefix(self, feats=None, frames=None):
        if frames is None:
            frames = self.encode(feats)
        return self.project(frames)


# -- batching helpers -------------------------------------------------------

def features_tensor(seqs: Sequence[FeatureSequence], cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    out = np.zeros((len(seqs), cfg.max_frames, cfg.feature_dim), dtype=np.float64)
    for i, fs in enumerate(seqs):
        fr = np.asarray(fs.frames)
        if fr.ndim != 2 or fr.shape[1] != cfg.feature_dim:
            raise ConfigurationError(f"feature dim {fr.shape} does not match {cfg.feature_dim}")
        if fr.shape[0] > cfg.max_frames:
            raise ConfigurationError(f"{fr.shape[0]} frames exceed max_frames={cfg.max_frames}")
        out[i, : fr.shape[0]] = fr
    return torch.from_numpy(out).to(dtype)


def targets_tensor(texts: Sequence[Sequence[int]], cfg: ModelConfig) -> torch.Tensor:
    L = max(len(t) for t in texts)
    if L > cfg.max_text_len:
        raise CapacityError(f"target of {L} tokens exceeds max_text_len={cfg.max_text_len}")
    out = torch.full((len(texts), L), PAD, dtype=torch.long)
    for i, t in enumerate(texts):
        out[i, : len(t)] = torch.as_tensor(list(t), dtype=torch.long)
    return out


def shift_right(targets: torch.Tensor) -> torch.Tensor:
    bos = torch.full((targets.shape[0], 1), BOS, dtype=torch.long)
    return torch.cat([bos, targets[:, :-1]], dim=1)


def masked_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean NLL over non-PAD targets."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=PAD, reduction="mean")


def asr_logits(model: SpeechLLM, targets: torch.Tensor, feats=None, frames=None) -> torch.Tensor:
    prefix = model.acoustic_prefix(feats=feats, frames=frames)
    return model.lm_forward(prefix, shift_right(targets))


def text_logits(model: SpeechLLM, targets: torch.Tensor, position_offset: int | None = None) -> torch.Tensor:
    """Text-only logits. By default the prompt and transcript keep the position
    ids they have in ASR decoding, with the acoustic slots left out; an integer
    ``position_offset`` packs the sequence contiguously from that position."""
    if position_offset is None:
        return model.lm_forward(None, shift_right(targets), prefix_gap=model.config.acoustic_tokens)
    return model.lm_forward(None, shift_right(targets), position_offset=position_offset)


def asr_loss(model: SpeechLLM, batch: Sequence[Utterance]) -> torch.Tensor:
    if len(batch) == 0:
        raise UsageError("asr_loss needs a nonempty batch")
    cfg = model.config
    dtype = model.lm.head.weight.dtype
    targets = targets_tensor([u.text for u in batch], cfg)
    feats = features_tensor([u.features for u in batch], cfg, dtype)
    return masked_nll(asr_logits(model, targets, feats=feats), targets)


def text_loss(model: SpeechLLM, batch: Sequence[TextSample]) -> torch.Tensor:
    if len(batch) == 0:
        raise UsageError("text_loss needs a nonempty batch")
    targets = targets_tensor([s.text for s in batch], model.config)
    return masked_nll(text_logits(model, targets), targets)


@dataclass
class EncodedSet:
    """Utterances with their (frozen) encoder output cached."""

    ids: list
    frames: torch.Tensor  # (N, encoder_frames, model_dim)
    targets: torch.Tensor  # (N, L) PAD-padded, ending with EOS
    texts: list  # token tuples

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "EncodedSet":
        idx = list(idx)
        sub_t = self.targets[idx]
        L = int((sub_t != PAD).sum(1).max()) if len(idx) else 0
        return EncodedSet([self.ids[i] for i in idx], self.frames[idx], sub_t[:, :L], [self.texts[i] for i in idx])


@torch.no_grad()
def encode_utterances(model: SpeechLLM, utts: Sequence[Utterance], chunk: int = 64) -> EncodedSet:
    if len(utts) == 0:
        raise UsageError("no utterances to encode")
    cfg = model.config
    dtype = model.lm.head.weight.dtype
    was_training = model.training
    model.eval()
    try:
        frames = [model.encode(features_tensor([u.features for u in utts[i: i + chunk]], cfg, dtype))
                  for i in range(0, len(utts), chunk)]
    finally:
        model.train(was_training)
    return EncodedSet([u.id for u in utts], torch.cat(frames), targets_tensor([u.text for u in utts], cfg),
                      [u.text for u in utts])


@torch.no_grad()
def decode_frames(model: SpeechLLM, frames: torch.Tensor, max_len: int) -> list[list[int]]:
    """Batched greedy decoding from encoder frames; stops at EOS or ``max_len``."""
    B = frames.shape[0]
    if max_len <= 0:
        return [[] for _ in range(B)]
    was_training = model.training
    model.eval()
    try:
        prefix = model.project(frames)
        inputs = torch.full((B, 1), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        out = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = model.lm_forward(prefix, inputs)
            nxt = logits[:, -1].argmax(-1)
            for i in range(B):
                if not done[i]:
                    out[i].append(int(nxt[i]))
            done |= nxt == EOS
            if bool(done.all()):
                break
            inputs = torch.cat([inputs, nxt[:, None]], dim=1)
    finally:
        model.train(was_training)
    return [seq[:-1] if seq and seq[-1] == EOS else seq for seq in out]


def decode_greedy(model: SpeechLLM, features: FeatureSequence, max_len: int | None = None) -> list[int]:
    """Greedy transcription of one utterance; the returned tokens exclude EOS."""
    cfg = model.config
    max_len = cfg.max_text_len if max_len is None else max_len
    if max_len <= 0:
        return []
    feats = features_tensor([features], cfg, model.lm.head.weight.dtype)
    with torch.no_grad():
        frames = model.encode(feats)
    return decode_frames(model, frames, min(max_len, cfg.max_text_len))[0]
