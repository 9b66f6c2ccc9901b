"""Model, optimizer and run configuration.

Defaults are desk-scale. ``FULL_SCALE`` records the Whisper-large-v3 +
Qwen2.5-7B geometry for analytic parameter counting only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .vocab import ASR_PROMPT, BOS, DEFAULT_VOCAB, EOS, PAD

LORA_SITES = ("q", "k", "v", "o", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    fold_k: int = 5
    max_frames: int = 120
    vocab_size: int = len(DEFAULT_VOCAB)
    max_text_len: int = 64
    prompt_tokens: tuple = (ASR_PROMPT,)
    projector_hidden: int = 128
    ffn_mult: int = 4
    lora_rank: int = 4
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_sites: tuple = LORA_SITES

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))
        object.__setattr__(self, "lora_sites", tuple(self.lora_sites))
        for name in ("feature_dim", "encoder_layers", "decoder_layers", "model_dim",
                     "heads", "fold_k", "max_frames", "vocab_size", "max_text_len",
                     "projector_hidden", "ffn_mult", "lora_rank"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.model_dim % self.heads:
            raise ConfigurationError("model_dim must be divisible by heads")
        if len({PAD, BOS, EOS}) != 3 or max(PAD, BOS, EOS) >= self.vocab_size:
            raise ConfigurationError("vocabulary must hold distinct PAD/BOS/EOS")
        if PAD in self.prompt_tokens:
            raise ConfigurationError("prompt_tokens must not contain PAD")
        if any(not 0 <= t < self.vocab_size for t in self.prompt_tokens):
            raise ConfigurationError("prompt token outside vocabulary")
        if self.lora_rank > self.model_dim:
            raise ConfigurationError("lora_rank exceeds projection dimensions")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigurationError("lora_dropout must lie in [0, 1)")
        bad = set(self.lora_sites) - set(LORA_SITES)
        if bad:
            raise ConfigurationError(f"unknown LoRA sites {sorted(bad)}")

    @property
    def encoder_frames(self) -> int:
        # conv kernel 3, stride 2, padding 1
        return (self.max_frames - 1) // 2 + 1

    @property
    def acoustic_tokens(self) -> int:
        return self.encoder_frames // self.fold_k

    @property
    def max_positions(self) -> int:
        # prompt + acoustic prefix + BOS + text (incl. EOS)
        return len(self.prompt_tokens) + self.acoustic_tokens + 1 + self.max_text_len

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prompt_tokens"] = list(self.prompt_tokens)
        d["lora_sites"] = list(self.lora_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-5
    eps: float = 1e-8
    clip_norm: float = 1.0
    schedule_shape: str = "warmup-then-constant"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.base_lr <= 0 or self.warmup_steps < 1:
            raise ConfigurationError("base_lr and warmup_steps must be positive")
        if self.schedule_shape != "warmup-then-constant":
            raise ConfigurationError(f"unsupported schedule {self.schedule_shape!r}")

    def lr(self, step: int) -> float:
        return self.base_lr * min(1.0, step / self.warmup_steps)


PRETRAIN_OPT = OptimizerConfig(base_lr=1e-4, warmup_steps=1000)
TEXT_FT_OPT = OptimizerConfig(base_lr=5e-6, warmup_steps=100)


@dataclass(frozen=True)
class FullScaleGeometry:
    """Whisper-large-v3 encoder + Qwen2.5-7B-Instruct decoder, for counting only."""

    encoder_dim: int = 1280
    encoder_frames: int = 1500
    fold_k: int = 5
    projector_hidden: int = 2048
    lm_dim: int = 3584
    lm_layers: int = 28
    heads: int = 28
    kv_heads: int = 4
    head_dim: int = 128
    ffn_dim: int = 18944
    lora_rank: int = 64
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05

    def site_shapes(self) -> dict:
        """(in_dim, out_dim) of every linear projection in one decoder layer."""
        kv = self.kv_heads * self.head_dim
        return {
            "q": (self.lm_dim, self.heads * self.head_dim),
            "k": (self.lm_dim, kv),
            "v": (self.lm_dim, kv),
            "o": (self.heads * self.head_dim, self.lm_dim),
            "gate": (self.lm_dim, self.ffn_dim),
            "up": (self.lm_dim, self.ffn_dim),
            "down": (self.ffn_dim, self.lm_dim),
        }


FULL_SCALE = FullScaleGeometry()


OPT_FIELDS = ("pretrain_opt", "text_ft_opt", "speech_opt", "foundation_opt")


@dataclass
class RunConfig:
    """Everything a CLI run needs; echoed to disk next to its artifacts."""

    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_opt: OptimizerConfig = PRETRAIN_OPT
    text_ft_opt: OptimizerConfig = TEXT_FT_OPT
    speech_opt: OptimizerConfig = PRETRAIN_OPT
    foundation_opt: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(base_lr=2e-3, warmup_steps=100))
    seed: int = 0
    batch_size: int = 16
    foundation_epochs: int = 6
    foundation_echo_fraction: float = 0.5
    foundation_echo_mask: float = 0.0
    phase_a_min_epochs: int = 3
    phase_a_max_epochs: int = 5
    phase_a_tolerance: float = 0.01
    phase_b_epochs: int = 2
    speech_epochs: int = 6
    text_epochs: int = 3
    eval_interval: int = 50
    monitor_size: int = 64
    patience: int | None = None
    degrade_threshold: float = 0.02
    decode_max_len: int | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            **{k: dataclasses.asdict(getattr(self, k)) for k in OPT_FIELDS},
            **{f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name != "model" and f.name not in OPT_FIELDS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        for key in OPT_FIELDS:
            if key in d:
                kw[key] = OptimizerConfig(**d.pop(key))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown run config keys {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def derive_seed(root: int, name: str) -> int:
    """Stable child seed for a named randomness stream (data/init/dropout...)."""
    import hashlib

    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")

