"""Masked Adam with decoupled weight decay and a warmup-then-constant schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import OptimizerConfig
from .errors import TrainingAborted, UsageError


@dataclass
class TrainState:
    mask: dict  # parameter name -> trainable flag
    seed: int = 0
    label: str = ""
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v), trainable params only

    def trainable(self) -> list[str]:
        return [n for n, t in self.mask.items() if t]

    def state_dict(self) -> dict:
        return {"step": self.step, "seed": self.seed, "label": self.label, "mask": dict(self.mask),
                "moments": {n: (m.clone(), v.clone()) for n, (m, v) in self.moments.items()}}

    @classmethod
    def from_state_dict(cls, d: dict) -> "TrainState":
        return cls(mask=dict(d["mask"]), seed=d["seed"], label=d["label"], step=d["step"],
                   moments={n: (m.clone(), v.clone()) for n, (m, v) in d["moments"].items()})


@torch.no_grad()
def adam_step(state: TrainState, params: dict, grads: dict, cfg: OptimizerConfig, lr: float):
    """One in-place update of the masked-trainable entries of ``params``.

    ``grads`` may only name trainable parameters; a nonzero gradient for a
    frozen parameter is a usage error, a non-finite one aborts training.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not state.mask.get(name, False):
            if torch.count_nonzero(g):
                raise UsageError(f"gradient supplied for frozen parameter {name!r}")
            continue
        if not torch.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for {name!r}", {"step": state.step, "param": name})
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    for name in state.trainable():
        g = grads.get(name)
        p = params[name]
        if g is None:
            g = torch.zeros_like(p)
        if name not in state.moments:
            state.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
        m, v = state.moments[name]
        if cfg.weight_decay:
            p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def clip_grads(grads: dict, max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total
