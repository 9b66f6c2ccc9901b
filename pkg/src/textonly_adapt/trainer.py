"""Training stages.

Foundation: base LM on general text (stands in for the pretrained LLM).
Stage 1 (source pretraining): projector only, then projector + LoRA, on paired source speech.
Stage 2 (target adaptation): text-only LoRA tuning under the alignment monitor,
speech fine-tuning (projector + LoRA), or text-then-speech.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import lora
from .checkpoint import save_checkpoint
from .config import OptimizerConfig, RunConfig, derive_seed
from .data import TextSample, Utterance, batcher
from .errors import ConfigurationError, TrainingAborted, UsageError
from .model import (EncodedSet, SpeechLLM, asr_logits, encode_utterances, masked_nll,
                    shift_right, targets_tensor, text_logits)
from .monitor import AlignmentCurve, evaluate_alignment, teacher_forced_metrics, update_curve
from .optim import TrainState, adam_step, clip_grads
from .vocab import EOS, PAD

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "stage", "strategy", "lr", "train_loss", "asr_dev_loss", "ppl", "token_acc")


class MetricsLog:
    """In-memory metrics stream, optionally mirrored to a CSV file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)

    def add(self, **row):
        row = {c: row.get(c, "") for c in METRIC_COLUMNS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([row[c] for c in METRIC_COLUMNS])


@dataclass
class StageResult:
    state: TrainState
    history: list = field(default_factory=list)  # one dict per evaluation point
    best_step: int = 0
    best_loss: float = math.inf
    curve: AlignmentCurve | None = None

    @property
    def losses(self) -> list[float]:
        return [h["train_loss"] for h in self.history if "train_loss" in h]


def snapshot(model: SpeechLLM, groups=None) -> dict:
    return {n: p.detach().clone() for n, p in model.named_parameters()
            if groups is None or lora.param_group(n) in groups}


def restore(model: SpeechLLM, snap: dict):
    params = dict(model.named_parameters())
    with torch.no_grad():
        for n, t in snap.items():
            params[n].copy_(t)


def _as_encoded(model, data) -> EncodedSet:
    if isinstance(data, EncodedSet):
        return data
    return encode_utterances(model, data)


class Loop:
    """Single mutation stream: forward, masked gradient, clip, Adam."""

    def __init__(self, model: SpeechLLM, state: TrainState, opt: OptimizerConfig,
                 stage: str, strategy: str = "", metrics: MetricsLog | None = None):
        self.model = model
        self.state = state
        self.opt = opt
        self.stage = stage
        self.strategy = strategy
        self.metrics = metrics
        self.set_mask(state.mask)

    def set_mask(self, mask: dict):
        self.state.mask = dict(mask)
        for n, p in self.model.named_parameters():
            p.requires_grad_(bool(mask.get(n, False)))

    def step(self, loss_fn: Callable[[], torch.Tensor]) -> float:
        st = self.state
        torch.manual_seed(derive_seed(st.seed, f"dropout:{st.label}:{st.step}"))
        self.model.train()
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at step {st.step} of {self.stage}",
                                  {"step": st.step, "stage": self.stage, "loss": float(loss)})
        named = [(n, p) for n, p in self.model.named_parameters() if st.mask.get(n, False)]
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        grads = {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}
        clip_grads(grads, self.opt.clip_norm)
        lr = self.opt.lr(st.step + 1)
        adam_step(st, dict(self.model.named_parameters()), grads, self.opt, lr)
        value = float(loss.detach())
        if self.metrics is not None:
            self.metrics.add(step=st.step, stage=self.stage, strategy=self.strategy, lr=lr, train_loss=value)
        return value

    def log_eval(self, loss: float, acc: float):
        if self.metrics is not None:
            self.metrics.add(step=self.state.step, stage=self.stage, strategy=self.strategy,
                             asr_dev_loss=loss, ppl=math.exp(loss), token_acc=acc)


def _asr_batch_loss(model, enc: EncodedSet, idx):
    part = enc.subset(idx)
    return masked_nll(asr_logits(model, part.targets, frames=part.frames), part.targets)


# -- foundation ----------------------------------------------------------------

def pretrain_foundation(model: SpeechLLM, general_text: Sequence[TextSample], cfg: RunConfig,
                        metrics: MetricsLog | None = None) -> StageResult:
    """Train the base LM on general-domain text.

    Plain batches sit at a random absolute position offset so every learned
    position embedding is exercised. A ``foundation_echo_fraction`` of batches
    instead place the sentence's own token embeddings in the acoustic-prefix
    slots before it, giving the LM the in-context copying skill a large
    pretrained LLM brings to speech alignment. A ``foundation_echo_mask``
    share of those slots is blanked, so the LM also learns to fall back on its
    own prior where the prefix says nothing.
    """
    if not general_text:
        raise UsageError("foundation pretraining needs text")
    mcfg = model.config
    state = TrainState(lora.mask_for_stage("foundation", model), seed=cfg.seed, label="foundation")
    loop = Loop(model, state, cfg.foundation_opt, "foundation", metrics=metrics)
    rng = np.random.default_rng(derive_seed(cfg.seed, "foundation-offsets"))
    data_seed = derive_seed(cfg.seed, "data")
    result = StageResult(state)
    E = mcfg.acoustic_tokens
    for epoch in range(cfg.foundation_epochs):
        losses = []
        for batch in batcher(list(general_text), cfg.batch_size, data_seed, epoch):
            targets = targets_tensor([s.text for s in batch], mcfg)
            if rng.random() < cfg.foundation_echo_fraction and targets.shape[1] - 1 <= E:
                echo = torch.full((len(batch), E), PAD, dtype=torch.long)
                echo[:, : targets.shape[1] - 1] = targets[:, :-1].masked_fill(targets[:, :-1] == EOS, PAD)
                blank = torch.from_numpy(rng.random(echo.shape) < cfg.foundation_echo_mask)
                losses.append(loop.step(lambda: masked_nll(
                    model.lm_forward(model.lm.tok(echo).masked_fill(blank[..., None], 0.0), shift_right(targets)),
                    targets)))
                continue
            max_off = mcfg.max_positions - (len(mcfg.prompt_tokens) + targets.shape[1])
            off = int(rng.integers(0, max_off + 1))
            losses.append(loop.step(lambda: masked_nll(text_logits(model, targets, off), targets)))
        result.history.append({"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses))})
        log.info("foundation epoch %d loss %.4f", epoch, np.mean(losses))
    model.eval()
    return result


# -- stage 1 -------------------------------------------------------------------

def pretrain_source(model: SpeechLLM, paired_train, paired_dev, cfg: RunConfig,
                    metrics: MetricsLog | None = None, out_dir=None) -> StageResult:
    """Phase A trains the projector until dev loss stalls; phase B trains projector + LoRA.

    The best-dev parameters (by teacher-forced dev loss at epoch ends) are
    restored before returning.
    """
    if len(paired_train) == 0 or len(paired_dev) == 0:
        raise UsageError("source pretraining needs nonempty train and dev sets")
    if len(model.adapters) == 0:
        model.attach_adapters(seed=derive_seed(cfg.seed, "adapters"))
    train = _as_encoded(model, paired_train)
    dev = _as_encoded(model, paired_dev)
    state = TrainState(lora.mask_for_stage("pretrain-projector", model), seed=cfg.seed, label="pretrain")
    loop = Loop(model, state, cfg.pretrain_opt, "pretrain", metrics=metrics)
    data_seed = derive_seed(cfg.seed, "data")
    result = StageResult(state)
    groups = ("projector", "adapters")
    best = snapshot(model, groups)
    result.best_loss, _ = teacher_forced_metrics(model, dev)
    epoch = 0

    def run_epoch(phase):
        nonlocal epoch, best
        losses = [loop.step(lambda b=b: _asr_batch_loss(model, train, b))
                  for b in batcher(list(range(len(train))), cfg.batch_size, data_seed, epoch)]
        dev_loss, dev_acc = teacher_forced_metrics(model, dev)
        loop.log_eval(dev_loss, dev_acc)
        result.history.append({"phase": phase, "epoch": epoch, "step": state.step,
                               "train_loss": float(np.mean(losses)), "dev_loss": dev_loss, "dev_acc": dev_acc})
        log.info("pretrain %s epoch %d train %.4f dev %.4f acc %.4f", phase, epoch, np.mean(losses), dev_loss, dev_acc)
        if dev_loss < result.best_loss:
            result.best_loss, result.best_step = dev_loss, state.step
            best = snapshot(model, groups)
            if out_dir:
                save_checkpoint(model, Path(out_dir) / "best.ckpt", {"stage": "pretrain", "step": state.step})
        epoch += 1
        return dev_loss

    prev = result.best_loss
    for i in range(cfg.phase_a_max_epochs):
        cur = run_epoch("A")
        if i + 1 >= cfg.phase_a_min_epochs and (prev - cur) / max(prev, 1e-12) < cfg.phase_a_tolerance:
            break
        prev = cur
    loop.set_mask(lora.mask_for_stage("pretrain-joint", model))
    for _ in range(cfg.phase_b_epochs):
        run_epoch("B")
    restore(model, best)
    model.eval()
    return result


# -- stage 2 -------------------------------------------------------------------

def adapt_text_only(model: SpeechLLM, target_text: Sequence[TextSample], monitor_set, cfg: RunConfig,
                    opt: OptimizerConfig | None = None, metrics: MetricsLog | None = None,
                    out_dir=None, strategy: str = "text", select_best: bool = True) -> StageResult:
    """Tune only the LoRA adapters on unpaired text while the alignment monitor
    scores paired dev speech every ``eval_interval`` steps.

    Returns with the adapters of the monitored optimum restored (which may be
    the starting point, step 0) and the full curve in ``result.curve``.
    ``select_best=False`` keeps the final adapters instead.
    """
    if monitor_set is None or len(monitor_set) == 0:
        raise ConfigurationError("text-only adaptation requires a nonempty paired monitor set")
    if not target_text:
        raise UsageError("text-only adaptation needs target text")
    opt = opt or cfg.text_ft_opt
    monitor = _as_encoded(model, monitor_set)
    state = TrainState(lora.mask_for_strategy(lora.Strategy.TEXT_ONLY, model), seed=cfg.seed, label="text")
    loop = Loop(model, state, opt, "adapt", strategy, metrics)
    data_seed = derive_seed(cfg.seed, "text-data")
    total = cfg.text_epochs * len(target_text)
    consumed = 0
    window: list[float] = []
    result = StageResult(state, curve=AlignmentCurve())
    best = snapshot(model, ("adapters",))

    def record():
        nonlocal best
        lm = float(np.mean(window)) if window else float("nan")
        rec = evaluate_alignment(model, monitor, state.step, lm, consumed / total)
        window.clear()
        improved = result.curve.best_index < 0 or rec.asr_dev_loss < result.curve.best.asr_dev_loss
        result.curve = update_curve(result.curve, rec)
        loop.log_eval(rec.asr_dev_loss, rec.token_acc)
        result.history.append({"step": rec.step, "lm_train_loss": lm, "dev_loss": rec.asr_dev_loss,
                               "dev_acc": rec.token_acc})
        if improved:
            best = snapshot(model, ("adapters",))
            if out_dir:
                save_checkpoint(model, Path(out_dir) / "best.ckpt", {"stage": "adapt", "strategy": strategy,
                                                                     "step": rec.step})
        return improved

    record()
    stale = 0
    stop = False
    for epoch in range(cfg.text_epochs):
        for batch in batcher(list(target_text), cfg.batch_size, data_seed, epoch):
            targets = targets_tensor([s.text for s in batch], model.config)
            window.append(loop.step(lambda: masked_nll(text_logits(model, targets), targets)))
            consumed += len(batch)
            if state.step % cfg.eval_interval == 0:
                stale = 0 if record() else stale + 1
                if cfg.patience is not None and stale >= cfg.patience:
                    stop = True
                    break
        if stop:
            break
    if result.curve.records[-1].step != state.step:
        record()
    if select_best:
        restore(model, best)
    result.best_step = result.curve.best.step
    result.best_loss = result.curve.best.asr_dev_loss
    model.eval()
    return result


def adapt_speech(model: SpeechLLM, target_paired, dev, cfg: RunConfig, opt: OptimizerConfig | None = None,
                 metrics: MetricsLog | None = None, out_dir=None, strategy: str = "speech",
                 select_best: bool = True) -> StageResult:
    """Fine-tune projector + LoRA on paired target speech; best dev epoch restored
    unless ``select_best`` is off."""
    if len(target_paired) == 0 or len(dev) == 0:
        raise UsageError("speech fine-tuning needs nonempty train and dev sets")
    opt = opt or cfg.speech_opt
    train = _as_encoded(model, target_paired)
    dev = _as_encoded(model, dev)
    state = TrainState(lora.mask_for_strategy(lora.Strategy.SPEECH, model), seed=cfg.seed, label=strategy)
    loop = Loop(model, state, opt, "adapt", strategy, metrics)
    data_seed = derive_seed(cfg.seed, "speech-data")
    groups = ("projector", "adapters")
    result = StageResult(state)
    result.best_loss, _ = teacher_forced_metrics(model, dev)
    best = snapshot(model, groups)
    for epoch in range(cfg.speech_epochs):
        losses = [loop.step(lambda b=b: _asr_batch_loss(model, train, b))
                  for b in batcher(list(range(len(train))), cfg.batch_size, data_seed, epoch)]
        dev_loss, dev_acc = teacher_forced_metrics(model, dev)
        loop.log_eval(dev_loss, dev_acc)
        result.history.append({"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses)),
                               "dev_loss": dev_loss, "dev_acc": dev_acc})
        if dev_loss < result.best_loss:
            result.best_loss, result.best_step = dev_loss, state.step
            best = snapshot(model, groups)
            if out_dir:
                save_checkpoint(model, Path(out_dir) / "best.ckpt", {"stage": "adapt", "strategy": strategy,
                                                                     "step": state.step})
    if select_best:
        restore(model, best)
    model.eval()
    return result


def adapt_text_then_speech(model: SpeechLLM, target_text, target_paired, monitor_set, dev, cfg: RunConfig,
                           metrics: MetricsLog | None = None, out_dir=None,
                           select_best: bool = True) -> tuple[StageResult, StageResult]:
    """Text-only adaptation, then speech fine-tuning starting from the text-tuned LoRA.
    ``select_best`` applies to the speech phase; the text phase always hands on
    its monitored optimum."""
    text_res = adapt_text_only(model, target_text, monitor_set, cfg, metrics=metrics,
                               strategy="text-then-speech")
    model.provenance = {**getattr(model, "provenance", {}),
                        "text_adapters": {"strategy": "text", "best_step": text_res.best_step,
                                          "best_loss": text_res.best_loss}}
    speech_res = adapt_speech(model, target_paired, dev, cfg, metrics=metrics, out_dir=out_dir,
                              strategy="text-then-speech", select_best=select_best)
    return text_res, speech_res
