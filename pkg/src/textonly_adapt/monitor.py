"""Real-time alignment monitor for text-only fine-tuning.

The monitor scores the current adapters on paired dev speech with every other
parameter frozen, so text-only training can be stopped (or rewound) before the
adapters lose their speech-to-text alignment.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import UsageError
from .model import EncodedSet, SpeechLLM, asr_logits, encode_utterances
from .vocab import PAD

EVAL_COLUMNS = ("step", "lm_train_loss", "asr_dev_loss", "ppl", "token_acc", "text_fraction_consumed")


@dataclass(frozen=True)
class EvalRecord:
    step: int
    lm_train_loss: float
    asr_dev_loss: float
    ppl: float
    token_acc: float
    text_fraction_consumed: float


@dataclass
class AlignmentCurve:
    records: list = field(default_factory=list)
    best_index: int = -1

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def best(self) -> EvalRecord:
        return self.records[self.best_index]


@torch.no_grad()
def teacher_forced_metrics(model: SpeechLLM, dev: EncodedSet, chunk: int = 64) -> tuple[float, float]:
    """(mean NLL, token accuracy) over non-PAD positions, dropout off."""
    was_training = model.training
    model.eval()
    nll, correct, count = 0.0, 0, 0
    try:
        for i in range(0, len(dev), chunk):
            part = dev.subset(range(i, min(i + chunk, len(dev))))
            logits = asr_logits(model, part.targets, frames=part.frames).double()
            keep = part.targets != PAD
            logp = torch.log_softmax(logits, -1)
            tok = part.targets.clamp_min(0)
            nll -= float(logp.gather(-1, tok[..., None])[..., 0][keep].sum())
            correct += int((logits.argmax(-1) == part.targets)[keep].sum())
            count += int(keep.sum())
    finally:
        model.train(was_training)
    return nll / count, correct / count


def evaluate_alignment(model: SpeechLLM, paired_dev, step: int = 0, lm_train_loss: float = float("nan"),
                       text_fraction: float = 0.0) -> EvalRecord:
    """Teacher-forced ASR loss / PPL / token accuracy of the model with its current
    adapters active. Reads parameters only."""
    if len(paired_dev) == 0:
        raise UsageError("alignment monitor needs a nonempty paired dev set")
    dev = paired_dev if isinstance(paired_dev, EncodedSet) else encode_utterances(model, paired_dev)
    prev = model.adapters_active
    model.adapters_active = True
    try:
        loss, acc = teacher_forced_metrics(model, dev)
    finally:
        model.adapters_active = prev
    return EvalRecord(int(step), float(lm_train_loss), loss, math.exp(loss), acc, float(text_fraction))


def update_curve(curve: AlignmentCurve, record: EvalRecord) -> AlignmentCurve:
    if curve.records and record.step <= curve.records[-1].step:
        raise UsageError(f"record step {record.step} not after {curve.records[-1].step}")
    records = curve.records + [record]
    best = curve.best_index
    if best < 0 or record.asr_dev_loss < records[best].asr_dev_loss:
        best = len(records) - 1
    return AlignmentCurve(records, best)


def degradation_report(curve: AlignmentCurve, rel_threshold: float = 0.02) -> dict:
    if not curve.records:
        raise UsageError("empty curve")
    best = curve.best
    final = curve.records[-1]
    after = curve.records[curve.best_index:]
    if len(after) >= 2:
        steps = np.array([r.step for r in after], dtype=float)
        losses = np.array([r.asr_dev_loss for r in after], dtype=float)
        slope = float(np.polyfit(steps, losses, 1)[0])
    else:
        slope = 0.0
    return {
        "best_step": best.step,
        "best_loss": best.asr_dev_loss,
        "text_fraction_at_best": best.text_fraction_consumed,
        "degraded": bool(final.asr_dev_loss > best.asr_dev_loss * (1 + rel_threshold)),
        "slope_after_best": slope,
    }


def write_curve_csv(curve: AlignmentCurve, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in curve.records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(r)])


def read_curve_csv(path) -> AlignmentCurve:
    curve = AlignmentCurve()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rec = EvalRecord(int(row["step"]), *(float(row[c]) for c in EVAL_COLUMNS[1:]))
            curve = update_curve(curve, rec)
    return curve
