"""Desk-scale comparison: benchmark -> foundation LM -> source pretraining ->
the three target adaptation strategies -> cross-domain WER table."""

from __future__ import annotations

import copy
import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field

from .config import ModelConfig, OptimizerConfig, RunConfig
from .data import Benchmark, generate_benchmark, source_domain, target_domain
from .lora import Strategy
from .model import SpeechLLM, encode_utterances
from .monitor import degradation_report
from .trainer import (MetricsLog, StageResult, adapt_speech, adapt_text_only, adapt_text_then_speech,
                      pretrain_foundation, pretrain_source)
from .wer import DomainReport, cross_domain_report

log = logging.getLogger(__name__)

# 10 frames per character: 400 frames hold 40 characters, i.e. 40 acoustic tokens.
DESK_MODEL = ModelConfig(max_frames=400, max_text_len=40)
EVAL_SETS = {"source": "source_test", "target": "target_test"}
STRATEGIES = tuple(s.value for s in Strategy)


def desk_config(seed: int = 0, **overrides) -> RunConfig:
    """Training schedule used for the desk comparison. Optimizer presets for
    text and speech fine-tuning stay at their defaults."""
    kw = dict(model=DESK_MODEL, seed=seed,
              pretrain_opt=OptimizerConfig(base_lr=1e-3, warmup_steps=100),
              foundation_epochs=30, foundation_echo_mask=0.3,
              phase_b_epochs=8, text_epochs=40, speech_epochs=80, eval_interval=250)
    kw.update(overrides)
    return RunConfig(**kw)


def desk_benchmark(seed: int = 0, sizes: dict | None = None) -> Benchmark:
    return generate_benchmark(source_domain(seed), target_domain(seed), sizes=sizes)


def stress_opt(cfg: RunConfig, factor: float = 20.0) -> OptimizerConfig:
    """Text fine-tuning preset with the learning rate raised ``factor`` times."""
    return dataclasses.replace(cfg.text_ft_opt, base_lr=cfg.text_ft_opt.base_lr * factor)


@dataclass
class SourceModel:
    model: SpeechLLM
    foundation: StageResult
    stage1: StageResult
    sets: dict  # split name -> EncodedSet
    seconds: float = 0.0


@dataclass
class ArmResult:
    strategy: str
    report: DomainReport
    stages: tuple
    seconds: float
    model: SpeechLLM | None = None

    @property
    def curve(self):
        for st in self.stages:
            if st.curve is not None:
                return st.curve
        return None


@dataclass
class ExperimentResult:
    seed: int
    config: RunConfig
    source: SourceModel
    baseline: DomainReport
    arms: dict = field(default_factory=dict)
    bench: Benchmark | None = None
    seconds: float = 0.0

    def reports(self) -> dict:
        """Arm name -> DomainReport, baseline included."""
        return {"baseline": self.baseline, **{k: a.report for k, a in self.arms.items()}}

    def wer(self, arm: str, name: str) -> float:
        return self.reports()[arm].sets[name].wer


def encode_splits(model: SpeechLLM, bench: Benchmark, splits) -> dict:
    return {s: encode_utterances(model, bench.utterances(s)) for s in splits}


def build_source_model(bench: Benchmark, cfg: RunConfig, metrics: MetricsLog | None = None) -> SourceModel:
    """Foundation LM on general text, then Stage 1 on paired source speech."""
    t0 = time.perf_counter()
    model = SpeechLLM(cfg.model, seed=cfg.seed)
    found = pretrain_foundation(model, bench.text_samples("general_text"), cfg, metrics)
    sets = encode_splits(model, bench, ["source_train", "source_dev", "source_test",
                                        "target_train", "target_dev", "target_test"])
    stage1 = pretrain_source(model, sets["source_train"], sets["source_dev"], cfg, metrics)
    return SourceModel(model, found, stage1, sets, time.perf_counter() - t0)


def evaluate(model: SpeechLLM, sets: dict, model_id: str = "", strategy: str = "") -> DomainReport:
    return cross_domain_report(model, {name: sets[split] for name, split in EVAL_SETS.items()},
                               model_id=model_id, strategy=strategy)


def run_arm(src: SourceModel, strategy: str, bench: Benchmark, cfg: RunConfig,
            text_opt: OptimizerConfig | None = None, metrics: MetricsLog | None = None,
            text_arm: ArmResult | None = None) -> ArmResult:
    """Adapt a copy of the Stage-1 model with one strategy and score it.

    For text-then-speech, a finished text arm (same config) can be passed in
    so its adapters are reused instead of retrained.
    """
    strategy = Strategy(strategy).value
    model = copy.deepcopy(src.model)
    sets = src.sets
    text = bench.text_samples("target_text")
    t0 = time.perf_counter()
    if strategy == "text":
        stages = (adapt_text_only(model, text, sets["target_dev"], cfg, opt=text_opt, metrics=metrics),)
    elif strategy == "speech":
        stages = (adapt_speech(model, sets["target_train"], sets["target_dev"], cfg, metrics=metrics),)
    elif text_arm is not None:
        model = copy.deepcopy(text_arm.model)
        model.provenance = {**getattr(model, "provenance", {}),
                            "text_adapters": {"strategy": "text", "best_step": text_arm.stages[0].best_step,
                                              "best_loss": text_arm.stages[0].best_loss}}
        stages = (text_arm.stages[0], adapt_speech(model, sets["target_train"], sets["target_dev"], cfg,
                                                   metrics=metrics, strategy=strategy))
    else:
        stages = adapt_text_then_speech(model, text, sets["target_train"], sets["target_dev"],
                                        sets["target_dev"], cfg, metrics=metrics)
    seconds = time.perf_counter() - t0
    report = evaluate(model, sets, f"seed{cfg.seed}-{strategy}", strategy)
    log.info("arm %s: source %.2f target %.2f (%.0fs)", strategy, 100 * report.sets["source"].wer,
             100 * report.sets["target"].wer, seconds)
    return ArmResult(strategy, report, stages, seconds, model)


def run_experiment(seed: int = 0, strategies=STRATEGIES, cfg: RunConfig | None = None,
                   bench: Benchmark | None = None) -> ExperimentResult:
    t0 = time.perf_counter()
    cfg = cfg or desk_config(seed)
    bench = bench or desk_benchmark(seed)
    src = build_source_model(bench, cfg)
    baseline = evaluate(src.model, src.sets, f"seed{seed}-stage1", "none")
    result = ExperimentResult(seed, cfg, src, baseline, bench=bench)
    for s in strategies:
        result.arms[s] = run_arm(src, s, bench, cfg, text_arm=result.arms.get("text"))
    result.seconds = time.perf_counter() - t0
    return result


def stress_run(src: SourceModel, bench: Benchmark, cfg: RunConfig, factor: float = 20.0,
               text_epochs: int | None = None) -> tuple[ArmResult, dict]:
    """Text-only arm with a raised learning rate; returns the arm and its
    degradation report."""
    if text_epochs is not None:
        cfg = dataclasses.replace(cfg, text_epochs=text_epochs)
    arm = run_arm(src, "text", bench, cfg, text_opt=stress_opt(cfg, factor))
    return arm, degradation_report(arm.curve, cfg.degrade_threshold)


# -- summaries --------------------------------------------------------------------

ROWS = ("baseline",) + STRATEGIES


def comparison_rows(runs) -> list[dict]:
    """Median over seeds of every (arm, set) WER breakdown, in percent.

    ``runs`` holds one ``{arm: DomainReport}`` map (or ExperimentResult) per seed.
    """
    runs = [r.reports() if isinstance(r, ExperimentResult) else r for r in runs]
    rows = []
    for arm in ROWS:
        if any(arm not in r for r in runs):
            continue
        row = {"arm": arm}
        for name in EVAL_SETS:
            bds = [r[arm].sets[name] for r in runs]
            row[f"{name}_wer"] = 100 * statistics.median(b.wer for b in bds)
            for part in ("sub", "del", "ins"):
                row[f"{name}_{part}"] = 100 * statistics.median(getattr(b, f"{part}_rate") for b in bds)
        rows.append(row)
    return rows


def comparison_table(rows: list[dict]) -> str:
    cols = ["arm"] + [f"{n}_{k}" for n in EVAL_SETS for k in ("wer", "sub", "del", "ins")]
    body = [cols] + [[r["arm"]] + [f"{r[c]:.2f}" for c in cols[1:]] for r in rows]
    widths = [max(len(line[i]) for line in body) for i in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
                     for line in body) + "\n"


def pattern_checks(rows: list[dict]) -> dict:
    """The qualitative orderings the comparison is expected to show."""
    r = {row["arm"]: row for row in rows}
    base, text, speech, both = r["baseline"], r["text"], r["speech"], r["text-then-speech"]
    text_gain = (base["target_wer"] - text["target_wer"]) / base["target_wer"]
    text_drift = text["source_wer"] - base["source_wer"]
    speech_drift = speech["source_wer"] - base["source_wer"]
    return {
        "text_relative_gain": text_gain,
        "text_helps": text_gain >= 0.20,
        "speech_beats_text": speech["target_wer"] <= text["target_wer"],
        "source_drift_text": text_drift,
        "source_drift_speech": speech_drift,
        "text_forgets_less": text_drift <= speech_drift / 3,
        "text_then_speech_close": both["target_wer"] <= speech["target_wer"] + 1.0,
    }
