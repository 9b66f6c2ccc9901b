"""Command line: generate -> pretrain -> adapt -> eval -> report (-> plot).

Settings come from, in increasing precedence: the desk defaults, a YAML file
given with ``--config``, ``--set key=value`` overrides, and dedicated flags
(``--seed``, ``--root``). Two environment variables are honoured:
``TEXTONLY_OUTPUT_ROOT`` (default output root) and ``TEXTONLY_THREADS``
(torch intra-op threads).

Layout under the output root::

    benchmark/                 generate
    pretrain/model.ckpt        pretrain (foundation LM + Stage 1)
    adapt/<strategy>/          adapt; text arms also write curve.csv, adapters.ckpt
    <run dir>/eval/            eval (report.jsonl, report.txt)
    report.txt, report.jsonl   report
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import torch
import yaml

from . import __version__
from .checkpoint import load_adapters, load_checkpoint, read_meta, save_adapters, save_checkpoint
from .config import RunConfig
from .data import (BENCHMARK_FILES, DEFAULT_SIZES, generate_benchmark, load_benchmark, load_paired_manifest,
                   load_text_corpus, source_domain, target_domain, write_benchmark)
from .errors import ConfigurationError, ManifestError, MissingStageError, UsageError
from .experiment import EVAL_SETS, comparison_rows, comparison_table, desk_config
from .lora import Strategy
from .monitor import degradation_report, read_curve_csv, write_curve_csv
from .trainer import (MetricsLog, adapt_speech, adapt_text_only, pretrain_foundation, pretrain_source)
from .wer import DomainReport, WERBreakdown, cross_domain_report

log = logging.getLogger("textonly_adapt")

ENV_ROOT = "TEXTONLY_OUTPUT_ROOT"
ENV_THREADS = "TEXTONLY_THREADS"
EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3


# -- configuration --------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def resolve_settings(args) -> dict:
    """Merge defaults, YAML file, ``--set`` and flags into one plain dict:
    ``{seed, root, sizes, run: RunConfig dict, overrides: [...]}``."""
    user: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            raise ConfigurationError(f"{args.config}: top level must be a mapping")
    overrides = list(getattr(args, "set", None) or [])
    for item in overrides:
        key, value = parse_override(item)
        _set_path(user, key, value)
    if getattr(args, "seed", None) is not None:
        user["seed"] = args.seed
        overrides.append(f"seed={args.seed}")
    if getattr(args, "root", None):
        user["root"] = args.root
        overrides.append(f"root={args.root}")
    unknown = set(user) - {"seed", "root", "sizes", "run", "overrides"}
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    seed = int(user.get("seed", 0))
    run = _merge(desk_config(seed).to_dict(), user.get("run") or {})
    run["seed"] = seed
    sizes = {**DEFAULT_SIZES, **(user.get("sizes") or {})}
    root = user.get("root") or os.environ.get(ENV_ROOT) or "runs"
    RunConfig.from_dict(run)  # validate early
    return {"seed": seed, "root": str(root), "sizes": sizes, "run": run, "overrides": overrides}


def run_config(settings: dict) -> RunConfig:
    return RunConfig.from_dict(copy.deepcopy(settings["run"]))


def write_echo(out_dir: Path, settings: dict, extra: dict | None = None):
    """Config echo next to a stage's artifacts; loadable again with --config."""
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: settings[k] for k in ("seed", "root", "sizes", "run", "overrides")}
    with open(out_dir / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(echo, f, sort_keys=True)
    (out_dir / "seed").write_text(f"{settings['seed']}\n")
    if extra:
        (out_dir / "run.json").write_text(json.dumps(extra, indent=1, sort_keys=True) + "\n")


def _prepare_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStageError(f"{path} not found: run `{stage}` first")
    return path


# -- commands -------------------------------------------------------------------

def cmd_generate(args, settings) -> int:
    out = Path(args.out or Path(settings["root"]) / "benchmark")
    _prepare_dir(out, args.force)
    seed = settings["seed"]
    bench = generate_benchmark(source_domain(seed), target_domain(seed), sizes=settings["sizes"])
    write_benchmark(bench, out)
    counts = {split: len(rows) for split, rows in bench.texts.items()}
    manifest = {"seed": seed, "source_seed": bench.source.seed, "target_seed": bench.target.seed,
                "counts": counts, "files": BENCHMARK_FILES}
    (out / "generation.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    write_echo(out, settings)
    print(f"benchmark written to {out}")
    for split, n in counts.items():
        print(f"  {split:13s} {n:6d}  {BENCHMARK_FILES[split]}")
    return EXIT_OK


def _benchmark_dir(args, settings) -> Path:
    d = Path(getattr(args, "benchmark", None) or Path(settings["root"]) / "benchmark")
    return _require(d / "generation.json", "generate").parent


def cmd_pretrain(args, settings) -> int:
    bench_dir = _benchmark_dir(args, settings)
    out = Path(settings["root"]) / "pretrain"
    _prepare_dir(out, args.force)
    cfg = run_config(settings)
    bench = load_benchmark(bench_dir)
    metrics = MetricsLog(out / "metrics.csv")
    from .model import SpeechLLM

    model = SpeechLLM(cfg.model, seed=cfg.seed)
    pretrain_foundation(model, bench.text_samples("general_text"), cfg, metrics)
    save_checkpoint(model, out / "foundation.ckpt", {"stage": "foundation"})
    res = pretrain_source(model, bench.utterances("source_train"), bench.utterances("source_dev"),
                          cfg, metrics, out_dir=out)
    meta = {"stage": "pretrain", "benchmark": str(bench_dir.resolve()), "best_step": res.best_step,
            "best_loss": res.best_loss}
    save_checkpoint(model, out / "model.ckpt", meta)
    write_echo(out, settings, meta)
    print(f"stage 1 done: best dev loss {res.best_loss:.4f} at step {res.best_step}; {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_adapt(args, settings) -> int:
    strategy = Strategy(args.strategy).value
    root = Path(settings["root"])
    src = _require(Path(args.checkpoint) if args.checkpoint else root / "pretrain" / "model.ckpt", "pretrain")
    needs_text = strategy in ("text", "text-then-speech")
    if needs_text and not args.monitor_set and not args.text_adapters:
        raise UsageError(f"--strategy {strategy} requires --monitor-set (paired dev manifest for the "
                         f"alignment monitor)")
    bench_dir = Path(args.benchmark) if args.benchmark else Path(read_meta(src)["meta"].get(
        "benchmark", root / "benchmark"))
    _require(bench_dir / "generation.json", "generate")
    out = Path(args.out or root / "adapt" / strategy)
    _prepare_dir(out, args.force)
    cfg = run_config(settings)
    model = load_checkpoint(src)
    metrics = MetricsLog(out / "metrics.csv")
    meta = {"stage": "adapt", "strategy": strategy, "benchmark": str(bench_dir.resolve()), "source": str(src)}
    if needs_text:
        if args.text_adapters:
            model.set_adapters(load_adapters(_require(Path(args.text_adapters), "adapt --strategy text")))
            meta["text_adapters"] = str(args.text_adapters)
        else:
            text_path = Path(args.text) if args.text else bench_dir / BENCHMARK_FILES["target_text"]
            monitor = load_paired_manifest(args.monitor_set)
            res = adapt_text_only(model, load_text_corpus(text_path, "target"), monitor, cfg,
                                  metrics=metrics, out_dir=out, strategy=strategy)
            write_curve_csv(res.curve, out / "curve.csv")
            save_adapters(model, out / "adapters.ckpt", {"strategy": "text", "best_step": res.best_step})
            rep = degradation_report(res.curve, cfg.degrade_threshold)
            meta["text"] = rep
            model.provenance = {"text_adapters": {"strategy": "text", "best_step": res.best_step,
                                                  "best_loss": res.best_loss}}
            print(f"text-only: best ASR dev loss {res.best_loss:.4f} at step {res.best_step} "
                  f"({100 * rep['text_fraction_at_best']:.1f}% of text), degraded={rep['degraded']}")
    if strategy != "text":
        train = load_paired_manifest(bench_dir / BENCHMARK_FILES["target_train"])
        dev = load_paired_manifest(bench_dir / BENCHMARK_FILES["target_dev"])
        res = adapt_speech(model, train, dev, cfg, metrics=metrics, out_dir=out, strategy=strategy)
        meta["speech"] = {"best_step": res.best_step, "best_loss": res.best_loss}
        print(f"{strategy}: best dev loss {res.best_loss:.4f} at step {res.best_step}")
    save_checkpoint(model, out / "model.ckpt", meta)
    write_echo(out, settings, meta)
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def evaluate_checkpoint(ckpt: Path, sets: dict | None = None) -> DomainReport:
    """Score a checkpoint on the evaluation sets named in its own metadata."""
    model = load_checkpoint(ckpt)
    meta = model.checkpoint_meta
    if sets is None:
        if "benchmark" not in meta:
            raise MissingStageError(f"{ckpt} does not record its benchmark; pass --sets")
        bench_dir = Path(meta["benchmark"])
        sets = {name: bench_dir / BENCHMARK_FILES[split] for name, split in EVAL_SETS.items()}
    data = {name: load_paired_manifest(_require(Path(p), "generate")) for name, p in sets.items()}
    return cross_domain_report(model, data, model_id=str(ckpt), strategy=meta.get("strategy", "none"))


def write_report(report: DomainReport, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.jsonl").write_text(report.to_jsonl())
    (out_dir / "report.txt").write_text(report.to_table())
    with open(out_dir / "hypotheses.jsonl", "w", encoding="utf-8") as f:
        for name, rows in report.hypotheses.items():
            for uid, ref, hyp in rows:
                f.write(json.dumps({"set": name, "id": uid, "ref": ref, "hyp": hyp}, sort_keys=True) + "\n")


def read_report(path: Path) -> DomainReport:
    report = DomainReport("", "")
    for line in path.read_text().splitlines():
        r = json.loads(line)
        report.model_id, report.strategy = r["model"], r["strategy"]
        report.sets[r["set"]] = WERBreakdown(r["n_ref"], r["n_sub"], r["n_del"], r["n_ins"])
    return report


def cmd_eval(args, settings) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.run) / "model.ckpt"
    _require(ckpt, "pretrain or adapt")
    sets = None
    if args.sets:
        sets = dict(s.split("=", 1) for s in args.sets)
    report = evaluate_checkpoint(ckpt, sets)
    write_report(report, ckpt.parent / "eval")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def _arm_dirs(root: Path) -> dict:
    dirs = {"baseline": root / "pretrain"}
    for s in Strategy:
        if (root / "adapt" / s.value / "model.ckpt").exists():
            dirs[s.value] = root / "adapt" / s.value
    return dirs


def cmd_report(args, settings) -> int:
    roots = [Path(r) for r in (args.runs or [settings["root"]])]
    runs = []
    for root in roots:
        _require(root / "pretrain" / "model.ckpt", "pretrain")
        reports = {}
        for arm, d in _arm_dirs(root).items():
            path = d / "eval" / "report.jsonl"
            if not path.exists():
                write_report(evaluate_checkpoint(d / "model.ckpt"), d / "eval")
            reports[arm] = read_report(path)
        runs.append(reports)
    rows = comparison_rows(runs)
    table = comparison_table(rows)
    out = Path(args.out or roots[0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table)
    (out / "report.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_plot(args, settings) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curve = read_curve_csv(_require(Path(args.curve), "adapt --strategy text"))
    steps = curve.column("step")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, curve.column("ppl"), label="dev PPL", color="tab:blue")
    ax.axvline(curve.best.step, color="grey", ls="--", lw=1)
    ax.set_xlabel("text-only step")
    ax.set_ylabel("PPL")
    ax2 = ax.twinx()
    ax2.plot(steps, curve.column("token_acc"), label="dev Acc", color="tab:orange")
    ax2.set_ylabel("token accuracy")
    fig.legend(loc="upper center", ncol=2, frameon=False)
    fig.tight_layout()
    out = Path(args.out or Path(args.curve).with_suffix(".png"))
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML settings file (seed, root, sizes, run)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a setting, e.g. run.text_epochs=10 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--root", help=f"output root (default ${ENV_ROOT} or ./runs)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="textonly-adapt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write the synthetic two-domain benchmark")
    g.add_argument("--out", help="benchmark directory (default <root>/benchmark)")

    pt = sub.add_parser("pretrain", parents=[common], help="foundation LM + source-domain Stage 1")
    pt.add_argument("--benchmark", help="benchmark directory (default <root>/benchmark)")

    a = sub.add_parser("adapt", parents=[common], help="target-domain adaptation")
    a.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    a.add_argument("--monitor-set", help="paired dev manifest scored by the alignment monitor")
    a.add_argument("--text", help="target text corpus (default: the benchmark's)")
    a.add_argument("--text-adapters", help="text-then-speech: reuse adapters from a finished text run")
    a.add_argument("--checkpoint", help="starting checkpoint (default <root>/pretrain/model.ckpt)")
    a.add_argument("--benchmark", help="benchmark directory (default: recorded in the checkpoint)")
    a.add_argument("--out", help="output directory (default <root>/adapt/<strategy>)")

    e = sub.add_parser("eval", parents=[common], help="WER report for one checkpoint")
    grp = e.add_mutually_exclusive_group(required=True)
    grp.add_argument("--checkpoint")
    grp.add_argument("--run", help="run directory holding model.ckpt")
    e.add_argument("--sets", nargs="+", metavar="NAME=MANIFEST", help="evaluation sets (default source/target test)")

    r = sub.add_parser("report", parents=[common], help="comparison table over all arms")
    r.add_argument("--runs", nargs="+", help="output roots, one per seed; medians are reported")
    r.add_argument("--out", help="where to write report.txt / report.jsonl")

    pl = sub.add_parser("plot", parents=[common], help="render an alignment curve CSV")
    pl.add_argument("--curve", required=True)
    pl.add_argument("--out")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "eval": cmd_eval, "report": cmd_report, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if os.environ.get(ENV_THREADS):
        torch.set_num_threads(int(os.environ[ENV_THREADS]))
    try:
        settings = resolve_settings(args)
        if args.verbose:
            log.info("settings: %s", json.dumps(settings, sort_keys=True))
        return COMMANDS[args.command](args, settings)
    except MissingStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, ConfigurationError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
