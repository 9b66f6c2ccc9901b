import numpy as np
import pytest
import torch

from textonly_adapt.config import ModelConfig, OptimizerConfig, RunConfig
from textonly_adapt.data import DomainSpec, TextSample, Utterance, make_bigram_grammar, render_speech
from textonly_adapt.model import SpeechLLM
from textonly_adapt.vocab import DEFAULT_VOCAB

torch.set_num_threads(1)

# Small enough for sub-second steps; 40 frames -> 20 encoder frames -> 4 acoustic tokens.
SMALL = ModelConfig(feature_dim=8, model_dim=32, heads=2, encoder_layers=1, decoder_layers=1,
                    fold_k=5, max_frames=40, max_text_len=16, projector_hidden=32, ffn_mult=2,
                    lora_rank=2)
# Micro geometry for finite differences.
MICRO = ModelConfig(feature_dim=4, model_dim=8, heads=2, encoder_layers=1, decoder_layers=1,
                    fold_k=2, max_frames=12, max_text_len=6, projector_hidden=8, ffn_mult=2,
                    lora_rank=2, lora_dropout=0.0)

WORDS = ["ab", "ba", "da", "bad", "dab", "add"]


def tiny_spec(name="tiny", seed=0, noise=0.0, feature_dim=8, max_frames=40, fpc=(5, 5), terms=()):
    words = WORDS + list(terms)
    return DomainSpec(name, words, make_bigram_grammar(words, seed, branching=3), specialist_terms=list(terms),
                      frames_per_char=fpc, noise_sigma=noise, seed=seed, feature_dim=feature_dim,
                      max_frames=max_frames, min_words=1, max_words=3)


def make_utts(texts, spec=None, prefix="u"):
    spec = spec or tiny_spec()
    return [Utterance(f"{prefix}{i}", render_speech(t, spec, f"{prefix}{i}"), DEFAULT_VOCAB.encode(t), spec.name)
            for i, t in enumerate(texts)]


def make_texts(texts, prefix="t"):
    return [TextSample(f"{prefix}{i}", DEFAULT_VOCAB.encode(t), "tiny") for i, t in enumerate(texts)]


SENTS = ["ab ba", "da bad", "dab add", "ba da", "add ab", "bad dab", "ab da", "da ab"]


def small_run_config(**kw) -> RunConfig:
    base = dict(model=SMALL, batch_size=4, foundation_epochs=1, phase_a_min_epochs=1, phase_a_max_epochs=1,
                phase_b_epochs=1, speech_epochs=1, text_epochs=1, eval_interval=2,
                pretrain_opt=OptimizerConfig(base_lr=1e-3, warmup_steps=5),
                speech_opt=OptimizerConfig(base_lr=1e-3, warmup_steps=5),
                text_ft_opt=OptimizerConfig(base_lr=1e-3, warmup_steps=5))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def small_model():
    return SpeechLLM(SMALL, seed=0).attach_adapters(seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def stage1_model(seed=0, cfg=None, sents=SENTS):
    """Foundation + Stage 1 on the tiny corpus."""
    from textonly_adapt.trainer import pretrain_foundation, pretrain_source

    fast = OptimizerConfig(base_lr=3e-3, warmup_steps=10)
    cfg = cfg or small_run_config(seed=seed, batch_size=2, foundation_epochs=80, phase_a_max_epochs=5,
                                  phase_b_epochs=80, pretrain_opt=fast, foundation_opt=fast)
    m = SpeechLLM(cfg.model, seed=seed)
    pretrain_foundation(m, make_texts(sents), cfg)
    utts = make_utts(sents)
    pretrain_source(m, utts, utts, cfg)
    return m


@pytest.fixture(scope="session")
def stage1():
    return stage1_model()


def changed_params(before: dict, model) -> set:
    return {n for n, p in model.named_parameters() if not torch.equal(before[n], p.detach())}


def freeze_check(base_model, strategy, steps=100):
    """Run one Stage-2 strategy for >= ``steps`` optimizer steps; return
    (changed parameter names, mask-trainable names, steps taken)."""
    import copy

    from textonly_adapt import lora
    from textonly_adapt.trainer import adapt_speech, adapt_text_only, adapt_text_then_speech

    model = copy.deepcopy(base_model)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    # 8 samples in batches of 4: two steps per epoch
    epochs = steps // 2
    cfg = small_run_config(text_epochs=epochs, speech_epochs=epochs, eval_interval=10)
    texts, utts = make_texts(SENTS), make_utts(SENTS)
    if strategy == "text":
        res = adapt_text_only(model, texts, utts, cfg, select_best=False)
        taken = res.state.step
    elif strategy == "speech":
        res = adapt_speech(model, utts, utts, cfg, select_best=False)
        taken = res.state.step
    else:
        t, s = adapt_text_then_speech(model, texts, utts, utts, utts, cfg, select_best=False)
        taken = min(t.state.step, s.state.step)
    mask = lora.mask_for_strategy(strategy, model)
    return changed_params(before, model), {n for n, t in mask.items() if t}, taken


# -- acceptance summary --------------------------------------------------------

CRITERIA: dict = {}


def record_criterion(number, passed: bool, detail: str):
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA, key=str):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
