"""Text-only domain adaptation for a desk-scale Speech LLM.

Encoder -> frame-folding projector -> decoder LM with LoRA adapters, trained on
a paired source domain and adapted to a target domain from unpaired text under
a real-time alignment monitor.
"""

__version__ = "0.1.0"

from .config import FULL_SCALE, ModelConfig, OptimizerConfig, RunConfig
from .data import (Benchmark, DomainSpec, FeatureSequence, TextSample, Utterance, generate_benchmark,
                   render_speech, source_domain, target_domain)
from .lora import LoraAdapter, Strategy, init_adapter, mask_for_strategy
from .model import SpeechLLM, asr_loss, decode_greedy, text_loss
from .monitor import AlignmentCurve, EvalRecord, degradation_report, evaluate_alignment
from .wer import WERBreakdown, align, corpus_wer, cross_domain_report
