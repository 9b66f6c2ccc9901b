"""Corpora: sample types, manifest/corpus IO, synthetic speech rendering and the
two-domain benchmark generator."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ManifestError, UsageError
from .vocab import DEFAULT_VOCAB, CharVocab


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (num_frames, feature_dim), zero beyond valid_len
    valid_len: int

    def __post_init__(self):
        if self.valid_len > len(self.frames):
            raise ValueError("valid_len exceeds frame count")


@dataclass
class Utterance:
    id: str
    features: FeatureSequence
    text: tuple  # token ids ending with EOS
    domain_tag: str = ""

    def __post_init__(self):
        self.text = tuple(int(t) for t in self.text)
        if not self.text:
            raise ValueError(f"utterance {self.id!r} has empty text")
        if self.features.valid_len < 1:
            raise ValueError(f"utterance {self.id!r} has no valid frames")


@dataclass
class TextSample:
    id: str
    text: tuple
    domain_tag: str = ""

    def __post_init__(self):
        self.text = tuple(int(t) for t in self.text)
        if not self.text:
            raise ValueError(f"text sample {self.id!r} is empty")


# -- synthetic acoustics ----------------------------------------------------

# Characters in one group share an acoustic class centre and differ only by a
# small per-character offset, so spelling within a group leans on the LM.
# Vowels are the ambiguous class; every consonant is acoustically distinct.
CONFUSION_GROUPS = ("aeiou",) + tuple("bcdfghjklmnpqrstvwxyz") + (" ", "'")


@dataclass
class DomainSpec:
    name: str
    vocabulary: list
    grammar: dict  # word (or "<s>") -> {next word (or "</s>"): prob}
    specialist_terms: list = field(default_factory=list)
    specialist_rate: float = 0.0
    frames_per_char: tuple = (10, 10)
    noise_sigma: float = 0.0
    channel_shift: float = 0.0
    seed: int = 0
    acoustic_seed: int = 1234
    char_spread: float = 0.0
    feature_dim: int = 16
    max_frames: int = 400
    min_words: int = 3
    max_words: int = 6

    def __post_init__(self):
        lo, hi = self.frames_per_char
        if not 1 <= lo <= hi:
            raise ConfigurationError("frames_per_char must be a range 1 <= lo <= hi")
        self.frames_per_char = (int(lo), int(hi))
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        for word, row in self.grammar.items():
            total = sum(row.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigurationError(f"grammar row {word!r} sums to {total}")

    @property
    def max_chars(self) -> int:
        return self.max_frames // self.frames_per_char[1]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["frames_per_char"] = list(self.frames_per_char)
        return d


def _rng(*keys) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def char_prototype(ch: str, acoustic_seed: int, feature_dim: int, char_spread: float) -> np.ndarray:
    group = next((g for g in CONFUSION_GROUPS if ch in g), None)
    if group is None:
        raise ValueError(f"character {ch!r} has no acoustic prototype")
    centre = _rng("centre", acoustic_seed, group).standard_normal(feature_dim)
    offset = _rng("char", acoustic_seed, ch).standard_normal(feature_dim)
    return centre + char_spread * offset


def channel_vector(spec: DomainSpec) -> np.ndarray:
    if spec.channel_shift == 0:
        return np.zeros(spec.feature_dim)
    v = _rng("channel", spec.name, spec.seed).standard_normal(spec.feature_dim)
    return spec.channel_shift * v / np.linalg.norm(v)


def render_speech(text: str, spec: DomainSpec, utt_id: str = "") -> FeatureSequence:
    """Deterministic features for ``text``: one prototype per character held for a
    drawn number of frames, plus channel offset and Gaussian noise."""
    protos = {ch: char_prototype(ch, spec.acoustic_seed, spec.feature_dim, spec.char_spread)
              for ch in set(text)}
    rng = _rng("render", spec.seed, utt_id)
    lo, hi = spec.frames_per_char
    reps = rng.integers(lo, hi + 1, size=len(text))
    frames = np.repeat(np.stack([protos[c] for c in text]), reps, axis=0) if text else np.zeros((0, spec.feature_dim))
    frames = frames + channel_vector(spec)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
    valid = min(len(frames), spec.max_frames)
    out = np.zeros((spec.max_frames, spec.feature_dim), dtype=np.float32)
    out[:valid] = frames[:valid]
    return FeatureSequence(out, valid)


# -- grammar and sentence sampling ------------------------------------------

def make_bigram_grammar(words: Sequence[str], seed: int, branching: int = 6,
                        end_prob: float = 0.2) -> dict:
    """Sparse random bigram table: each word gets ``branching`` successors."""
    rng = _rng("grammar", seed, ",".join(words))
    words = list(words)
    grammar = {}
    for w in ["<s>"] + words:
        succ = rng.choice(len(words), size=min(branching, len(words)), replace=False)
        weights = rng.dirichlet(np.ones(len(succ)))
        row = {}
        scale = 1.0 if w == "<s>" else 1.0 - end_prob
        for i, p in zip(succ, weights):
            row[words[i]] = float(p * scale)
        if w != "<s>":
            row["</s>"] = end_prob
        total = sum(row.values())
        grammar[w] = {k: v / total for k, v in row.items()}
    return grammar


def sample_sentence(spec: DomainSpec, rng: np.random.Generator) -> str:
    """Seeded grammar walk with optional specialist-term injection."""
    for _ in range(1000):
        words, cur = [], "<s>"
        while len(words) < spec.max_words:
            row = spec.grammar[cur]
            keys = list(row)
            cur = keys[rng.choice(len(keys), p=np.array([row[k] for k in keys]))]
            if cur == "</s>":
                break
            words.append(cur)
        if len(words) < spec.min_words:
            continue
        if spec.specialist_terms and rng.random() < spec.specialist_rate:
            words[rng.integers(len(words))] = spec.specialist_terms[rng.integers(len(spec.specialist_terms))]
        sent = " ".join(words)
        if len(sent) <= spec.max_chars - 1:
            return sent
    raise ConfigurationError(f"grammar of {spec.name!r} cannot produce sentences within {spec.max_chars} chars")


# -- default domains ----------------------------------------------------------

FUNCTION_WORDS = ["the", "a", "of", "to", "and", "in", "is", "it", "with", "for",
                  "was", "he", "she", "they", "we", "this", "that", "by", "her", "his"]

_ONSETS = "bdfgklmnprstvz"
# Onsets that are rare in the source domain and common in the target domain,
# where they take fixed vowels.
TARGET_ONSETS = "cjqxy"
# Any consonant may close a word, so every consonant is heard in the source domain.
_CODAS = _ONSETS + TARGET_ONSETS
_VOWELS = "aeiou"


def acoustic_key(word: str) -> tuple:
    """Sequence of confusion groups: words with equal keys sound alike."""
    return tuple(next(i for i, g in enumerate(CONFUSION_GROUPS) if c in g) for c in word)


def spelling_rule(seed, tag: str, onsets: str = _ONSETS + TARGET_ONSETS) -> dict:
    """Onset consonant -> the vowel written after it."""
    rng = _rng("rule", tag, seed)
    return {c: _VOWELS[rng.integers(len(_VOWELS))] for c in onsets}


def domain_rules(seed: int = 0) -> tuple[dict, dict]:
    """Source and target rules. They agree on the common onsets. After
    ``TARGET_ONSETS``, which the source domain uses only rarely, the source
    vowel is arbitrary (``None``) while the target fixes one."""
    src = spelling_rule(seed, "source")
    tgt = {**src, **spelling_rule(seed, "target", TARGET_ONSETS)}
    src.update({c: None for c in TARGET_ONSETS})
    return src, tgt


def make_words(n: int, seed, rule: dict, avoid: Sequence[str] = (), syllables=(1, 2),
               new_onset_rate: float = 0.0, tag: str = "words") -> list[str]:
    """Pseudo-words of CV syllables plus a closing consonant, vowels set by
    ``rule`` (drawn at random where the rule says ``None``). Each syllable opens with a target-only onset with probability
    ``new_onset_rate``. Words are pairwise distinct in sound and distinct
    from ``avoid``."""
    rng = _rng(tag, seed)
    taken = {acoustic_key(w) for w in avoid}
    out: list[str] = []
    for _ in range(200 * n):
        if len(out) == n:
            break
        word = ""
        for _ in range(int(rng.integers(syllables[0], syllables[1] + 1))):
            pool = TARGET_ONSETS if rng.random() < new_onset_rate else _ONSETS
            c = pool[rng.integers(len(pool))]
            v = rule[c]
            word += c + (v if v is not None else _VOWELS[rng.integers(len(_VOWELS))])
        word += _CODAS[rng.integers(len(_CODAS))]
        key = acoustic_key(word)
        if key in taken:
            continue
        taken.add(key)
        out.append(word)
    else:
        raise ConfigurationError(f"could not draw {n} distinguishable words")
    return out


def source_words(seed: int = 0, n: int = 300, new_onset_rate: float = 0.05) -> list[str]:
    return make_words(n, seed, domain_rules(seed)[0], avoid=FUNCTION_WORDS, new_onset_rate=new_onset_rate,
                      tag="source-words")


def make_specialist_terms(n: int, seed: int, avoid: Sequence[str] = (), syllables=(2, 3),
                          new_onset_rate: float = 0.5) -> list[str]:
    return make_words(n, seed, domain_rules(seed)[1], avoid, syllables, new_onset_rate, tag="terms")


def source_domain(seed: int = 0, n_words: int = 300, branching: int = 40, **overrides) -> DomainSpec:
    vocab = FUNCTION_WORDS + source_words(seed, n_words)
    kw = dict(name="source", vocabulary=vocab,
              grammar=make_bigram_grammar(vocab, seed * 7919 + 1, branching=branching),
              specialist_terms=[], specialist_rate=0.0, noise_sigma=0.0, seed=seed)
    kw.update(overrides)
    return DomainSpec(**kw)


def target_domain(seed: int = 0, n_words: int = 150, n_terms: int = 40, new_onset_rate: float = 0.25,
                  specialist_rate: float = 0.8, branching: int = 20, **overrides) -> DomainSpec:
    """Function words plus a lexicon in which some syllables open with
    target-only consonants, with multi-syllable terminology injected into
    most sentences."""
    taken = FUNCTION_WORDS + source_words(seed)
    words = make_words(n_words, seed, domain_rules(seed)[1], avoid=taken, new_onset_rate=new_onset_rate,
                       tag="target-words")
    terms = make_specialist_terms(n_terms, seed, avoid=taken + words)
    vocab = FUNCTION_WORDS + words
    kw = dict(name="target", vocabulary=vocab,
              grammar=make_bigram_grammar(vocab, seed * 7919 + 2, branching=branching),
              specialist_terms=terms, specialist_rate=specialist_rate, noise_sigma=0.1,
              channel_shift=0.0, seed=seed + 10_000)
    kw.update(overrides)
    return DomainSpec(**kw)


# -- benchmark ----------------------------------------------------------------

DEFAULT_SIZES = {
    "general_text": 3000,
    "source_train": 600,
    "source_dev": 64,
    "source_test": 100,
    "target_text": 2000,
    "target_train": 200,
    "target_dev": 64,
    "target_test": 100,
}

SPLIT_DOMAIN = {
    "general_text": "source", "source_train": "source", "source_dev": "source", "source_test": "source",
    "target_text": "target", "target_train": "target", "target_dev": "target", "target_test": "target",
}
TEXT_SPLITS = ("general_text", "target_text")


@dataclass
class Benchmark:
    source: DomainSpec
    target: DomainSpec
    texts: dict  # split -> list of (id, sentence)
    vocab: CharVocab = DEFAULT_VOCAB

    def spec_for(self, split: str) -> DomainSpec:
        return self.source if SPLIT_DOMAIN[split] == "source" else self.target

    def utterances(self, split: str) -> list[Utterance]:
        if split in TEXT_SPLITS:
            raise UsageError(f"{split!r} is a text-only split")
        spec = self.spec_for(split)
        return [Utterance(uid, render_speech(s, spec, uid), self.vocab.encode(s), spec.name)
                for uid, s in self.texts[split]]

    def text_samples(self, split: str) -> list[TextSample]:
        spec = self.spec_for(split)
        return [TextSample(uid, self.vocab.encode(s), spec.name) for uid, s in self.texts[split]]


def generate_benchmark(source: DomainSpec, target: DomainSpec, sizes: dict | None = None,
                       vocab: CharVocab = DEFAULT_VOCAB) -> Benchmark:
    """Disjoint seeded splits for both domains.

    Splits: general_text (foundation LM text), source_train/dev/test (paired),
    target_text (unpaired), target_train (paired, speech arms only), target_dev/test.
    """
    overlap = set(source.specialist_terms) & set(target.specialist_terms)
    if overlap:
        raise ConfigurationError(f"specialist terms shared between domains: {sorted(overlap)}")
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    unknown = set(sizes) - set(DEFAULT_SIZES)
    if unknown:
        raise ConfigurationError(f"unknown splits {sorted(unknown)}")
    texts = {}
    seen = {"source": set(), "target": set()}
    # evaluation splits first so training text never repeats a test sentence
    order = sorted(DEFAULT_SIZES, key=lambda s: (not s.endswith(("_dev", "_test")), s))
    for split in order:
        dom = SPLIT_DOMAIN[split]
        spec = source if dom == "source" else target
        rng = _rng("split", spec.seed, split)
        rows = []
        for i in range(int(sizes[split])):
            for _ in range(10_000):
                sent = sample_sentence(spec, rng)
                if sent not in seen[dom]:
                    break
            else:
                raise ConfigurationError(f"grammar of {spec.name!r} ran out of distinct sentences")
            seen[dom].add(sent)
            rows.append((f"{spec.name}-{split}-{i:06d}", sent))
        texts[split] = rows
    texts = {split: texts[split] for split in DEFAULT_SIZES}
    return Benchmark(source, target, texts, vocab)


# -- files ----------------------------------------------------------------------

def write_text_corpus(path, sentences: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(s + "\n")


def load_text_corpus(path, domain_tag: str = "", vocab: CharVocab = DEFAULT_VOCAB) -> list[TextSample]:
    """One transcript per line; blank lines skipped, duplicates kept."""
    raw = Path(path).read_bytes()
    try:
        content = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not valid UTF-8 ({exc})") from None
    stem = Path(path).stem
    out = []
    for lineno, line in enumerate(content.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            ids = vocab.encode(line)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        out.append(TextSample(f"{stem}-{lineno}", ids, domain_tag))
    return out


def write_paired_manifest(path, records: Sequence[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _features_from_record(rec: dict, base: Path, specs: dict) -> FeatureSequence:
    if "feature_ref" in rec:
        ref = base / rec["feature_ref"]
        if not ref.exists():
            raise ManifestError(f"missing feature payload for id {rec['id']!r}: {ref}")
        arr = np.load(ref)
        frames = arr["frames"] if hasattr(arr, "files") else arr
        valid = int(arr["valid_len"]) if hasattr(arr, "files") and "valid_len" in arr.files else len(frames)
        return FeatureSequence(np.asarray(frames, dtype=np.float32), valid)
    if "render_spec" in rec:
        spec = specs.get(rec["render_spec"])
        if spec is None:
            raise ManifestError(f"missing feature payload for id {rec['id']!r}: "
                                f"unknown render_spec {rec['render_spec']!r}")
        return render_speech(rec["text"], spec, rec["id"])
    raise ManifestError(f"missing feature payload for id {rec['id']!r}")


def load_paired_manifest(path, specs: dict | None = None, vocab: CharVocab = DEFAULT_VOCAB) -> list[Utterance]:
    """Read line-delimited JSON records ``{id, text, domain, feature_ref | render_spec}``.

    ``render_spec`` names a DomainSpec in ``specs`` (by default the
    ``domains.json`` next to the manifest, if present).
    """
    path = Path(path)
    base = path.parent
    if specs is None:
        specs = load_domain_specs(base / "domains.json") if (base / "domains.json").exists() else {}
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                raise ManifestError(f"{path}:{lineno}: blank line")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            for key in ("id", "text"):
                if key not in rec:
                    raise ManifestError(f"{path}:{lineno}: missing {key!r} field")
            try:
                ids = vocab.encode(rec["text"])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            feats = _features_from_record(rec, base, specs)
            out.append(Utterance(rec["id"], feats, ids, rec.get("domain", "")))
    return out


def save_domain_specs(path, specs: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({k: v.to_dict() for k, v in specs.items()}, f, indent=1, sort_keys=True)
        f.write("\n")


def load_domain_specs(path) -> dict:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return {k: DomainSpec(**v) for k, v in raw.items()}


BENCHMARK_FILES = {
    "general_text": "source/general_text.txt",
    "source_train": "source/train.jsonl",
    "source_dev": "source/dev.jsonl",
    "source_test": "source/test.jsonl",
    "target_text": "target/text_train.txt",
    "target_train": "target/train.jsonl",
    "target_dev": "target/dev.jsonl",
    "target_test": "target/test.jsonl",
}


def write_benchmark(bench: Benchmark, out_dir):
    """Write the directory tree ``source/``, ``target/`` plus ``domains.json`` files."""
    out_dir = Path(out_dir)
    specs = {"source": bench.source, "target": bench.target}
    for sub in ("source", "target"):
        os.makedirs(out_dir / sub, exist_ok=True)
        save_domain_specs(out_dir / sub / "domains.json", specs)
    for split, rel in BENCHMARK_FILES.items():
        path = out_dir / rel
        if split in TEXT_SPLITS:
            write_text_corpus(path, [s for _, s in bench.texts[split]])
        else:
            dom = SPLIT_DOMAIN[split]
            write_paired_manifest(path, [{"id": uid, "text": s, "domain": dom, "render_spec": dom}
                                         for uid, s in bench.texts[split]])


def read_benchmark_texts(out_dir) -> dict:
    out_dir = Path(out_dir)
    texts = {}
    for split, rel in BENCHMARK_FILES.items():
        path = out_dir / rel
        if split in TEXT_SPLITS:
            lines = [l.strip() for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
            texts[split] = [(f"{path.stem}-{i + 1}", s) for i, s in enumerate(lines)]
        else:
            texts[split] = [(r["id"], r["text"]) for r in map(json.loads, path.read_text(encoding="utf-8").splitlines())]
    return texts


def load_benchmark(out_dir) -> Benchmark:
    specs = load_domain_specs(Path(out_dir) / "source" / "domains.json")
    return Benchmark(specs["source"], specs["target"], read_benchmark_texts(out_dir))


# -- batching -------------------------------------------------------------------

def batcher(samples: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffled batches; the permutation depends only on (seed, epoch)."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    perm = _rng("batcher", seed, epoch).permutation(len(samples))
    return [[samples[i] for i in perm[j: j + batch_size]] for j in range(0, len(samples), batch_size)]
