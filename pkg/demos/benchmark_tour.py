"""
A walk through the synthetic two-domain benchmark
=================================================

Both domains share the acoustic front end: every consonant has its own
prototype, while all five vowels render to the same frames. A listener can
only recover the vowels from what the words usually look like, so a decoder
trained on one domain spells new words the way that domain would.
"""
import collections

import numpy as np

from textonly_adapt import generate_benchmark, render_speech, source_domain, target_domain
from textonly_adapt.data import BENCHMARK_FILES, TARGET_ONSETS, acoustic_key, domain_rules

src = source_domain(seed=0)
tgt = target_domain(seed=0)
bench = generate_benchmark(src, tgt)

for split, rows in bench.texts.items():
    print(f"{split:14s} {len(rows):5d}  e.g. {rows[0][1]!r}")

# The two domains spell an onset consonant with different vowels.
src_rule, tgt_rule = domain_rules(seed=0)
print("\nonset  source  target")
for c in sorted(tgt_rule):
    print(f"  {c}      {src_rule.get(c) or '-'}       {tgt_rule[c]}")
print("onsets that are rare in source text:", TARGET_ONSETS)

# What the acoustics keep: consonants survive, every vowel collapses to one class.
word = tgt.specialist_terms[0]
print(f"\nspecialist term {word!r} sounds like {acoustic_key(word)}")
rare = [w for w in tgt.vocabulary + tgt.specialist_terms if w[0] in TARGET_ONSETS]
print(f"{len(rare)} target words open with a rare onset, e.g. {rare[:6]}")

# Same sentence, two renderings: the target channel is noisy.
sent = bench.texts["target_test"][0][1]
a = render_speech(sent, src).frames
b = render_speech(sent, tgt).frames
print(f"\n{sent!r}: {a.shape[0]} frames, source/target frame distance {np.abs(a - b).mean():.3f}")

print("\non disk (textonly-adapt generate):")
for split, rel in BENCHMARK_FILES.items():
    print(f"  {rel:24s} <- {split}")
