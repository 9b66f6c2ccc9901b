import itertools
import json
import random
from functools import lru_cache

import pytest

from textonly_adapt.errors import UndefinedWERError, UsageError
from textonly_adapt.wer import (DEL, INS, MATCH, REPORT_COLUMNS, SUB, DomainReport, WERBreakdown, align,
                                breakdown, corpus_wer, normalize_words)


def brute_cost(ref, hyp):
    """Independent recursive edit distance (memoised on suffixes)."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(d(i + 1, j + 1) + (ref[i] != hyp[j]), d(i + 1, j) + 1, d(i, j + 1) + 1)

    return d(0, 0)


def script_cost(ops):
    return sum(op != MATCH for op, _, _ in ops)


def random_pair(rng, max_len=8, alphabet="abcd"):
    return ([rng.choice(alphabet) for _ in range(rng.randint(0, max_len))],
            [rng.choice(alphabet) for _ in range(rng.randint(0, max_len))])


def check_oracle(n=1000, seed=0):
    rng = random.Random(seed)
    for _ in range(n):
        ref, hyp = random_pair(rng)
        ops = align(ref, hyp)
        if script_cost(ops) != brute_cost(ref, hyp):
            return False
        # the script must actually transform ref into hyp
        if [r for op, r, _ in ops if op != INS] != ref or [h for op, _, h in ops if op != DEL] != hyp:
            return False
    return True


def check_symmetry(n=1000, seed=1):
    rng = random.Random(seed)
    for _ in range(n):
        ref, hyp = random_pair(rng)
        a, b = breakdown(ref, hyp), breakdown(hyp, ref)
        if (a.n_sub, a.n_del, a.n_ins) != (b.n_sub, b.n_ins, b.n_del):
            return False
    return True


def max_sub_split(ref, hyp):
    """Brute force: over all minimum-cost scripts, the largest substitution count."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def best(i, j):  # (cost, -subs) minimised
        if i == len(ref):
            return (len(hyp) - j, 0)
        if j == len(hyp):
            return (len(ref) - i, 0)
        c, s = best(i + 1, j + 1)
        diag = (c, s) if ref[i] == hyp[j] else (c + 1, s - 1)
        dl, sl = best(i + 1, j)
        il, si = best(i, j + 1)
        return min(diag, (dl + 1, sl), (il + 1, si))

    return -best(0, 0)[1]


def check_concatenation(n=1000, seed=2):
    rng = random.Random(seed)
    for _ in range(n):
        pairs = [random_pair(rng) for _ in range(rng.randint(1, 5))]
        if sum(len(r) for r, _ in pairs) == 0:
            continue
        total = corpus_wer(pairs)
        parts = [breakdown(r, h) for r, h in pairs]
        if (total.n_ref, total.n_sub, total.n_del, total.n_ins) != (
                sum(p.n_ref for p in parts), sum(p.n_sub for p in parts),
                sum(p.n_del for p in parts), sum(p.n_ins for p in parts)):
            return False
    return True


def test_align_matches_brute_force():
    assert check_oracle()


def test_symmetry_law():
    assert check_symmetry()


def test_split_maximises_substitutions():
    rng = random.Random(3)
    for _ in range(300):
        ref, hyp = random_pair(rng)
        assert breakdown(ref, hyp).n_sub == max_sub_split(ref, hyp)


def test_concatenation_law():
    assert check_concatenation()


def test_examples():
    ops = align("a b c", "a b c")
    assert [op for op, _, _ in ops] == [MATCH] * 3
    b = breakdown("a b c", "a x c d")
    assert (b.n_sub, b.n_del, b.n_ins) == (1, 0, 1)
    assert b.wer == pytest.approx(2 / 3)
    # exhaustive check of the 3x4 case: no script of cost < 2 exists
    assert brute_cost("a b c".split(), "a x c d".split()) == 2
    b = breakdown("a b", "")
    assert (b.n_del, b.wer) == (2, 1.0)


def test_tie_break_prefers_sub_over_del_ins():
    ops = align("a", "b")
    assert ops == [(SUB, "a", "b")]


def test_all_scripts_enumerated_small():
    # every minimal script for a tiny case has cost equal to ours
    ref, hyp = ["a", "b"], ["b", "a"]
    assert script_cost(align(ref, hyp)) == 2 == brute_cost(ref, hyp)


def test_corpus_wer_sums_counts():
    total = WERBreakdown(4, 1, 0, 0) + WERBreakdown(6, 0, 1, 0)
    assert total.wer == pytest.approx(0.2)
    assert corpus_wer([("a b c d", "a b c d"), ("e f", "e f")]).wer == 0.0
    assert corpus_wer([("a b", "a c")]) == breakdown("a b", "a c")
    with pytest.raises(UndefinedWERError):
        corpus_wer([("", "x")])
    with pytest.raises(UsageError):
        corpus_wer([])


def test_rates_add_up_and_may_exceed_one():
    b = breakdown("a", "x y z")
    assert b.wer == pytest.approx(b.sub_rate + b.del_rate + b.ins_rate, abs=1e-12)
    assert b.wer == 3.0


def test_normalisation():
    assert normalize_words("Hello, World! 'tis") == ["hello", "world", "tis"]
    assert normalize_words(" ... ") == []


def test_report_formats():
    rep = DomainReport("m", "text", {"source": WERBreakdown(10, 1, 0, 1), "target": WERBreakdown(5, 0, 1, 0)})
    header = rep.to_table().splitlines()[0].split()
    assert tuple(header) == REPORT_COLUMNS
    recs = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert [r["set"] for r in recs] == ["source", "target"]
    assert recs[0]["wer"] == pytest.approx(0.2)
