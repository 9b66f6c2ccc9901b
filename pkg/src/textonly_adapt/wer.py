"""Word error rate with substitution / deletion / insertion breakdown."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import UndefinedWERError, UsageError

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"
REPORT_COLUMNS = ("set", "n_ref", "wer", "sub_rate", "del_rate", "ins_rate")


def normalize_words(text) -> list[str]:
    """Lowercase, whitespace-split, strip punctuation at token edges."""
    if not isinstance(text, str):
        return list(text)
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return [w for w in words if w]


def edit_table(ref: Sequence, hyp: Sequence) -> list[list[tuple[int, int]]]:
    """DP table of ``(edit cost, insertions + deletions)``, minimised in that order.

    The second key picks, among minimum-cost scripts, the one with the most
    substitutions, which makes the sub/del/ins split symmetric under swapping
    ref and hyp.
    """
    n, m = len(ref), len(hyp)
    d = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = (i, i)
    for j in range(m + 1):
        d[0][j] = (j, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c, g = d[i - 1][j - 1]
            diag = (c + (ref[i - 1] != hyp[j - 1]), g)
            up = (d[i - 1][j][0] + 1, d[i - 1][j][1] + 1)
            left = (d[i][j - 1][0] + 1, d[i][j - 1][1] + 1)
            d[i][j] = min(diag, up, left)
    return d


def align(ref, hyp) -> list[tuple]:
    """Minimal unit-cost edit script as ``(op, ref_word, hyp_word)`` tuples.

    Among minimum-cost scripts the fewest insertions + deletions win; remaining
    ties are broken during the backtrace as match > sub > del > ins.
    """
    ref, hyp = normalize_words(ref), normalize_words(hyp)
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        cost, gaps = d[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i - 1][j - 1] == (cost, gaps):
            ops.append((MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and d[i - 1][j - 1] == (cost - 1, gaps):
            ops.append((SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i - 1][j] == (cost - 1, gaps - 1):
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
    return ops[::-1]


@dataclass(frozen=True)
class WERBreakdown:
    n_ref: int
    n_sub: int
    n_del: int
    n_ins: int

    @property
    def errors(self) -> int:
        return self.n_sub + self.n_del + self.n_ins

    def _rate(self, k: int) -> float:
        if self.n_ref == 0:
            raise UndefinedWERError("no reference words")
        return k / self.n_ref

    @property
    def wer(self) -> float:
        return self._rate(self.errors)

    @property
    def sub_rate(self) -> float:
        return self._rate(self.n_sub)

    @property
    def del_rate(self) -> float:
        return self._rate(self.n_del)

    @property
    def ins_rate(self) -> float:
        return self._rate(self.n_ins)

    def __add__(self, other: "WERBreakdown") -> "WERBreakdown":
        return WERBreakdown(self.n_ref + other.n_ref, self.n_sub + other.n_sub,
                            self.n_del + other.n_del, self.n_ins + other.n_ins)

    def as_dict(self) -> dict:
        return {"n_ref": self.n_ref, "n_sub": self.n_sub, "n_del": self.n_del, "n_ins": self.n_ins,
                "wer": self.wer, "sub_rate": self.sub_rate, "del_rate": self.del_rate, "ins_rate": self.ins_rate}


def breakdown(ref, hyp) -> WERBreakdown:
    ops = align(ref, hyp)
    return WERBreakdown(sum(op != INS for op, _, _ in ops), sum(op == SUB for op, _, _ in ops),
                        sum(op == DEL for op, _, _ in ops), sum(op == INS for op, _, _ in ops))


def corpus_wer(pairs) -> WERBreakdown:
    """Counts summed over utterances, divided by the total reference length."""
    pairs = list(pairs)
    if not pairs:
        raise UsageError("corpus_wer needs at least one (ref, hyp) pair")
    total = WERBreakdown(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + breakdown(ref, hyp)
    if total.n_ref == 0:
        raise UndefinedWERError("corpus has no reference words")
    return total


@dataclass
class DomainReport:
    model_id: str
    strategy: str
    sets: dict = field(default_factory=dict)  # set name -> WERBreakdown
    hypotheses: dict = field(default_factory=dict)  # set name -> [(id, ref, hyp)]

    def records(self) -> list[dict]:
        return [{"set": name, "model": self.model_id, "strategy": self.strategy, **b.as_dict()}
                for name, b in self.sets.items()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_table(self) -> str:
        rows = [REPORT_COLUMNS] + [(name, str(b.n_ref), f"{100 * b.wer:.2f}", f"{100 * b.sub_rate:.2f}",
                                    f"{100 * b.del_rate:.2f}", f"{100 * b.ins_rate:.2f}")
                                   for name, b in self.sets.items()]
        widths = [max(len(r[i]) for r in rows) for i in range(len(REPORT_COLUMNS))]
        return "\n".join("  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths)))
                         for r in rows) + "\n"


def cross_domain_report(model, eval_sets: dict, vocab=None, model_id: str = "", strategy: str = "",
                        max_len: int | None = None) -> DomainReport:
    """Greedy-decode every utterance of every named set and score it."""
    from .model import EncodedSet, decode_frames, encode_utterances
    from .vocab import DEFAULT_VOCAB

    if not eval_sets:
        raise UsageError("cross_domain_report needs at least one evaluation set")
    vocab = vocab or DEFAULT_VOCAB
    max_len = model.config.max_text_len if max_len is None else max_len
    report = DomainReport(model_id, strategy)
    for name, data in eval_sets.items():
        try:
            enc = data if isinstance(data, EncodedSet) else encode_utterances(model, data)
            hyps = []
            for i in range(0, len(enc), 64):
                hyps += decode_frames(model, enc.frames[i: i + 64], max_len)
        except Exception as exc:
            ids = getattr(data, "ids", None) or [u.id for u in data]
            raise type(exc)(f"decoding set {name!r} (ids {ids[0]}..{ids[-1]}) failed: {exc}") from exc
        rows = [(uid, vocab.decode(ref), vocab.decode(h)) for uid, ref, h in zip(enc.ids, enc.texts, hyps)]
        report.hypotheses[name] = rows
        report.sets[name] = corpus_wer([(r, h) for _, r, h in rows])
    return report
