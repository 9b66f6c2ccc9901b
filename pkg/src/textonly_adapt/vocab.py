"""Character-level vocabulary with reserved special symbols."""

from __future__ import annotations

PAD, BOS, EOS, ASR_PROMPT = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<asr>")
CHARS = " abcdefghijklmnopqrstuvwxyz'"


class CharVocab:
    def __init__(self, chars: str = CHARS):
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        self.chars = chars
        self.itos = list(SPECIALS) + list(chars)
        self.stoi = {c: i + len(SPECIALS) for i, c in enumerate(chars)}

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str, add_eos: bool = True) -> list[int]:
        try:
            ids = [self.stoi[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None
        return ids + [EOS] if add_eos else ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < len(SPECIALS):
                continue
            out.append(self.itos[i])
        return "".join(out)


DEFAULT_VOCAB = CharVocab()
