"""Toy whitespace tokenizer with byte fallback.

The vocabulary is learned from the training corpus: specials, then the 256
byte tokens, then the corpus words in sorted order (deterministic no matter
how the corpus is shuffled).  Words absent from the vocabulary are spelled
out as their UTF-8 bytes, so any string round-trips.  The vocabulary file
is one token per line; a token's id is its zero-based line index.
"""

from __future__ import annotations

from pathlib import Path

from .errors import DataError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
_SPECIALS = [PAD, BOS, EOS]
_BYTE_TOKENS = [f"<0x{i:02X}>" for i in range(256)]


class Tokenizer:
    def __init__(self, tokens):
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        for special in _SPECIALS:
            if special not in self.ids:
                raise DataError(f"vocabulary missing special token {special}")
        self.pad_id = self.ids[PAD]
        self.bos_id = self.ids[BOS]
        self.eos_id = self.ids[EOS]

    @classmethod
    def from_corpus(cls, texts):
        words = sorted({w for text in texts for w in text.split()})
        return cls(_SPECIALS + _BYTE_TOKENS + words)

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @property
    def vocab_size(self):
        return len(self.tokens)

    def encode(self, text):
        """Word ids, unknown words spelled as byte-token runs.  No specials."""
        out = []
        for word in text.split():
            idx = self.ids.get(word)
            if idx is not None:
                out.append(idx)
            else:
                out.extend(self.ids[f"<0x{b:02X}>"] for b in word.encode("utf-8"))
        return out

    def decode(self, ids):
        """Inverse of encode; byte runs glue together, specials are dropped."""
        words, byte_run = [], []
        for i in ids:
            tok = self.tokens[i]
            if tok.startswith("<0x") and tok.endswith(">"):
                byte_run.append(int(tok[3:-1], 16))
                continue
            if byte_run:
                words.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run = []
            if tok in _SPECIALS:
                continue
            words.append(tok)
        if byte_run:
            words.append(bytes(byte_run).decode("utf-8", errors="replace"))
        return " ".join(words)
