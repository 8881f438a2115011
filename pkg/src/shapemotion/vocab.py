"""Word-level tokenization shared by the text encoders."""

import re
from collections import Counter

_WORD = re.compile(r"[a-z]+|\d+|[^\sa-z\d]")

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
SPECIALS = (PAD, UNK, EOS)


def tokenize_words(text):
    return _WORD.findall(text.lower())


class WordVocab:
    """Specials first (pad=0, unk=1, eos=2), then words in sorted order."""

    def __init__(self, words):
        self.itos = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts, min_count=1):
        counts = Counter(w for t in texts for w in tokenize_words(t))
        return cls(w for w, c in counts.items() if c >= min_count)

    def __len__(self):
        return len(self.itos)

    def encode(self, text):
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in tokenize_words(text)]

    def decode(self, ids):
        words = []
        for i in ids:
            w = self.itos[i] if 0 <= i < len(self.itos) else UNK
            if w == EOS:
                break
            if w != PAD:
                words.append(w)
        out = " ".join(words)
        return re.sub(r" ([,.;:!?])", r"\1", out)

    def to_list(self):
        return list(self.itos)

    @classmethod
    def from_list(cls, itos):
        if tuple(itos[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        v = cls(itos[3:])
        if v.itos != list(itos):
            raise ValueError("vocabulary words must be unique and sorted")
        return v
