"""Character corpora and synthetic sequence-classification tasks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import stream

RESERVED = "\x00"  # id 0: mask token for masked-lm, class token for tasks


@dataclass
class Corpus:
    id: str
    tokens: np.ndarray
    chars: str
    split: int

    @classmethod
    def from_text(cls, text: str, valid_fraction: float = 0.1) -> "Corpus":
        if not text:
            raise DataError("corpus text is empty")
        if RESERVED in text:
            raise DataError("corpus text contains the reserved NUL character")
        chars = RESERVED + "".join(sorted(set(text)))
        lookup = {c: i for i, c in enumerate(chars)}
        tokens = np.fromiter((lookup[c] for c in text), dtype=np.int64, count=len(text))
        split = int(round(len(text) * (1 - valid_fraction)))
        cid = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
        return cls(id=cid, tokens=tokens, chars=chars, split=split)

    @classmethod
    def from_file(cls, path, valid_fraction: float = 0.1) -> "Corpus":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), valid_fraction)

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[:self.split]

    @property
    def valid(self) -> np.ndarray:
        return self.tokens[self.split:]

    def encode(self, text: str) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.array([lookup[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in ids)

    def sample(self, rng: np.random.Generator, batch: int, length: int, part: str = "train"):
        """``batch`` random windows of ``length`` tokens from one split."""
        src = self.train if part == "train" else self.valid
        if len(src) <= length:
            raise DataError(f"{part} split has {len(src)} tokens, need more than {length}")
        starts = rng.integers(0, len(src) - length, size=batch)
        return np.stack([src[s:s + length] for s in starts])

    def windows(self, length: int, count: int, part: str = "valid"):
        """``count`` evenly spaced, deterministic windows for evaluation."""
        src = self.train if part == "train" else self.valid
        if len(src) <= length:
            raise DataError(f"{part} split has {len(src)} tokens, need more than {length}")
        starts = np.linspace(0, len(src) - length - 1, count).astype(int)
        return np.stack([src[s:s + length] for s in starts])


# a small stochastic grammar; keeps the corpus self-contained
_WORDS = {
    "det": ["the", "a", "every", "some", "that", "this", "one", "no"],
    "adj": ["old", "small", "quiet", "bright", "heavy", "green", "early", "round",
            "cold", "tall", "brave", "slow", "dark", "warm", "plain", "sharp"],
    "noun": ["river", "stone", "bird", "window", "garden", "letter", "ship", "lamp",
             "horse", "clock", "road", "child", "farmer", "tree", "market", "bell",
             "door", "hill", "cloud", "table", "king", "wolf", "boat", "field"],
    "verb": ["sees", "holds", "finds", "follows", "carries", "watches", "keeps",
             "opens", "remembers", "crosses", "calls", "builds"],
    "iverb": ["sleeps", "waits", "sings", "falls", "rests", "turns", "listens", "moves"],
    "prep": ["near", "under", "behind", "over", "beside", "across", "beyond", "inside"],
    "adv": ["slowly", "again", "today", "quietly", "at once", "for a while", "at night"],
    "conj": ["and", "but", "while", "because", "so"],
}


def _phrase(rng, pick):
    words = [pick("det")]
    if rng.random() < 0.5:
        words.append(pick("adj"))
    words.append(pick("noun"))
    if rng.random() < 0.25:
        words += [pick("prep"), pick("det"), pick("noun")]
    return words


def _clause(rng, pick):
    words = _phrase(rng, pick)
    if rng.random() < 0.6:
        words += [pick("verb")] + _phrase(rng, pick)
    else:
        words.append(pick("iverb"))
    if rng.random() < 0.3:
        words.append(pick("adv"))
    return words


def synthetic_text(n_chars: int = 200_000, seed: int = 0) -> str:
    """Deterministic English-like text from a small grammar."""
    rng = stream(seed, "corpus")

    def pick(cat):
        opts = _WORDS[cat]
        return opts[int(rng.integers(len(opts)))]

    parts, size = [], 0
    while size < n_chars:
        words = _clause(rng, pick)
        if rng.random() < 0.35:
            words += [pick("conj")] + _clause(rng, pick)
        sent = " ".join(words)
        sent = sent[0].upper() + sent[1:] + ("." if rng.random() < 0.85 else "?")
        parts.append(sent)
        size += len(sent) + 1
    return " ".join(parts)[:n_chars]


def synthetic_corpus(n_chars: int = 200_000, seed: int = 0) -> Corpus:
    return Corpus.from_text(synthetic_text(n_chars, seed))


# --------------------------------------------------------------------------
# classification tasks
# --------------------------------------------------------------------------

@dataclass
class ClassificationSet:
    """Token sequences (class token 0 first) with integer labels."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise DataError(f"{len(self.X)} sequences but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "ClassificationSet":
        return ClassificationSet(self.X[idx], self.y[idx], self.num_classes, self.name)


def _with_class_token(symbols: np.ndarray, offset: int) -> np.ndarray:
    return np.concatenate([np.zeros((len(symbols), 1), dtype=np.int64),
                           symbols.astype(np.int64) + offset], axis=1)


def _balanced(rng, half: int) -> list:
    """A uniformly random Dyck word with ``half`` pairs (cycle-lemma rejection-free)."""
    seq = [1] * half + [-1] * (half + 1)
    rng.shuffle(seq)
    # rotate so the walk stays >= 0 until the final extra -1, then drop it
    walk, lowest, cut = 0, 0, 0
    for i, v in enumerate(seq):
        walk += v
        if walk < lowest:
            lowest, cut = walk, i + 1
    rotated = seq[cut:] + seq[:cut]
    return rotated[:-1]


def _is_balanced(seq) -> bool:
    depth = 0
    for v in seq:
        depth += v
        if depth < 0:
            return False
    return depth == 0


def brackets_task(n: int, seq_len: int = 32, seed: int = 0, offset: int = 1) -> ClassificationSet:
    """Label 1 if the bracket string is well nested.

    Negatives are half single-character flips (unequal counts) and half
    shuffles with equal counts that dip below zero depth.
    """
    if seq_len % 2:
        raise DataError("bracket sequences need an even length")
    rng = stream(seed, "brackets")
    X, y = [], []
    for i in range(n):
        seq = _balanced(rng, seq_len // 2)
        label = i % 2 == 0
        if not label:
            if rng.random() < 0.5:
                j = int(rng.integers(seq_len))
                seq[j] = -seq[j]
            else:
                while _is_balanced(seq):
                    rng.shuffle(seq)
        X.append([0 if v == 1 else 1 for v in seq])
        y.append(int(_is_balanced(seq)))
    order = rng.permutation(n)
    return ClassificationSet(_with_class_token(np.array(X), offset)[order],
                             np.array(y, dtype=np.int64)[order], 2, "brackets")


def majority_task(n: int, seq_len: int = 31, seed: int = 0, offset: int = 1) -> ClassificationSet:
    """Label is the more frequent of two symbols (odd length, no ties)."""
    if seq_len % 2 == 0:
        raise DataError("majority sequences need an odd length")
    rng = stream(seed, "majority")
    p = rng.uniform(0.2, 0.8, size=n)
    sym = (rng.random((n, seq_len)) < p[:, None]).astype(np.int64)
    y = (sym.sum(axis=1) * 2 > seq_len).astype(np.int64)
    return ClassificationSet(_with_class_token(sym, offset), y, 2, "majority")


def random_label_task(n: int, seq_len: int = 32, seed: int = 0, offset: int = 1,
                      alphabet: int = 2) -> ClassificationSet:
    rng = stream(seed, "random-labels")
    sym = rng.integers(0, alphabet, size=(n, seq_len))
    y = rng.integers(0, 2, size=n)
    return ClassificationSet(_with_class_token(sym, offset), y, 2, "random")


TASKS = {"brackets": brackets_task, "majority": majority_task, "random": random_label_task}
