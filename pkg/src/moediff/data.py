"""Character-level corpora: vocab, toy-task generators, seq2seq batching.

A training example is one sequence `bos + source + eos + target + eos`
padded at the tail. The source prefix (including its bos/eos frame) is the
conditioning span; the target span, terminated by its own eos, is what the
diffusion process corrupts and the loss scores. Padding is never noised or
scored.
"""

import string
from dataclasses import dataclass

import numpy as np

from .errors import BatchError, ConfigError, CorpusError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>")


class Vocab:
    """Bijective char <-> id tables with four reserved leading ids."""

    def __init__(self, chars):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be unique")
        self.id_to_char = list(RESERVED) + chars
        self.char_to_id = {c: i + len(RESERVED) for i, c in enumerate(chars)}

    @classmethod
    def from_pairs(cls, pairs):
        chars = set()
        for source, target in pairs:
            chars.update(source)
            chars.update(target)
        return cls(sorted(chars))

    @property
    def size(self):
        return len(self.id_to_char)

    def encode(self, text):
        try:
            return [self.char_to_id[c] for c in text]
        except KeyError as exc:
            raise CorpusError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids, strip_special=True):
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.size:
                raise CorpusError(f"id {i} outside vocabulary of size {self.size}")
            if i < len(RESERVED):
                if strip_special:
                    if i == EOS_ID or i == PAD_ID:
                        break
                    continue
                out.append(self.id_to_char[i])
            else:
                out.append(self.id_to_char[i])
        return "".join(out)


@dataclass
class Batch:
    """Token matrix plus the masks separating conditioning from targets."""

    tokens: np.ndarray       # int64 [batch, seq]
    source_mask: np.ndarray  # bool  [batch, seq]
    pad_mask: np.ndarray     # bool  [batch, seq]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.source_mask = np.asarray(self.source_mask, dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if not (self.tokens.shape == self.source_mask.shape == self.pad_mask.shape):
            raise BatchError("tokens and masks must share one shape")
        if np.any(self.source_mask & self.pad_mask):
            raise BatchError("a position cannot be both source and padding")

    @property
    def seq_len(self):
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]


def load_corpus(path):
    """Read `source<TAB>target` pairs, one per line; blank lines skipped."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path} is not valid UTF-8: {exc}") from None
    pairs = []
    for lineno, line in enumerate(raw.split("\n"), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"{path}:{lineno}: expected 'source<TAB>target'")
        source, target = line.split("\t", 1)
        pairs.append((source, target))
    return pairs


def make_toy_task(kind, n_pairs, len_range, vocab_size, seed):
    """Generate a deterministic toy corpus: copy, reverse, or sort.

    The alphabet is the first `vocab_size - 4` lowercase letters (four ids
    are reserved), and targets are the exact functional image of sources.
    """
    n_chars = vocab_size - len(RESERVED)
    if n_chars < 1:
        raise ConfigError(f"vocab_size must be >= {len(RESERVED) + 1}, got {vocab_size}")
    if n_chars > len(string.ascii_lowercase):
        raise ConfigError(f"toy alphabet supports at most 26 characters, got {n_chars}")
    transforms = {
        "copy": lambda s: s,
        "reverse": lambda s: s[::-1],
        "sort": lambda s: "".join(sorted(s)),
    }
    if kind not in transforms:
        raise ConfigError(f"unknown toy task {kind!r}; pick one of {sorted(transforms)}")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad length range {len_range}")
    alphabet = string.ascii_lowercase[:n_chars]
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(lo, hi + 1))
        source = "".join(alphabet[i] for i in rng.integers(0, n_chars, size=length))
        pairs.append((source, transforms[kind](source)))
    return pairs


def encode_pair(source, target, vocab, max_seq_len):
    """Single encoded row: ids, source mask, pad mask (unpadded length)."""
    ids = (
        [BOS_ID]
        + vocab.encode(source)
        + [EOS_ID]
        + vocab.encode(target)
        + [EOS_ID]
    )
    if len(ids) > max_seq_len:
        raise BatchError(
            f"encoded pair length {len(ids)} exceeds max_seq_len {max_seq_len}"
        )
    source_len = len(source) + 2
    return ids, source_len


def batchify(pairs, vocab, max_seq_len, batch_size, seed=None):
    """Encode pairs and group them into Batch objects.

    Rows are padded to the longest sequence in their batch. With `seed`
    given, pair order is shuffled deterministically first. A pair that
    cannot fit raises `BatchError` naming its index.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    encoded = []
    for idx, (source, target) in enumerate(pairs):
        try:
            ids, source_len = encode_pair(source, target, vocab, max_seq_len)
        except BatchError as exc:
            raise BatchError(f"pair {idx}: {exc}") from None
        encoded.append((ids, source_len))
    order = np.arange(len(encoded))
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    batches = []
    for start in range(0, len(encoded), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        width = max(len(ids) for ids, _ in chunk)
        tokens = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        source_mask = np.zeros((len(chunk), width), dtype=bool)
        pad_mask = np.ones((len(chunk), width), dtype=bool)
        for row, (ids, source_len) in enumerate(chunk):
            tokens[row, : len(ids)] = ids
            source_mask[row, :source_len] = True
            pad_mask[row, : len(ids)] = False
        batches.append(Batch(tokens=tokens, source_mask=source_mask, pad_mask=pad_mask))
    return batches
