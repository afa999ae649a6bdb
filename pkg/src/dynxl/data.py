"""Corpus ingestion, splits, segment iteration and the synthetic repetition corpus.

Vocabularies are always built from the training portion only. Symbols that
first appear in validation or test text map to a reserved ``<unk>`` id, which
is appended to the vocabulary only when such symbols exist.
"""

from __future__ import annotations

import hashlib
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

UNK = "<unk>"
CHAR27 = "abcdefghijklmnopqrstuvwxyz "
KINDS = ("byte", "char27", "word", "synthetic")
STREAM_MAGIC = b"DETS1"
SPLITS = ("train", "valid", "test", "all")


@dataclass(frozen=True)
class Vocab:
    kind: str
    tokens: tuple
    counts: tuple[int, ...]
    unk_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown vocabulary kind {self.kind!r}")
        if len(self.tokens) != len(self.counts):
            raise DataError("token table and count table differ in length")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be distinct")

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.tokens)}

    def to_tsv(self) -> str:
        lines = [f"#kind\t{self.kind}"]
        for i, (tok, c) in enumerate(zip(self.tokens, self.counts)):
            lines.append(f"{_escape(self.kind, tok, i == self.unk_id)}\t{i}\t{c}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()[:32]

    def frequency_order(self) -> list[int]:
        """Token ids by descending training count, ties broken by id."""
        return sorted(range(self.size), key=lambda i: (-self.counts[i], i))


def _escape(kind: str, tok, is_unk: bool) -> str:
    if is_unk:
        return UNK
    if kind == "byte":
        return f"{tok:02x}"
    if kind == "synthetic":
        return str(tok)
    return str(tok).encode("unicode_escape").decode("ascii")


def _unescape(kind: str, text: str):
    if text == UNK:
        return UNK
    if kind == "byte":
        return int(text, 16)
    if kind == "synthetic":
        return int(text)
    return text.encode("ascii").decode("unicode_escape")


@dataclass(frozen=True)
class TokenStream:
    ids: np.ndarray
    vocab: Vocab
    split: str = "all"

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise DataError("token stream must be one-dimensional")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise DataError(f"token id outside [0, {self.vocab.size})")
        if self.split not in SPLITS:
            raise DataError(f"unknown split label {self.split!r}")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return int(self.ids.size)

    @property
    def unknown_count(self) -> int:
        if self.vocab.unk_id is None:
            return 0
        return int(np.count_nonzero(self.ids == self.vocab.unk_id))

    def slice(self, start: int, stop: int, split: str | None = None) -> "TokenStream":
        return TokenStream(self.ids[start:stop], self.vocab, split or self.split)


def _cut_points(n: int, fractions: Sequence[float]) -> tuple[int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("fractions", "need three positive fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions", f"must sum to 1, got {sum(fractions)}")
    n_train = int(Fraction(str(fractions[0])) * n)
    n_valid = int(Fraction(str(fractions[1])) * n)
    if n_train < 1 or n_valid < 1 or n - n_train - n_valid < 1:
        raise DataError(f"{n} tokens cannot give every split at least one token")
    return n_train, n_train + n_valid


def split_fractions(stream: TokenStream, fractions=(0.9, 0.05, 0.05)):
    """Contiguous train/valid/test split; cut points are floored, test takes the rest."""
    a, b = _cut_points(len(stream), fractions)
    return (
        stream.slice(0, a, "train"),
        stream.slice(a, b, "valid"),
        stream.slice(b, len(stream), "test"),
    )


def _train_prefix(n: int, fractions) -> int:
    return n if fractions is None else _cut_points(n, fractions)[0]


def load_byte_corpus(raw: bytes, fractions=None) -> tuple[Vocab, TokenStream]:
    """Byte-level tokens; vocabulary = distinct training bytes, ascending."""
    if not raw:
        raise DataError("empty byte corpus")
    arr = np.frombuffer(bytes(raw), dtype=np.uint8)
    n_train = _train_prefix(arr.size, fractions)
    table = sorted(int(b) for b in np.unique(arr[:n_train]))
    lut = np.full(256, -1, dtype=np.int64)
    lut[table] = np.arange(len(table))
    ids = lut[arr]
    unk_id = None
    if (ids < 0).any():
        unk_id = len(table)
        ids[ids < 0] = unk_id
    counts = np.bincount(arr[:n_train], minlength=256)[table]
    tokens = tuple(table) + ((UNK,) if unk_id is not None else ())
    cnt = tuple(int(c) for c in counts) + ((0,) if unk_id is not None else ())
    vocab = Vocab("byte", tokens, cnt, unk_id)
    return vocab, TokenStream(ids, vocab)


_NON_ALPHA = re.compile(r"[^a-z]+")


def char27_text(text: str) -> str:
    """Lowercase, then collapse every run of non a-z characters to one space."""
    return _NON_ALPHA.sub(" ", text.lower())


def reduce_to_char27(text: str, fractions=None) -> tuple[Vocab, TokenStream]:
    reduced = char27_text(text)
    lut = np.full(128, -1, dtype=np.int64)
    for i, ch in enumerate(CHAR27):
        lut[ord(ch)] = i
    ids = lut[np.frombuffer(reduced.encode("ascii"), dtype=np.uint8)]
    n_train = _train_prefix(len(ids), fractions) if len(ids) else 0
    counts = np.bincount(ids[:n_train], minlength=27)
    vocab = Vocab("char27", tuple(CHAR27), tuple(int(c) for c in counts))
    return vocab, TokenStream(ids, vocab)


def build_word_stream(text: str, vocab_limit: int, fractions=None) -> tuple[Vocab, TokenStream]:
    """Whitespace tokens; the ``vocab_limit`` most frequent training words plus <unk>.

    Ids follow descending training frequency, ties broken lexicographically,
    and <unk> always takes the last id.
    """
    if vocab_limit < 1:
        raise ConfigError("vocab_limit", "must be at least 1")
    words = text.split()
    n_train = _train_prefix(len(words), fractions) if words else 0
    freq = Counter(words[:n_train])
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_limit]
    table = [w for w, _ in ranked]
    index = {w: i for i, w in enumerate(table)}
    unk_id = len(table)
    ids = np.fromiter((index.get(w, unk_id) for w in words), dtype=np.int64, count=len(words))
    unk_train = sum(c for w, c in freq.items() if w not in index)
    vocab = Vocab("word", tuple(table) + (UNK,), tuple(c for _, c in ranked) + (unk_train,), unk_id)
    return vocab, TokenStream(ids, vocab)


def detokenize(stream: TokenStream):
    """Inverse of tokenization: bytes for byte kind, str for char27, word list otherwise."""
    v = stream.vocab
    if v.unk_id is not None and stream.unknown_count:
        raise DataError("stream contains <unk> tokens and cannot be detokenized")
    if v.kind == "byte":
        return bytes(np.asarray(v.tokens[: v.unk_id] if v.unk_id is not None else v.tokens,
                                dtype=np.uint8)[stream.ids])
    if v.kind == "char27":
        return "".join(CHAR27[i] for i in stream.ids)
    return [v.tokens[i] for i in stream.ids]


def segment_iter(stream: TokenStream | np.ndarray, segment_len: int) -> Iterator[np.ndarray]:
    """Consecutive non-overlapping segments; the last one may be short."""
    if segment_len < 1:
        raise ConfigError("segment_len", "must be at least 1")
    ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream)
    for start in range(0, len(ids), segment_len):
        yield ids[start : start + segment_len]


# ---------------------------------------------------------------------------
# Synthetic corpus with re-occurring patterns


@dataclass(frozen=True)
class RepetitionSpec:
    vocab_size: int
    n_patterns: int
    pattern_len: int
    background_entropy: float
    length: int
    doc_len: int | None = None

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size", "need at least 2 symbols")
        if self.n_patterns < 1:
            raise ConfigError("n_patterns", "need at least one pattern")
        if self.pattern_len < 2:
            raise ConfigError("pattern_len", "patterns must have length >= 2")
        if not 0.0 <= self.background_entropy < 1.0:
            raise ConfigError("background_entropy", "must lie in [0, 1)")
        if self.length < 1:
            raise ConfigError("length", "must be positive")
        if self.doc_len is not None and self.doc_len < self.pattern_len:
            raise ConfigError("doc_len", "documents must hold at least one pattern")


def _doc_rngs(seed: int, n_docs: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_docs)]


def _doc_sizes(spec: RepetitionSpec) -> list[int]:
    doc = spec.doc_len or spec.length
    sizes = [doc] * (spec.length // doc)
    if spec.length % doc:
        sizes.append(spec.length % doc)
    return sizes


def pattern_banks(seed: int, vocab_size: int, n_patterns: int, pattern_len: int,
                  background_entropy: float, length: int, doc_len: int | None = None) -> list[np.ndarray]:
    """The per-document pattern banks that :func:`gen_repetition_corpus` uses."""
    spec = RepetitionSpec(vocab_size, n_patterns, pattern_len, background_entropy, length, doc_len)
    spec.validate()
    rngs = _doc_rngs(seed, len(_doc_sizes(spec)))
    return [r.integers(0, vocab_size, size=(n_patterns, pattern_len)) for r in rngs]


def gen_repetition_corpus(seed: int, vocab_size: int, n_patterns: int, pattern_len: int,
                          background_entropy: float, length: int,
                          doc_len: int | None = None, split: str = "all") -> TokenStream:
    """Documents of uniform background noise interleaved with a private pattern bank.

    Each document draws ``n_patterns`` random patterns, then repeatedly emits a
    gap of i.i.d. uniform background tokens followed by one bank pattern chosen
    uniformly. Gap lengths are geometric so that ``background_entropy`` is the
    expected fraction of background tokens (0 gives pure pattern repetition).
    """
    spec = RepetitionSpec(vocab_size, n_patterns, pattern_len, background_entropy, length, doc_len)
    spec.validate()
    sizes = _doc_sizes(spec)
    out = []
    bg = background_entropy
    mean_gap = pattern_len * bg / (1.0 - bg)
    for rng, size in zip(_doc_rngs(seed, len(sizes)), sizes):
        bank = rng.integers(0, vocab_size, size=(n_patterns, pattern_len))
        doc: list[np.ndarray] = []
        n = 0
        while n < size:
            if mean_gap > 0:
                gap = int(rng.geometric(1.0 / (1.0 + mean_gap))) - 1
                doc.append(rng.integers(0, vocab_size, size=gap))
                n += gap
            doc.append(bank[rng.integers(n_patterns)])
            n += pattern_len
        out.append(np.concatenate(doc)[:size])
    ids = np.concatenate(out)
    counts = np.bincount(ids, minlength=vocab_size)
    vocab = Vocab("synthetic", tuple(range(vocab_size)), tuple(int(c) for c in counts))
    return TokenStream(ids, vocab, split)


# ---------------------------------------------------------------------------
# Persistence


_SPLIT_CODES = {s: i for i, s in enumerate(SPLITS)}
_HEADER = struct.Struct("<5sIQB")


def write_stream(path, stream: TokenStream) -> None:
    """Little-endian header (magic, vocab_size, count, split code) then uint32 ids."""
    header = _HEADER.pack(STREAM_MAGIC, stream.vocab.size, len(stream), _SPLIT_CODES[stream.split])
    Path(path).write_bytes(header + stream.ids.astype("<u4").tobytes())


def read_stream_header(path) -> tuple[int, int, str]:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError(f"{path}: truncated stream header")
    magic, vocab_size, count, code = _HEADER.unpack(head)
    if magic != STREAM_MAGIC or code >= len(SPLITS):
        raise FormatError(f"{path}: not a token stream file")
    return vocab_size, count, SPLITS[code]


def read_stream(path, vocab: Vocab) -> TokenStream:
    vocab_size, count, split = read_stream_header(path)
    if vocab_size != vocab.size:
        raise FormatError(f"{path}: vocab size {vocab_size} but vocabulary has {vocab.size}")
    body = Path(path).read_bytes()[_HEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {count} tokens, found {len(body) // 4}")
    return TokenStream(np.frombuffer(body, dtype="<u4").astype(np.int64), vocab, split)


def write_vocab(path, vocab: Vocab) -> None:
    Path(path).write_text(vocab.to_tsv(), encoding="utf-8")


def read_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("#kind\t"):
        raise FormatError(f"{path}: missing '#kind' header")
    kind = lines[0].split("\t", 1)[1]
    tokens, counts, unk_id = [], [], None
    for line in lines[1:]:
        if not line:
            continue
        tok, idx, cnt = line.rsplit("\t", 2)
        if int(idx) != len(tokens):
            raise FormatError(f"{path}: ids must be dense and ordered")
        value = _unescape(kind, tok)
        if value == UNK:
            unk_id = len(tokens)
        tokens.append(value)
        counts.append(int(cnt))
    return Vocab(kind, tuple(tokens), tuple(counts), unk_id)
