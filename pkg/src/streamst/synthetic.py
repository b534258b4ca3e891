"""Synthetic translation task with controllable word-order divergence.

Source sentences are random words over a small letter alphabet.  The target
is a deterministic per-letter substitution into uppercase, so translation
quality is measurable without human references.  Each source symbol (letters
and spaces alike) emits a fixed number of feature frames: a per-symbol mean
vector plus gaussian noise.  A fraction of utterances can have their target
word order reversed, which makes their alignments anti-monotone and their
early target words depend on late source material.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import AlignmentSet, load_alignments, save_alignments
from .segmentation import WordSpan, load_word_boundaries, save_word_boundaries

FEATURES_MAGIC = b"SIMF"

SOURCE_ALPHABET = "abcdefghijklmnopqrst"

MAX_WORD_LEN = 6


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters that define the task; the seed also fixes the per-symbol
    mean feature vectors."""

    alphabet: str = SOURCE_ALPHABET
    frames_per_symbol: int = 8
    feat_dim: int = 16
    feature_scale: float = 6.0
    noise_sigma: float = 0.1
    cipher_shift: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_symbol < 4:
            raise ConfigError("frames_per_symbol must be at least 4, got %d"
                              % self.frames_per_symbol)
        if len(set(self.alphabet)) != len(self.alphabet) or " " in self.alphabet:
            raise ConfigError("alphabet must be unique letters without spaces")
        if self.feat_dim < 4:
            raise ConfigError("feat_dim must be at least 4")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be positive")

    @property
    def target_vocab(self) -> str:
        return self.alphabet.upper() + " "

    def cipher_char(self, ch: str) -> str:
        if ch == " ":
            return " "
        idx = self.alphabet.index(ch)
        return self.alphabet[(idx + self.cipher_shift) % len(self.alphabet)].upper()

    def cipher_word(self, word: str) -> str:
        return "".join(self.cipher_char(c) for c in word)


@dataclass
class Utterance:
    utt_id: str
    source: str
    target: str
    frames: np.ndarray                 # (T, feat_dim) float32
    words: list                        # WordSpans tiling the frame axis
    alignment: AlignmentSet            # word-level, 1-based
    reversed_order: bool = False

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def base_vectors(spec: SyntheticSpec) -> dict:
    """Per-symbol mean feature vectors, fixed by the task seed alone.

    Scaled well above unit variance so the symbol identity survives the
    small-weight convolutional front end of an untrained model.
    """
    rng = np.random.default_rng(spec.seed)
    out = {}
    for ch in spec.alphabet + " ":
        vec = rng.standard_normal(spec.feat_dim) * spec.feature_scale
        out[ch] = vec.astype(np.float32)
    return out


def _word_sizes(rng, total_symbols: int) -> list:
    """Split a symbol budget into word lengths, one space between words."""
    sizes = [int(rng.integers(1, min(MAX_WORD_LEN, total_symbols) + 1))]
    remaining = total_symbols - sizes[0]
    while remaining >= 2:
        w = int(rng.integers(1, min(MAX_WORD_LEN, remaining - 1) + 1))
        sizes.append(w)
        remaining -= w + 1
    if remaining == 1:
        sizes[-1] += 1  # a lone symbol cannot be a word of its own
    return sizes


def generate_corpus(spec: SyntheticSpec, n_utts: int, min_len: int, max_len: int,
                    reversal_fraction: float = 0.0, seed: int | None = None) -> list:
    """Build utterances with features, word spans, and alignments.

    min_len and max_len bound the symbol count (letters plus spaces).  seed
    defaults to the task seed; the per-symbol mean vectors depend only on
    the task seed, so different corpora share them.
    """
    if n_utts < 1:
        raise ConfigError("need at least one utterance")
    if not (1 <= min_len <= max_len):
        raise ConfigError("bad length range [%d, %d]" % (min_len, max_len))
    if not (0.0 <= reversal_fraction <= 1.0):
        raise ConfigError("reversal_fraction must be within [0, 1]")
    bases = base_vectors(spec)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    fps = spec.frames_per_symbol
    corpus = []
    for u in range(n_utts):
        total = int(rng.integers(min_len, max_len + 1))
        sizes = _word_sizes(rng, total)
        words_text = []
        for w in sizes:
            words_text.append("".join(spec.alphabet[int(rng.integers(len(spec.alphabet)))]
                                      for _ in range(w)))
        source = " ".join(words_text)
        reverse = bool(rng.random() < reversal_fraction)
        target_words = [spec.cipher_word(w) for w in words_text]
        if reverse:
            target_words = list(reversed(target_words))
        target = " ".join(target_words)
        n_words = len(words_text)
        # spans tile the frame axis; each word keeps its trailing space
        spans = []
        pos = 0
        for j, w in enumerate(words_text):
            start = pos * fps
            pos += len(w) + (1 if j < n_words - 1 else 0)
            spans.append(WordSpan(w, start, pos * fps))
        t_len = len(source) * fps
        frames = np.empty((t_len, spec.feat_dim), dtype=np.float32)
        for p, ch in enumerate(source):
            noise = rng.normal(0.0, spec.noise_sigma, size=(fps, spec.feat_dim))
            frames[p * fps:(p + 1) * fps] = bases[ch] + noise.astype(np.float32)
        if reverse:
            pairs = {(j + 1, n_words - j) for j in range(n_words)}
        else:
            pairs = {(j + 1, j + 1) for j in range(n_words)}
        utt_id = "utt%04d" % u
        corpus.append(Utterance(
            utt_id=utt_id, source=source, target=target, frames=frames,
            words=spans,
            alignment=AlignmentSet(utt_id, n_words, n_words, frozenset(pairs)),
            reversed_order=reverse))
    return corpus


def split_holdout(corpus: list, fraction: float = 0.1):
    """Deterministic split: the tail of the id-sorted corpus is held out."""
    if not (0.0 <= fraction < 1.0):
        raise ConfigError("holdout fraction must be within [0, 1)")
    ordered = sorted(corpus, key=lambda u: u.utt_id)
    if fraction == 0.0 or len(ordered) < 2:
        return ordered, []
    n_hold = max(1, int(len(ordered) * fraction))
    return ordered[:-n_hold], ordered[-n_hold:]


# ---------------------------------------------------------------------------
# feature files


def write_features(path, items: list) -> None:
    """Write (utt_id, frames) pairs as one binary file."""
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<I", len(items)))
        for utt_id, frames in items:
            ident = utt_id.encode("utf-8")
            t_len, d = frames.shape
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<II", t_len, d))
            f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path) -> list:
    """Read (utt_id, frames) pairs back, in file order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURES_MAGIC:
        raise ConfigError("%s is not a feature file (bad magic)" % (path,))
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        off = 8
        items = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            utt_id = blob[off:off + id_len].decode("utf-8")
            if len(blob[off:off + id_len]) != id_len:
                raise struct.error("short id")
            off += id_len
            t_len, d = struct.unpack_from("<II", blob, off)
            off += 8
            n_bytes = 4 * t_len * d
            chunk = blob[off:off + n_bytes]
            if len(chunk) != n_bytes:
                raise struct.error("short tensor")
            items.append((utt_id, np.frombuffer(chunk, dtype="<f4")
                          .reshape(t_len, d).astype(np.float32)))
            off += n_bytes
    except struct.error:
        raise ConfigError("%s is truncated" % (path,)) from None
    if off != len(blob):
        raise ConfigError("%s has %d trailing bytes" % (path, len(blob) - off))
    return items


# ---------------------------------------------------------------------------
# corpus directories


@dataclass
class LoadedCorpus:
    """A corpus as read back from disk."""

    ids: list
    features: dict       # utt_id -> (T, D) array
    sources: dict        # utt_id -> text
    targets: dict        # utt_id -> text
    word_spans: dict     # utt_id -> list of WordSpan (no text)
    alignments: list = field(default_factory=list)

    def frames_of(self, utt_id: str) -> np.ndarray:
        return self.features[utt_id]


def as_loaded(corpus: list) -> LoadedCorpus:
    """View generated utterances through the on-disk corpus interface."""
    return LoadedCorpus(
        ids=[u.utt_id for u in corpus],
        features={u.utt_id: u.frames for u in corpus},
        sources={u.utt_id: u.source for u in corpus},
        targets={u.utt_id: u.target for u in corpus},
        word_spans={u.utt_id: u.words for u in corpus},
        alignments=[u.alignment for u in corpus])


def _write_tsv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, text in rows:
            f.write("%s\t%s\n" % (utt_id, text))


def _read_tsv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                utt_id, text = line.split("\t", 1)
            except ValueError:
                raise ConfigError("%s line %d is not id<TAB>text" % (path, lineno)) from None
            out[utt_id] = text
    return out


def save_corpus(out_dir, corpus: list) -> None:
    """Write features, texts, word boundaries, and alignments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "features.simf", [(u.utt_id, u.frames) for u in corpus])
    _write_tsv(out / "source.tsv", [(u.utt_id, u.source) for u in corpus])
    _write_tsv(out / "target.tsv", [(u.utt_id, u.target) for u in corpus])
    save_word_boundaries(out / "boundaries.tsv",
                         {u.utt_id: u.words for u in corpus})
    save_alignments(out / "alignments.txt", [u.alignment for u in corpus])


def load_corpus(data_dir) -> LoadedCorpus:
    """Read a corpus directory written by save_corpus."""
    root = Path(data_dir)
    items = read_features(root / "features.simf")
    ids = [utt_id for utt_id, _ in items]
    features = dict(items)
    sources = _read_tsv(root / "source.tsv")
    targets = _read_tsv(root / "target.tsv")
    spans = load_word_boundaries(root / "boundaries.tsv")
    missing = [i for i in ids if i not in targets]
    if missing:
        raise ConfigError("no target text for %s" % ", ".join(missing[:3]))
    aligns = []
    align_path = root / "alignments.txt"
    if align_path.exists():
        aligns = load_alignments(align_path, ids,
                                 [len(sources[i].split()) for i in ids],
                                 [len(targets[i].split()) for i in ids])
    return LoadedCorpus(ids=ids, features=features, sources=sources,
                        targets=targets, word_spans=spans, alignments=aligns)
