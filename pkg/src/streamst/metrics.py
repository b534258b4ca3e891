"""Quality, latency, and difficulty metrics.

BLEU is the corpus-level geometric mean of modified n-gram precisions with a
brevity penalty.  Average lagging measures how many milliseconds the writes
trail an ideal evenly-paced translator, truncated at the first write that
waited for the whole input.  Lagging difficulty scores how early a reference
translation needs source material it has not seen yet, from word alignments
alone: it is the average, up to the point where the source is exhausted, of
the furthest aligned source position minus the evenly-paced diagonal.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass

from .errors import ConfigError

logger = logging.getLogger(__name__)

TRADEOFF_COLUMNS = ["strategy", "k", "s", "N", "segmentation",
                    "BLEU", "AL_ms", "frames_processed", "wall_ns"]


def _tokens(text: str, mode: str) -> list:
    if mode == "word":
        return text.split()
    if mode == "char":
        return list(text)
    raise ConfigError("tokenize mode must be 'word' or 'char', got %r" % (mode,))


# ---------------------------------------------------------------------------
# corpus BLEU


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list, references: list, max_order: int = 4,
         smooth_eps: float | None = None, tokenize: str = "word") -> float:
    """Corpus BLEU in [0, 1].

    Orders with no hypothesis n-grams anywhere in the corpus are left out of
    the geometric mean; an order with candidates but zero matches sends the
    score to zero unless smooth_eps substitutes a small floor precision.
    """
    if not hypotheses:
        raise ValueError("empty hypothesis corpus")
    if len(hypotheses) != len(references):
        raise ValueError("%d hypotheses against %d references"
                         % (len(hypotheses), len(references)))
    matches = [0] * max_order
    guesses = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = _tokens(hyp, tokenize)
        r = _tokens(ref, tokenize)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc = _ngrams(h, n)
            if not hc:
                continue
            rc = _ngrams(r, n)
            guesses[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    used = 0
    for n in range(max_order):
        if guesses[n] == 0:
            continue  # nothing this long anywhere; leave the order out
        used += 1
        if matches[n] == 0:
            if smooth_eps is None:
                return 0.0
            log_sum += math.log(smooth_eps)
        else:
            log_sum += math.log(matches[n] / guesses[n])
    if used == 0:
        return 0.0
    brevity = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return brevity * math.exp(log_sum / used)


# ---------------------------------------------------------------------------
# average lagging


def average_lagging(delays_ms: list, duration_ms: float, ref_len: int) -> float:
    """Mean lag of the writes behind an evenly paced translator, in ms.

    delays_ms[i] is when hypothesis token i+1 was committed, measured from
    utterance start.  The average stops at the first token whose delay
    reached the full duration; if none did, it runs over all tokens.
    """
    if not delays_ms:
        raise ValueError("no write delays")
    if ref_len < 1:
        raise ValueError("reference length must be positive, got %d" % ref_len)
    if duration_ms <= 0:
        raise ValueError("duration must be positive, got %r" % duration_ms)
    tau = len(delays_ms)
    for i, d in enumerate(delays_ms, 1):
        if d >= duration_ms:
            tau = i
            break
    rate = duration_ms / ref_len
    total = 0.0
    for i in range(1, tau + 1):
        total += delays_ms[i - 1] - (i - 1) * rate
    return total / tau


# ---------------------------------------------------------------------------
# lagging difficulty


@dataclass(frozen=True)
class AlignmentSet:
    """Word alignment for one sentence pair; indices are 1-based."""

    utt_id: str
    src_len: int
    tgt_len: int
    pairs: frozenset  # (source position, target position)

    def __post_init__(self):
        if self.src_len < 1 or self.tgt_len < 1:
            raise ConfigError("alignment for %r has empty sides" % (self.utt_id,))
        for i, t in self.pairs:
            if not (1 <= i <= self.src_len and 1 <= t <= self.tgt_len):
                raise ConfigError("pair (%d, %d) outside %dx%d for %r"
                                  % (i, t, self.src_len, self.tgt_len, self.utt_id))


@dataclass(frozen=True)
class DifficultyScore:
    utt_id: str
    value: float
    tau: int  # target position where the source was exhausted


def lagging_difficulty(align: AlignmentSet) -> DifficultyScore:
    """Score from the running maximum of aligned source positions.

    The source counts as exhausted at the final target token regardless of
    alignment coverage, so the cut-off position always exists.
    """
    if not align.pairs:
        raise ValueError("alignment set for %r has no pairs" % (align.utt_id,))
    by_target: dict = {}
    for i, t in align.pairs:
        by_target[t] = max(by_target.get(t, 0), i)
    z = 0
    zs = []
    for t in range(1, align.tgt_len + 1):
        z = max(z, by_target.get(t, 0))
        if t == align.tgt_len:
            z = align.src_len
        zs.append(z)
    tau = next(t for t, zt in enumerate(zs, 1) if zt == align.src_len)
    rate = align.src_len / align.tgt_len
    total = 0.0
    for t in range(1, tau + 1):
        total += zs[t - 1] - rate * (t - 1)
    return DifficultyScore(align.utt_id, total / tau, tau)


def extract_subsets(scores: list, n: int):
    """Pick the n hardest and n easiest utterance ids; ties break by id."""
    if n < 1:
        raise ValueError("subset size must be positive, got %d" % n)
    if n > len(scores):
        raise ValueError("subset of %d from only %d scores" % (n, len(scores)))
    hardest = [s.utt_id for s in sorted(scores, key=lambda s: (-s.value, s.utt_id))[:n]]
    easiest = [s.utt_id for s in sorted(scores, key=lambda s: (s.value, s.utt_id))[:n]]
    return hardest, easiest


# ---------------------------------------------------------------------------
# alignment files: one line per utterance of "i-j" pairs, 0-based on disk


def save_alignments(path, aligns: list) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in aligns:
            cells = sorted((i - 1, t - 1) for i, t in a.pairs)
            f.write(" ".join("%d-%d" % c for c in cells) + "\n")


def load_alignments(path, ids: list, src_lens: list, tgt_lens: list) -> list:
    """Read alignments; line order must follow the given utterance order."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if len(lines) != len(ids):
        raise ConfigError("%s has %d lines for %d utterances" % (path, len(lines), len(ids)))
    out = []
    for utt_id, src_len, tgt_len, line in zip(ids, src_lens, tgt_lens, lines):
        pairs = set()
        for cell in line.split():
            try:
                i, t = cell.split("-")
                pairs.add((int(i) + 1, int(t) + 1))
            except ValueError:
                raise ConfigError("%s has malformed pair %r for %r"
                                  % (path, cell, utt_id)) from None
        out.append(AlignmentSet(utt_id, src_len, tgt_len, frozenset(pairs)))
    return out


# ---------------------------------------------------------------------------
# trade-off tables


@dataclass
class TradeoffRow:
    strategy: str
    k: int
    s: int
    n_tokens: int
    segmentation: str
    bleu: float
    al_ms: float
    frames_processed: float  # mean per utterance
    wall_ns: float           # mean per utterance


def tradeoff_table(results: list, references: dict, tokenize: str = "word") -> list:
    """Aggregate one row per configuration.

    results holds (config, traces) pairs, where config carries strategy, k,
    s, N and segmentation labels, and traces are per-utterance records.
    Utterances without a reference are skipped with a warning.
    """
    rows = []
    for config, traces in results:
        hyps, refs, lags = [], [], []
        frames, walls = [], []
        for tr in traces:
            ref = references.get(tr.utt_id)
            if ref is None:
                logger.warning("no reference for %r, skipping", tr.utt_id)
                continue
            hyps.append(tr.hypothesis)
            refs.append(ref)
            frames.append(tr.frames_processed)
            walls.append(tr.wall_ns)
            if tr.delays_ms:
                lags.append(average_lagging(tr.delays_ms, tr.duration_ms,
                                            max(1, len(_tokens(ref, tokenize)))))
            else:
                logger.debug("empty hypothesis for %r, no lag sample", tr.utt_id)
        if not hyps:
            logger.warning("configuration %r matched no references", config)
            continue
        rows.append(TradeoffRow(
            strategy=config.get("strategy", ""),
            k=int(config.get("k", 0)),
            s=int(config.get("s", 0)),
            n_tokens=int(config.get("N", 1)),
            segmentation=str(config.get("segmentation", "fixed")),
            bleu=bleu(hyps, refs, tokenize=tokenize),
            al_ms=(sum(lags) / len(lags)) if lags else float("nan"),
            frames_processed=sum(frames) / len(frames),
            wall_ns=sum(walls) / len(walls),
        ))
    return rows


def write_tradeoff_csv(path, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRADEOFF_COLUMNS)
        for r in rows:
            w.writerow([r.strategy, r.k, r.s, r.n_tokens, r.segmentation,
                        "%.6f" % r.bleu, "%.3f" % r.al_ms,
                        "%.1f" % r.frames_processed, "%.1f" % r.wall_ns])
