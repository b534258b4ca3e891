"""Incremental encoding strategies for streaming input.

Three strategies are provided.  "blstm-reencode" and "ulstm-reencode" rerun
the front end and encoder over the whole buffered prefix after every read;
the bidirectional variant pays twice per buffered frame, and the
unidirectional variant produces outputs bit-identical to encoding the same
prefix offline.  "ulstm-overlap" encodes only the frames read since the last
chunk plus a short overlap reaching back into already-encoded input, then
drops a quarter of the overlap worth of trailing positions, which were
computed against the zero padding at the chunk edge and would otherwise be
corrupted.  Its outputs grow monotonically and earlier positions are never
revised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, StreamClosedError
from .model import LstmState, ModelConfig, Parameters, encoder_forward, vgg_forward

STRATEGIES = ("blstm-reencode", "ulstm-reencode", "ulstm-overlap")

MIN_CHUNK_FRAMES = 4  # the front end needs this many frames for one position


def _half(n: int) -> int:
    # round(n / 2) with halves rounding up
    return (n + 1) // 2


def _quarter(n: int) -> int:
    # round(n / 4) with halves rounding up
    return (n + 2) // 4


def overlap_schedule(step: int, k: int, s: int) -> int:
    """Frames of already-read input a chunk reaches back over.

    The first chunk has no predecessor to lean on and uses half the initial
    read k; later chunks use half the stride s.
    """
    if step < 1:
        raise ValueError("step is 1-based, got %d" % step)
    return _half(k) if step == 1 else _half(s)


@dataclass
class EncodeCost:
    """Work counters for one stream."""

    frames_processed: int  # frames pushed through the front end, doubled for bidirectional
    chunks: int            # encoder invocations
    wall_ns: int           # wall clock spent encoding


@dataclass
class ChunkRecord:
    """One encoder invocation: which frames went in, what came out."""

    start: int      # first buffered frame index fed to the front end
    length: int     # chunk length in frames
    kept: int       # positions emitted after discarding
    discarded: int  # trailing positions dropped as edge-corrupted


class EncoderStream:
    """Incremental encoder for one utterance.

    Frames arrive through feed(); encoder outputs accumulate according to the
    configured strategy.  Feeding after the final chunk raises
    StreamClosedError.
    """

    def __init__(self, strategy: str, params: Parameters, cfg: ModelConfig):
        if strategy not in STRATEGIES:
            raise ConfigError("unknown strategy %r, expected one of %s"
                              % (strategy, ", ".join(STRATEGIES)))
        if strategy == "blstm-reencode" and not cfg.bidirectional:
            raise ConfigError("blstm-reencode needs a bidirectional model")
        if strategy != "blstm-reencode" and cfg.bidirectional:
            raise ConfigError("%s needs a unidirectional model" % strategy)
        self.strategy = strategy
        self.params = params
        self.cfg = cfg
        self._buffer = np.zeros((0, cfg.feat_dim), dtype=np.float32)
        self._closed = False
        # re-encode strategies replace this tensor wholesale
        self._full_outputs: ad.Tensor | None = None
        # overlap strategy appends blocks of rows, earlier rows never change
        self._blocks: list = []
        self._stacked: ad.Tensor | None = None
        self._carried: LstmState | None = None
        self._offset = 0       # where the next chunk starts in the buffer
        self._encoded_to = 0   # buffered frames consumed by encodes so far
        self.chunk_log: list[ChunkRecord] = []
        self._frames_processed = 0
        self._wall_ns = 0

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def frames_buffered(self) -> int:
        return len(self._buffer)

    @property
    def positions(self) -> int:
        if self.strategy == "ulstm-overlap":
            return sum(b.shape[0] for b in self._blocks)
        return 0 if self._full_outputs is None else self._full_outputs.shape[0]

    @property
    def outputs(self) -> ad.Tensor | None:
        """Current encoder outputs as a (P, enc_out) tensor, None before the
        first position exists."""
        if self.strategy != "ulstm-overlap":
            return self._full_outputs
        if not self._blocks:
            return None
        if self._stacked is None or self._stacked.shape[0] != self.positions:
            self._stacked = ad.Tensor(np.concatenate(self._blocks, axis=0))
        return self._stacked

    def cost(self) -> EncodeCost:
        return EncodeCost(self._frames_processed, len(self.chunk_log), self._wall_ns)

    def feed(self, frames: np.ndarray, is_last: bool = False) -> ad.Tensor | None:
        """Append frames and encode according to the strategy.

        Returns the updated outputs.  Chunks shorter than the front end
        window are buffered until enough frames arrive; a final chunk that
        stays shorter is dropped.
        """
        if self._closed:
            raise StreamClosedError("stream already received its final chunk")
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.feat_dim:
            raise ConfigError("frames must be (n, %d), got %r" % (self.cfg.feat_dim, frames.shape))
        if len(frames):
            self._buffer = np.concatenate([self._buffer, frames], axis=0)
        if is_last:
            self._closed = True
        t0 = time.perf_counter_ns()
        if self.strategy == "ulstm-overlap":
            self._encode_overlap()
        else:
            self._reencode()
        self._wall_ns += time.perf_counter_ns() - t0
        return self.outputs

    # -- strategies ---------------------------------------------------------

    def _reencode(self) -> None:
        g = len(self._buffer)
        if g < MIN_CHUNK_FRAMES:
            return
        feats = vgg_forward(self._buffer, self.params, self.cfg)
        outputs, _ = encoder_forward(feats, self.params, self.cfg)
        self._full_outputs = outputs
        cost = g * (2 if self.cfg.bidirectional else 1)
        self._frames_processed += cost
        self.chunk_log.append(ChunkRecord(0, g, outputs.shape[0], 0))

    def _encode_overlap(self) -> None:
        g = len(self._buffer)
        new = g - self._encoded_to
        if new <= 0:
            return
        chunk = self._buffer[self._offset:g]
        if len(chunk) < MIN_CHUNK_FRAMES:
            return  # wait for more frames; a closing tail this short is dropped
        overlap = _half(new)
        discard = 0 if self._closed else _quarter(overlap)
        feats = vgg_forward(chunk, self.params, self.cfg)
        total = feats.shape[0]
        kept = max(0, total - discard)
        if kept > 0:
            kept_feats = ad.Tensor(feats.data[:kept])
            outputs, state = encoder_forward(kept_feats, self.params, self.cfg,
                                             init=self._carried)
            self._carried = state
            self._blocks.append(outputs.data)
        self._frames_processed += len(chunk)
        self.chunk_log.append(ChunkRecord(self._offset, len(chunk), kept, total - kept))
        self._encoded_to = g
        self._offset = g - overlap
