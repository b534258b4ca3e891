"""Neural building blocks: convolutional front end, LSTM encoder, attention
decoder, parameter initialisation, and checkpoint serialisation.

The front end applies two convolution blocks, each halving the time and
feature axes, so T input frames become floor(floor(T/2)/2) encoder positions.
The unidirectional encoder is written one timestep at a time so that encoding
a sequence in chunks with carried state is bit-identical to encoding it in
one pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, InsufficientFramesError

CHECKPOINT_MAGIC = b"STRMST01"

# token ids reserved in every vocabulary
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_SPECIALS = 3


class Vocab:
    """Maps target symbols to dense ids above the reserved specials."""

    def __init__(self, symbols: str):
        if not symbols:
            raise ConfigError("vocabulary needs at least one symbol")
        if len(set(symbols)) != len(symbols):
            raise ConfigError("vocabulary symbols must be unique")
        self.symbols = symbols
        self._to_id = {ch: NUM_SPECIALS + i for i, ch in enumerate(symbols)}

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[ch] for ch in text]
        except KeyError as e:
            raise ConfigError("symbol %r not in vocabulary" % (e.args[0],)) from None

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if i < NUM_SPECIALS:
                continue
            if i >= self.size:
                raise ConfigError("token id %d outside vocabulary of size %d" % (i, self.size))
            out.append(self.symbols[i - NUM_SPECIALS])
        return "".join(out)


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    feat_dim: int = 16            # input features per frame
    vgg_channels: tuple = (4, 8)  # channels after each convolution block
    enc_layers: int = 2           # stacked encoder LSTM layers
    hidden: int = 32              # LSTM hidden size (per direction)
    bidirectional: bool = False   # bidirectional encoder reads the full input
    attn_dim: int = 32            # additive attention projection size
    embed_dim: int = 16           # target embedding size
    vocab: str = ""               # target symbols, specials excluded

    def __post_init__(self):
        if self.feat_dim < 4:
            raise ConfigError("feat_dim must be at least 4, got %d" % self.feat_dim)
        if len(self.vgg_channels) != 2 or any(c < 1 for c in self.vgg_channels):
            raise ConfigError("vgg_channels must be two positive values")
        if self.enc_layers < 1 or self.hidden < 1:
            raise ConfigError("enc_layers and hidden must be positive")
        if not self.vocab:
            raise ConfigError("vocab must not be empty")

    @property
    def pooled_feat(self) -> int:
        return (self.feat_dim // 2) // 2

    @property
    def frontend_out(self) -> int:
        # flattened features per encoder position
        return self.vgg_channels[1] * self.pooled_feat

    @property
    def enc_out(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + len(self.vocab)


@dataclass
class LstmState:
    """Per-layer (hidden, cell) pairs, each a (1, H) tensor."""

    layers: list  # list of (h, c) Tensor pairs

    @classmethod
    def zeros(cls, n_layers: int, hidden: int) -> "LstmState":
        return cls([(ad.Tensor(np.zeros((1, hidden), dtype=np.float32)),
                     ad.Tensor(np.zeros((1, hidden), dtype=np.float32)))
                    for _ in range(n_layers)])


class Parameters:
    """Named weight tensors in a fixed declaration order."""

    def __init__(self, named: list):
        self._named = list(named)
        self._by_name = {n: t for n, t in self._named}
        if len(self._by_name) != len(self._named):
            raise ConfigError("duplicate parameter name")

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._by_name[name]

    def __iter__(self):
        return iter(self._named)

    def __len__(self) -> int:
        return len(self._named)

    def names(self) -> list:
        return [n for n, _ in self._named]

    def zero_grads(self) -> None:
        for _, t in self._named:
            t.zero_grad()


def _parameter_shapes(cfg: ModelConfig) -> list:
    """Declaration-ordered (name, shape) list; serialisation follows it."""
    c0, c1 = cfg.vgg_channels
    h = cfg.hidden
    shapes = [
        ("vgg0_conv1_k", (c0, 1, 3, 3)), ("vgg0_conv1_b", (c0,)),
        ("vgg0_conv2_k", (c0, c0, 3, 3)), ("vgg0_conv2_b", (c0,)),
        ("vgg1_conv1_k", (c1, c0, 3, 3)), ("vgg1_conv1_b", (c1,)),
        ("vgg1_conv2_k", (c1, c1, 3, 3)), ("vgg1_conv2_b", (c1,)),
    ]
    directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    in_dim = cfg.frontend_out
    for layer in range(cfg.enc_layers):
        for d in directions:
            shapes += [
                ("enc%d_%s_wx" % (layer, d), (in_dim, 4 * h)),
                ("enc%d_%s_wh" % (layer, d), (h, 4 * h)),
                ("enc%d_%s_b" % (layer, d), (4 * h,)),
            ]
        in_dim = h * len(directions)
    enc_out = cfg.enc_out
    shapes += [
        ("dec0_wx", (cfg.embed_dim + enc_out, 4 * h)),
        ("dec0_wh", (h, 4 * h)), ("dec0_b", (4 * h,)),
        ("dec1_wx", (h, 4 * h)), ("dec1_wh", (h, 4 * h)), ("dec1_b", (4 * h,)),
        ("attn_enc", (enc_out, cfg.attn_dim)),
        ("attn_dec", (h, cfg.attn_dim)),
        ("attn_v", (cfg.attn_dim, 1)),
        ("out_w", (h + enc_out, cfg.vocab_size)),
        ("out_b", (cfg.vocab_size,)),
        ("embed", (cfg.vocab_size, cfg.embed_dim)),
    ]
    return shapes


def create_parameters(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """Uniform(-0.1, 0.1) init, then forget-gate biases pushed up by 1."""
    rng = np.random.default_rng(seed)
    named = []
    for name, shape in _parameter_shapes(cfg):
        data = rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
        named.append((name, ad.Tensor(data, requires_grad=True)))
    params = Parameters(named)
    h = cfg.hidden
    for name, t in params:
        if name.endswith("_b") and ("enc" in name or "dec" in name) and t.data.shape == (4 * h,):
            t.data[h:2 * h] += 1.0
    return params


# ---------------------------------------------------------------------------
# forward passes


def vgg_forward(frames, params: Parameters, cfg: ModelConfig) -> ad.Tensor:
    """Run the two-block convolutional front end over (T, D) frames.

    Returns (P, F) position features with P = floor(floor(T/2)/2).  Inputs
    shorter than 4 frames would produce no positions and are rejected.
    """
    x = frames if isinstance(frames, ad.Tensor) else ad.Tensor(frames)
    if x.data.ndim != 2:
        raise ContractError("frames must be (T, D), got %r" % (x.shape,))
    t_len, d = x.shape
    if d != cfg.feat_dim:
        raise ConfigError("frames have %d features, model expects %d" % (d, cfg.feat_dim))
    if t_len < 4:
        raise InsufficientFramesError(
            "%d frames produce no encoder positions (need at least 4)" % t_len)
    h = ad.reshape(x, (1, t_len, d))
    for b in range(2):
        h = ad.tanh(ad.conv2d(h, params["vgg%d_conv1_k" % b], params["vgg%d_conv1_b" % b]))
        h = ad.tanh(ad.conv2d(h, params["vgg%d_conv2_k" % b], params["vgg%d_conv2_b" % b]))
        h = ad.maxpool2d(h)
    return ad.channels_to_features(h)


def lstm_step(x: ad.Tensor, state, wx: ad.Tensor, wh: ad.Tensor, b: ad.Tensor):
    """One LSTM cell update.  state is an (h, c) pair; returns the new pair.

    Gate layout along the 4H axis is input, forget, cell, output.
    """
    h_prev, c_prev = state
    n = wh.shape[0]
    gates = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h_prev, wh)), b)
    i = ad.sigmoid(ad.slice_last(gates, 0, n))
    f = ad.sigmoid(ad.slice_last(gates, n, 2 * n))
    g = ad.tanh(ad.slice_last(gates, 2 * n, 3 * n))
    o = ad.sigmoid(ad.slice_last(gates, 3 * n, 4 * n))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def encoder_forward(feats: ad.Tensor, params: Parameters, cfg: ModelConfig,
                    init: LstmState | None = None):
    """Run the stacked encoder over (P, F) position features.

    Unidirectional mode threads carried state through every layer and returns
    the final state, so a later call on the following positions continues the
    sequence exactly.  Bidirectional mode reads the whole input in both
    directions, rejects carried state, and returns None for the state.
    """
    if cfg.bidirectional and init is not None:
        raise ConfigError("bidirectional encoder cannot resume from carried state")
    p_len = feats.shape[0]
    if p_len < 1:
        raise ContractError("encoder needs at least one position")
    seq = [ad.row(feats, p) for p in range(p_len)]
    final_layers = []
    for layer in range(cfg.enc_layers):
        if not cfg.bidirectional:
            state = (init.layers[layer] if init is not None
                     else LstmState.zeros(1, cfg.hidden).layers[0])
            wx, wh, b = (params["enc%d_fwd_wx" % layer], params["enc%d_fwd_wh" % layer],
                         params["enc%d_fwd_b" % layer])
            outs = []
            for x in seq:
                state = lstm_step(x, state, wx, wh, b)
                outs.append(state[0])
            seq = outs
            final_layers.append(state)
        else:
            fstate = LstmState.zeros(1, cfg.hidden).layers[0]
            bstate = LstmState.zeros(1, cfg.hidden).layers[0]
            fouts, bouts = [], []
            for x in seq:
                fstate = lstm_step(x, fstate, params["enc%d_fwd_wx" % layer],
                                   params["enc%d_fwd_wh" % layer], params["enc%d_fwd_b" % layer])
                fouts.append(fstate[0])
            for x in reversed(seq):
                bstate = lstm_step(x, bstate, params["enc%d_bwd_wx" % layer],
                                   params["enc%d_bwd_wh" % layer], params["enc%d_bwd_b" % layer])
                bouts.append(bstate[0])
            bouts.reverse()
            seq = [ad.concat_last(f, bk) for f, bk in zip(fouts, bouts)]
    outputs = ad.stack_rows(seq)
    return outputs, (None if cfg.bidirectional else LstmState(final_layers))


def encode_utterance(frames, params: Parameters, cfg: ModelConfig) -> ad.Tensor:
    """Front end plus encoder over a whole utterance, fresh state."""
    feats = vgg_forward(frames, params, cfg)
    outputs, _ = encoder_forward(feats, params, cfg)
    return outputs


def init_decoder_state(cfg: ModelConfig) -> LstmState:
    return LstmState.zeros(2, cfg.hidden)


def decode_step(prev_token: int, state: LstmState, enc_outputs: ad.Tensor,
                params: Parameters, cfg: ModelConfig):
    """One decoder step: attend over encoder outputs, advance both LSTM
    layers, and produce next-token logits.

    Returns (logits (1, V), new_state, attention weights (1, P)).
    """
    if enc_outputs.data.ndim != 2 or enc_outputs.shape[0] < 1:
        raise ContractError("decode_step needs non-empty encoder outputs, got %r"
                            % (enc_outputs.shape,))
    if not (0 <= prev_token < cfg.vocab_size):
        raise ContractError("token id %d outside vocabulary of size %d"
                            % (prev_token, cfg.vocab_size))
    emb = ad.row(params["embed"], prev_token)
    query = state.layers[1][0]  # top layer hidden drives attention
    scores = ad.matmul(ad.tanh(ad.add(ad.matmul(enc_outputs, params["attn_enc"]),
                                      ad.matmul(query, params["attn_dec"]))),
                       params["attn_v"])          # (P, 1)
    attn = ad.softmax(ad.transpose(scores))       # (1, P)
    context = ad.matmul(attn, enc_outputs)        # (1, enc_out)
    x = ad.concat_last(emb, context)
    s0 = lstm_step(x, state.layers[0], params["dec0_wx"], params["dec0_wh"], params["dec0_b"])
    s1 = lstm_step(s0[0], state.layers[1], params["dec1_wx"], params["dec1_wh"], params["dec1_b"])
    logits = ad.add(ad.matmul(ad.concat_last(s1[0], context), params["out_w"]), params["out_b"])
    return logits, LstmState([s0, s1]), attn


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, cfg: ModelConfig, params: Parameters) -> None:
    """Write config and weights; tensors follow the declaration order."""
    vocab_bytes = cfg.vocab.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<8I", cfg.feat_dim, cfg.vgg_channels[0], cfg.vgg_channels[1],
                            cfg.enc_layers, 1 if cfg.bidirectional else 0,
                            cfg.hidden, cfg.attn_dim, cfg.embed_dim))
        f.write(struct.pack("<I", len(vocab_bytes)))
        f.write(vocab_bytes)
        for _, tensor in params:
            f.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back; returns (config, parameters)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ConfigError("%s is not a model checkpoint (bad magic)" % (path,))
    off = 8
    try:
        fields = struct.unpack_from("<8I", blob, off)
        off += 32
        (vlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        vocab = blob[off:off + vlen].decode("utf-8")
        if len(blob[off:off + vlen]) != vlen:
            raise struct.error("short vocab block")
        off += vlen
    except struct.error:
        raise ConfigError("%s is truncated" % (path,)) from None
    cfg = ModelConfig(feat_dim=fields[0], vgg_channels=(fields[1], fields[2]),
                      enc_layers=fields[3], bidirectional=bool(fields[4]),
                      hidden=fields[5], attn_dim=fields[6], embed_dim=fields[7],
                      vocab=vocab)
    named = []
    for name, shape in _parameter_shapes(cfg):
        n = int(np.prod(shape))
        chunk = blob[off:off + 4 * n]
        if len(chunk) != 4 * n:
            raise ConfigError("%s is truncated at tensor %s" % (path, name))
        data = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        named.append((name, ad.Tensor(data, requires_grad=True)))
        off += 4 * n
    if off != len(blob):
        raise ConfigError("%s has %d trailing bytes" % (path, len(blob) - off))
    return cfg, Parameters(named)
