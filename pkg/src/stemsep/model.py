"""Dual-domain U-Net separator.

A temporal branch of strided 1-d convolutions runs next to a spectral
branch applying the same recipe along the frequency axis of an aligned
STFT; the two meet at depth D where frames equal time steps, share the
innermost compressed residual branches and a final encoder/decoder pair,
and split again into mirrored decoders whose outputs (waveform + inverse
STFT) sum into the per-source estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import dsp
from .tensor import (
    LstmDirParams,
    LstmParams,
    Param,
    ShapeError,
    Tensor,
    bilstm,
    channel_scale,
    concat,
    conv1d,
    conv1d_transposed,
    conv_out_len,
    expand,
    gelu,
    glu,
    group_norm,
    layer_norm,
    linear,
    matmul,
    narrow,
    no_grad,
    outer_scale,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sum_,
    transpose,
)
from .tensor.checkpoint import load_params, save_params

FREQ_EMB_SCALE = 0.2
BETA_BIAS_INIT = -10.0  # sigmoid(-10) ~ 4.5e-5, well under 1e-4

SPEC_MODES = ("cac", "mask_wiener")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 5
    base_channels: int = 48
    growth: int = 2
    kernel: int = 8
    stride: int = 4
    n_fft: int = 0  # derived: 4 * stride**depth when left at 0
    hop: int = 0  # derived: stride**depth when left at 0
    sources: tuple = ("drums", "bass", "other", "vocals")
    audio_channels: int = 2
    heads: int = 4
    lstm_span: int = 200
    lstm_stride: int = 100
    layerscale_init: float = 1e-3
    spec_mode: str = "cac"
    norm_groups: int = 4
    context_layers: tuple = ()  # derived: (depth, depth + 1)
    resample_input: bool = False

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not self.hop:
            self.hop = self.stride**self.depth
        if not self.n_fft:
            self.n_fft = 4 * self.hop
        if not self.context_layers:
            self.context_layers = (self.depth, self.depth + 1)
        self.context_layers = tuple(sorted(set(int(c) for c in self.context_layers)))
        self.validate()

    def validate(self):
        bad = []
        if self.depth < 2:
            bad.append(f"depth >= 2 (got {self.depth})")
        if self.hop != self.stride**self.depth:
            bad.append(f"hop == stride**depth ({self.hop} != {self.stride ** self.depth})")
        if self.n_fft != 4 * self.hop:
            bad.append(f"n_fft == 4*hop ({self.n_fft} != {4 * self.hop})")
        if (self.kernel - self.stride) % 2:
            bad.append(f"(kernel - stride) even (got {self.kernel}-{self.stride})")
        if self.growth != 2:
            bad.append(f"growth == 2 (got {self.growth})")
        if not self.sources:
            bad.append("at least one source")
        if self.audio_channels < 1:
            bad.append(f"audio_channels >= 1 (got {self.audio_channels})")
        if self.lstm_stride > self.lstm_span:
            bad.append(f"lstm_stride <= lstm_span ({self.lstm_stride} > {self.lstm_span})")
        if self.spec_mode not in SPEC_MODES:
            bad.append(f"spec_mode in {SPEC_MODES} (got {self.spec_mode!r})")
        for l in self.context_layers:
            ch = self.channels(l)
            hidden = max(1, ch // 4)
            if hidden % self.heads:
                bad.append(f"heads ({self.heads}) divide branch width {hidden} at layer {l}")
        for l in (self.depth, self.depth + 1):
            for width in (self.channels(l), 2 * self.channels(l)):
                if width % self.norm_groups:
                    bad.append(f"norm_groups ({self.norm_groups}) divide width {width} at layer {l}")
        dec_out = self.channels(self.depth - 1)
        if dec_out % self.norm_groups:
            bad.append(f"norm_groups ({self.norm_groups}) divide decoder width {dec_out}")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))

    def channels(self, layer):
        """Output channels of encoder layer `layer` (1-based; depth+1 = shared)."""
        return self.base_channels * self.growth ** (layer - 1)

    @property
    def freq_bins(self):
        return self.n_fft // 2

    @property
    def conv_pad(self):
        return (self.kernel - self.stride) // 2


# -- parameter records --------------------------------------------------------


@dataclass
class ConvP:
    w: Tensor
    b: Tensor


@dataclass
class NormP:
    gamma: Tensor
    beta: Tensor


@dataclass
class AttnP:
    q: ConvP
    k: ConvP
    v: ConvP
    beta: ConvP
    out: ConvP
    heads: int


@dataclass
class ChunkP:
    lstm: LstmParams
    proj_w: Tensor
    proj_b: Tensor
    span: int
    stride: int


@dataclass
class BranchP:
    conv_in: ConvP
    ln1: NormP
    chunk: ChunkP | None
    attn: AttnP | None
    conv_out: ConvP
    ln2: NormP
    scale: Tensor
    dilation: int


@dataclass
class EncLayerP:
    conv: ConvP
    gn1: NormP | None
    branches: list
    rewrite: ConvP | None
    gn2: NormP | None


@dataclass
class DecLayerP:
    rewrite: ConvP
    gn1: NormP | None
    tconv: ConvP
    gn2: NormP | None
    last: bool  # outermost layer: no activation after tconv


@dataclass
class HybridModel:
    cfg: ModelConfig
    dtype: object
    params: dict
    t_enc: list
    z_enc: list
    mid: EncLayerP  # shared post-merge branches + rewrite (conv unused)
    shared_enc: EncLayerP
    shared_dec: DecLayerP
    t_dec: list
    z_dec: list
    freq_emb: Tensor

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.zero_grad()

    def param_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def group_norm_layers(self):
        """Encoder/decoder layer indices that carry group normalization."""
        out = set()
        for l, rec in enumerate(self.t_enc + self.z_enc, start=0):
            pass  # see explicit walk below
        for l, rec in enumerate(self.t_enc, start=1):
            if rec.gn1 is not None or rec.gn2 is not None:
                out.add(l)
        for l, rec in enumerate(self.z_enc, start=1):
            if rec.gn1 is not None or rec.gn2 is not None:
                out.add(l)
        if self.mid.gn2 is not None:
            out.add(self.cfg.depth)
        if self.shared_enc.gn1 is not None or self.shared_enc.gn2 is not None:
            out.add(self.cfg.depth + 1)
        if self.shared_dec.gn1 is not None or self.shared_dec.gn2 is not None:
            out.add(self.cfg.depth + 1)
        for l, rec in enumerate(self.t_dec, start=1):
            if rec.gn1 is not None or rec.gn2 is not None:
                out.add(l)
        for l, rec in enumerate(self.z_dec, start=1):
            if rec.gn1 is not None or rec.gn2 is not None:
                out.add(l)
        return sorted(out)


class _Store:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = {}

    def add(self, name, array):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = Param(name, t)
        return t

    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(max(1, fan_in))
        return self.rng.uniform(-bound, bound, shape)

    def conv(self, name, c_out, c_in, k):
        fan = c_in * k
        return ConvP(
            self.add(f"{name}.w", self._uniform((c_out, c_in, k), fan)),
            self.add(f"{name}.b", self._uniform((c_out,), fan)),
        )

    def tconv(self, name, c_in, c_out, k):
        fan = c_in * k
        return ConvP(
            self.add(f"{name}.w", self._uniform((c_in, c_out, k), fan)),
            self.add(f"{name}.b", self._uniform((c_out,), fan)),
        )

    def zero_conv(self, name, c_out, c_in, bias_value):
        return ConvP(
            self.add(f"{name}.w", np.zeros((c_out, c_in, 1))),
            self.add(f"{name}.b", np.full((c_out,), bias_value)),
        )

    def norm(self, name, c):
        return NormP(self.add(f"{name}.g", np.ones(c)), self.add(f"{name}.b", np.zeros(c)))

    def lstm(self, name, d_in, hidden, layers):
        recs = []
        for li in range(layers):
            din = d_in if li == 0 else 2 * hidden
            dirs = []
            for tag in ("fw", "bw"):
                prefix = f"{name}.l{li}.{tag}"
                bound_fan = hidden
                dirs.append(
                    LstmDirParams(
                        self.add(f"{prefix}.wih", self._uniform((4 * hidden, din), bound_fan)),
                        self.add(f"{prefix}.whh", self._uniform((4 * hidden, hidden), bound_fan)),
                        self.add(f"{prefix}.b", self._uniform((4 * hidden,), bound_fan)),
                    )
                )
            recs.append(tuple(dirs))
        return LstmParams(recs)

    def branch(self, name, c, dilation, with_context, cfg):
        hidden = max(1, c // 4)
        chunk = None
        attn = None
        if with_context:
            lstm = self.lstm(f"{name}.lstm", hidden, hidden, 2)
            chunk = ChunkP(
                lstm,
                self.add(f"{name}.lstm.proj.w", self._uniform((hidden, 2 * hidden), 2 * hidden)),
                self.add(f"{name}.lstm.proj.b", self._uniform((hidden,), 2 * hidden)),
                cfg.lstm_span,
                cfg.lstm_stride,
            )
            attn = AttnP(
                self.conv(f"{name}.attn.q", hidden, hidden, 1),
                self.conv(f"{name}.attn.k", hidden, hidden, 1),
                self.conv(f"{name}.attn.v", hidden, hidden, 1),
                self.zero_conv(f"{name}.attn.beta", 4 * cfg.heads, hidden, BETA_BIAS_INIT),
                self.conv(f"{name}.attn.out", hidden, hidden, 1),
                cfg.heads,
            )
        return BranchP(
            self.conv(f"{name}.cin", hidden, c, 3),
            self.norm(f"{name}.ln1", hidden),
            chunk,
            attn,
            self.conv(f"{name}.cout", 2 * c, hidden, 1),
            self.norm(f"{name}.ln2", 2 * c),
            self.add(f"{name}.scale", np.full(c, cfg.layerscale_init)),
            dilation,
        )


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> HybridModel:
    """Deterministically initialize the full parameter set from `seed`."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    st = _Store(rng, dtype)
    D = cfg.depth
    K, S = cfg.kernel, cfg.stride

    def enc_layer(prefix, l, c_in, spectral):
        c = cfg.channels(l)
        inner = l == D
        conv = st.conv(f"{prefix}.conv", c, c_in, K)
        gn1 = st.norm(f"{prefix}.gn1", c) if l >= D else None
        branches = []
        rewrite = None
        gn2 = None
        if not inner:
            branches = [
                st.branch(f"{prefix}.br{i}", c, dil, l in cfg.context_layers, cfg)
                for i, dil in enumerate((1, 2))
            ]
            rewrite = st.conv(f"{prefix}.rw", 2 * c, c, 1)
            gn2 = st.norm(f"{prefix}.gn2", 2 * c) if l >= D else None
        return EncLayerP(conv, gn1, branches, rewrite, gn2)

    t_enc = []
    z_enc = []
    for l in range(1, D + 1):
        c_in_t = cfg.audio_channels if l == 1 else cfg.channels(l - 1)
        c_in_z = 2 * cfg.audio_channels if l == 1 else cfg.channels(l - 1)
        t_enc.append(enc_layer(f"tenc.{l}", l, c_in_t, False))
        z_enc.append(enc_layer(f"zenc.{l}", l, c_in_z, True))

    c_d = cfg.channels(D)
    mid = EncLayerP(
        conv=None,
        gn1=None,
        branches=[
            st.branch(f"mid.br{i}", c_d, dil, D in cfg.context_layers, cfg)
            for i, dil in enumerate((1, 2))
        ],
        rewrite=st.conv("mid.rw", 2 * c_d, c_d, 1),
        gn2=st.norm("mid.gn2", 2 * c_d),
    )

    c6 = cfg.channels(D + 1)
    shared_enc = EncLayerP(
        conv=st.conv("senc.conv", c6, c_d, 4),
        gn1=st.norm("senc.gn1", c6),
        branches=[
            st.branch(f"senc.br{i}", c6, dil, (D + 1) in cfg.context_layers, cfg)
            for i, dil in enumerate((1, 2))
        ],
        rewrite=st.conv("senc.rw", 2 * c6, c6, 1),
        gn2=st.norm("senc.gn2", 2 * c6),
    )
    shared_dec = DecLayerP(
        rewrite=st.conv("sdec.rw", 2 * c6, c6, 1),
        gn1=st.norm("sdec.gn1", 2 * c6),
        tconv=st.tconv("sdec.tconv", c6, c_d, 4),
        gn2=st.norm("sdec.gn2", c_d),
        last=False,
    )

    n_src = len(cfg.sources)

    def dec_layer(prefix, l, spectral):
        c = cfg.channels(l)
        if l == 1:
            c_out = n_src * cfg.audio_channels * (2 if spectral and cfg.spec_mode == "cac" else 1)
        else:
            c_out = cfg.channels(l - 1)
        inner = l == D
        return DecLayerP(
            rewrite=st.conv(f"{prefix}.rw", 2 * c, c, 1),
            gn1=st.norm(f"{prefix}.gn1", 2 * c) if inner else None,
            tconv=st.tconv(f"{prefix}.tconv", c, c_out, K),
            gn2=st.norm(f"{prefix}.gn2", c_out) if inner else None,
            last=l == 1,
        )

    t_dec = [dec_layer(f"tdec.{l}", l, False) for l in range(1, D + 1)]
    z_dec = [dec_layer(f"zdec.{l}", l, True) for l in range(1, D + 1)]

    f1 = cfg.freq_bins // S
    emb = rng.standard_normal((f1, cfg.base_channels))
    kern = np.ones(7) / 7.0
    emb = np.stack([np.convolve(emb[:, c], kern, mode="same") for c in range(emb.shape[1])], axis=1)
    freq_emb = st.add("femb.table", emb)

    return HybridModel(
        cfg=cfg,
        dtype=dtype,
        params=st.params,
        t_enc=t_enc,
        z_enc=z_enc,
        mid=mid,
        shared_enc=shared_enc,
        shared_dec=shared_dec,
        t_dec=t_dec,
        z_dec=z_dec,
        freq_emb=freq_emb,
    )


# -- shape planning ------------------------------------------------------------


@dataclass
class ShapeLedger:
    """Per-layer (time, freq, channels) bookkeeping for both branches."""

    length: int
    t_steps: list
    t_channels: list
    z_frames: int
    z_bins: list
    z_channels: list
    shared_steps: int
    shared_channels: int

    def rows(self):
        yield ("input.t", self.t_steps[0], None, self.t_channels[0])
        yield ("input.z", self.z_frames, self.z_bins[0], self.z_channels[0])
        for l in range(1, len(self.t_steps)):
            yield (f"tenc.{l}", self.t_steps[l], None, self.t_channels[l])
        for l in range(1, len(self.z_bins)):
            yield (f"zenc.{l}", self.z_frames, self.z_bins[l], self.z_channels[l])
        yield ("shared", self.shared_steps, None, self.shared_channels)


def shape_plan(cfg: ModelConfig, L: int) -> ShapeLedger:
    """Predict every activation shape for an input of L samples (hop multiple)."""
    if L % cfg.hop:
        raise ShapeError(f"shape_plan: length {L} not a multiple of hop {cfg.hop}")
    D, S = cfg.depth, cfg.stride
    t_steps = [L]
    t_channels = [cfg.audio_channels]
    for l in range(1, D + 1):
        t_steps.append(t_steps[-1] // S)
        t_channels.append(cfg.channels(l))
    z_bins = [cfg.freq_bins]
    z_channels = [2 * cfg.audio_channels]
    for l in range(1, D + 1):
        z_bins.append(z_bins[-1] // (S if l < D else 2 * S))
        z_channels.append(cfg.channels(l))
    shared = conv_out_len(t_steps[D], 4, 2, 1)
    return ShapeLedger(
        length=L,
        t_steps=t_steps,
        t_channels=t_channels,
        z_frames=L // cfg.hop,
        z_bins=z_bins,
        z_channels=z_channels,
        shared_steps=shared,
        shared_channels=cfg.channels(D + 1),
    )


# -- forward pieces -------------------------------------------------------------


def local_attention(x: Tensor, attn: AttnP) -> Tensor:
    """Distance-penalized softmax attention over time.

    x: [B, C, T]. Per-head weights softmax(q_i . k_j - sum_k k*beta_{i,k}|i-j|)
    where beta is a sigmoid of a learned per-position projection. Returns the
    projected attention output; the caller wires any residual connection.
    """
    B, C, T = x.shape
    H = attn.heads
    if C % H:
        raise ShapeError(f"local_attention: channels {C} not divisible by heads {H}")
    d = C // H
    q = conv1d(x, attn.q.w, attn.q.b)
    k = conv1d(x, attn.k.w, attn.k.b)
    v = conv1d(x, attn.v.w, attn.v.b)
    bpre = conv1d(x, attn.beta.w, attn.beta.b)  # [B, 4H, T]
    beta = sigmoid(bpre)
    beta = reshape(beta, (B, H, 4, T))
    kw = np.arange(1, 5, dtype=x.dtype)
    beta = channel_scale(beta, kw, axis=2)
    bsum = sum_(beta, axis=2)  # [B, H, T]

    q2 = reshape(q, (B * H, d, T))
    k2 = reshape(k, (B * H, d, T))
    v2 = reshape(v, (B * H, d, T))
    logits = matmul(transpose(q2, (0, 2, 1)), k2)  # [BH, T, T]
    idx = np.arange(T, dtype=x.dtype)
    dist = np.abs(idx[:, None] - idx[None, :])
    pen = outer_scale(reshape(bsum, (B * H, T)), dist)
    w = softmax(logits - pen, axis=2)
    out = matmul(w, transpose(v2, (0, 2, 1)))  # [BH, T, d]
    out = reshape(transpose(out, (0, 2, 1)), (B, C, T))
    return conv1d(out, attn.out.w, attn.out.b)


def attention_weights(x: Tensor, attn: AttnP):
    """The [B*H, T, T] softmax rows, for inspection and tests."""
    B, C, T = x.shape
    H = attn.heads
    d = C // H
    q = conv1d(x, attn.q.w, attn.q.b)
    k = conv1d(x, attn.k.w, attn.k.b)
    bpre = conv1d(x, attn.beta.w, attn.beta.b)
    beta = reshape(sigmoid(bpre), (B, H, 4, T))
    beta = channel_scale(beta, np.arange(1, 5, dtype=x.dtype), axis=2)
    bsum = sum_(beta, axis=2)
    q2 = reshape(q, (B * H, d, T))
    k2 = reshape(k, (B * H, d, T))
    logits = matmul(transpose(q2, (0, 2, 1)), k2)
    idx = np.arange(T, dtype=x.dtype)
    dist = np.abs(idx[:, None] - idx[None, :])
    pen = outer_scale(reshape(bsum, (B * H, T)), dist)
    return softmax(logits - pen, axis=2)


def chunk_frames(T, span, stride):
    """Frame [start, end) list covering [0, T): starts at stride multiples."""
    if T <= span:
        return [(0, T)]
    frames = []
    start = 0
    while start < T:
        frames.append((start, min(start + span, T)))
        if start + span >= T:
            break
        start += stride
    return frames


def chunk_choice(T, frames):
    """For each t, the frame index maximizing distance to the frame edge."""
    dist = np.full((len(frames), T), -1, dtype=np.int64)
    t = np.arange(T)
    for f, (s, e) in enumerate(frames):
        inside = (t >= s) & (t < e)
        dist[f, inside] = np.minimum(t[inside] - s, e - 1 - t[inside])
    return np.argmax(dist, axis=0)


def chunked_bilstm(x: Tensor, chunk: ChunkP) -> Tensor:
    """Span-limited BiLSTM with skip connection.

    x: [B, C, T]. The input is split into frames of `span` steps every
    `stride` steps; each frame runs an independent 2-layer BiLSTM and each
    output step comes from the frame it is deepest inside. A linear layer
    maps 2H back to C before the skip sum.
    """
    B, C, T = x.shape
    xt = transpose(x, (0, 2, 1))  # [B, T, C]
    frames = chunk_frames(T, chunk.span, chunk.stride)
    outs = []
    by_len = {}
    for f, (s, e) in enumerate(frames):
        by_len.setdefault(e - s, []).append(f)
    frame_out = [None] * len(frames)
    for length, fidx in by_len.items():
        batch = concat([narrow(xt, 1, frames[f][0], length) for f in fidx], axis=0)
        y = bilstm(batch, chunk.lstm)  # [len(fidx)*B, length, 2H]
        for j, f in enumerate(fidx):
            frame_out[f] = narrow(y, 0, j * B, B)
    choice = chunk_choice(T, frames)
    pieces = []
    t0 = 0
    for t in range(1, T + 1):
        if t == T or choice[t] != choice[t0]:
            f = choice[t0]
            s = frames[f][0]
            pieces.append(narrow(frame_out[f], 1, t0 - s, t - t0))
            t0 = t
    y = concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    y = linear(y, chunk.proj_w, chunk.proj_b)  # [B, T, C]
    return x + transpose(y, (0, 2, 1))


def apply_freq_embedding(x: Tensor, table: Tensor, scale: float = FREQ_EMB_SCALE) -> Tensor:
    """Add a per-frequency learned embedding: x[c,f,n] + scale*table[f,c]."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, C, F, N = x.shape
    if table.shape != (F, C):
        raise ShapeError(f"apply_freq_embedding: table {table.shape} does not match (F={F}, C={C})")
    emb = reshape(transpose(table, (1, 0)), (1, C, F, 1))
    out = x + expand(emb * scale, (B, C, F, N))
    return reshape(out, out.shape[1:]) if squeeze else out


def residual_branch(x: Tensor, br: BranchP) -> Tensor:
    """Compressed residual branch: dilated conv down to C/4, optional
    context (chunked BiLSTM + local attention), 1x1 back up to 2C, GLU,
    LayerScale, summed with the input. x: [B, C, T]."""
    h = conv1d(x, br.conv_in.w, br.conv_in.b, stride=1, dilation=br.dilation, pad=br.dilation)
    h = layer_norm(h, 1, br.ln1.gamma, br.ln1.beta)
    h = gelu(h)
    if br.chunk is not None:
        h = chunked_bilstm(h, br.chunk)
    if br.attn is not None:
        h = h + local_attention(h, br.attn)
    h = conv1d(h, br.conv_out.w, br.conv_out.b)
    h = layer_norm(h, 1, br.ln2.gamma, br.ln2.beta)
    h = glu(h, axis=1)
    h = channel_scale(h, br.scale, axis=1)
    return x + h


def _branches_time(x, rec, groups):
    for br in rec.branches:
        x = residual_branch(x, br)
    return x


def _rewrite(x, rec, groups):
    y = conv1d(x, rec.rewrite.w, rec.rewrite.b)
    if rec.gn2 is not None:
        y = group_norm(y, groups, rec.gn2.gamma, rec.gn2.beta, channel_axis=1)
    return glu(y, axis=1)


def _spec_fold_freq(x):
    """[B, C, F, N] -> [B*F, C, N] so branches run along time per bin."""
    B, C, F, N = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B * F, C, N)), (B, C, F, N)


def _spec_unfold_freq(x, dims):
    B, C, F, N = dims
    return transpose(reshape(x, (B, F, C, N)), (0, 2, 1, 3))


def _spec_conv(x, conv, stride, pad, transposed=False):
    """Frequency-axis convolution: fold frames into the batch."""
    B, C, F, N = x.shape
    xf = reshape(transpose(x, (0, 3, 1, 2)), (B * N, C, F))
    if transposed:
        y = conv1d_transposed(xf, conv.w, conv.b, stride=stride, pad=pad)
    else:
        y = conv1d(xf, conv.w, conv.b, stride=stride, pad=pad)
    C2, F2 = y.shape[1], y.shape[2]
    return transpose(reshape(y, (B, N, C2, F2)), (0, 2, 3, 1))


def _net_forward(model: HybridModel, x: Tensor, shapes=None):
    """Core differentiable forward: x [B, Ca, L] -> [B, S, Ca, L].

    L must be a multiple of 2*hop (callers pad; see forward_separate).
    """
    cfg = model.cfg
    B, Ca, L = x.shape
    if Ca != cfg.audio_channels:
        raise ShapeError(f"forward: input has {Ca} channels, model expects {cfg.audio_channels}")
    if L % (2 * cfg.hop):
        raise ShapeError(f"forward: padded length {L} must be a multiple of 2*hop ({2 * cfg.hop})")
    D, S, K, P = cfg.depth, cfg.stride, cfg.kernel, cfg.conv_pad
    G = cfg.norm_groups

    z_cac = dsp.stft_cac(x, cfg.n_fft, cfg.hop)  # [B, 2Ca, F0, N]
    N = z_cac.shape[3]

    # encoders
    t = x
    z = z_cac
    t_skips, z_skips = [], []
    for l in range(1, D + 1):
        trec, zrec = model.t_enc[l - 1], model.z_enc[l - 1]
        t = conv1d(t, trec.conv.w, trec.conv.b, stride=S, pad=P)
        if trec.gn1 is not None:
            t = group_norm(t, G, trec.gn1.gamma, trec.gn1.beta, channel_axis=1)
        t = gelu(t)
        if l < D:
            t = _branches_time(t, trec, G)
            t = _rewrite(t, trec, G)
        t_skips.append(t)

        if l == 2:
            z = apply_freq_embedding(z, model.freq_emb)
        z = _spec_conv(z, zrec.conv, stride=S, pad=P if l < D else 0)
        if zrec.gn1 is not None:
            z = group_norm(z, G, zrec.gn1.gamma, zrec.gn1.beta, channel_axis=1)
        z = gelu(z)
        if l < D:
            zf, dims = _spec_fold_freq(z)
            zf = _branches_time(zf, zrec, G)
            zf = _rewrite(zf, zrec, G)
            dims = (dims[0], zf.shape[1], dims[2], dims[3])
            z = _spec_unfold_freq(zf, dims)
        z_skips.append(z)
        if shapes is not None:
            shapes.append(("t", l, t.shape[2], None, t.shape[1]))
            shapes.append(("z", l, z.shape[3], z.shape[2], z.shape[1]))

    if z.shape[2] != 1:
        raise ShapeError(f"forward: spectral branch reached {z.shape[2]} bins at depth {D}, expected 1")
    z_flat = reshape(z, (B, z.shape[1], N))
    if t.shape[2] != N:
        raise ShapeError(f"forward: temporal steps {t.shape[2]} != spectral frames {N} at merge")
    m = t + z_flat

    # shared innermost-layer tail, then the shared encoder/decoder pair
    m = _branches_time(m, model.mid, G)
    m = _rewrite(m, model.mid, G)

    se = model.shared_enc
    e6 = conv1d(m, se.conv.w, se.conv.b, stride=2, pad=1)
    e6 = group_norm(e6, G, se.gn1.gamma, se.gn1.beta, channel_axis=1)
    e6 = gelu(e6)
    e6 = _branches_time(e6, se, G)
    e6 = _rewrite(e6, se, G)
    if shapes is not None:
        shapes.append(("shared", D + 1, e6.shape[2], None, e6.shape[1]))

    sd = model.shared_dec
    d6 = conv1d(e6, sd.rewrite.w, sd.rewrite.b)
    d6 = group_norm(d6, G, sd.gn1.gamma, sd.gn1.beta, channel_axis=1)
    d6 = glu(d6, axis=1)
    d6 = conv1d_transposed(d6, sd.tconv.w, sd.tconv.b, stride=2, pad=1)
    d6 = group_norm(d6, G, sd.gn2.gamma, sd.gn2.beta, channel_axis=1)
    d6 = gelu(d6)

    # temporal decoder
    h = d6
    for l in range(D, 0, -1):
        rec = model.t_dec[l - 1]
        h = h + t_skips[l - 1]
        h = conv1d(h, rec.rewrite.w, rec.rewrite.b)
        if rec.gn1 is not None:
            h = group_norm(h, G, rec.gn1.gamma, rec.gn1.beta, channel_axis=1)
        h = glu(h, axis=1)
        h = conv1d_transposed(h, rec.tconv.w, rec.tconv.b, stride=S, pad=P)
        if rec.gn2 is not None:
            h = group_norm(h, G, rec.gn2.gamma, rec.gn2.beta, channel_axis=1)
        if not rec.last:
            h = gelu(h)
    t_out = h  # [B, S*Ca, L]

    # spectral decoder
    zh = reshape(d6, (B, d6.shape[1], 1, N))
    for l in range(D, 0, -1):
        rec = model.z_dec[l - 1]
        zh = zh + z_skips[l - 1]
        Bz, Cz, Fz, Nz = zh.shape
        zf = reshape(transpose(zh, (0, 3, 1, 2)), (Bz * Nz, Cz, Fz))
        zf = conv1d(zf, rec.rewrite.w, rec.rewrite.b)
        if rec.gn1 is not None:
            zf = group_norm(zf, G, rec.gn1.gamma, rec.gn1.beta, channel_axis=1)
        zf = glu(zf, axis=1)
        zf = conv1d_transposed(zf, rec.tconv.w, rec.tconv.b, stride=S, pad=P if l < D else 0)
        if rec.gn2 is not None:
            zf = group_norm(zf, G, rec.gn2.gamma, rec.gn2.beta, channel_axis=1)
        if not rec.last:
            zf = gelu(zf)
        zh = transpose(reshape(zf, (Bz, Nz, zf.shape[1], zf.shape[2])), (0, 2, 3, 1))

    n_src = len(cfg.sources)
    F0 = cfg.freq_bins
    if cfg.spec_mode == "cac":
        z_wave = dsp.istft_cac(zh, cfg.n_fft, cfg.hop, L)  # [B, S*Ca, L]
        mags = None
    else:
        mags = softplus(zh)  # [B, S*Ca, F0, N]
        v = reshape(mags * mags, (B, n_src, Ca, F0, N))
        den = sum_(v, axis=1, keepdims=True) + dsp.WIENER_EPS
        masks = (v + dsp.WIENER_EPS / n_src) / expand(den, v.shape)
        mix = reshape(z_cac, (B, Ca, 2, F0, N))
        mre = expand(reshape(narrow(mix, 2, 0, 1), (B, 1, Ca, F0, N)), v.shape)
        mim = expand(reshape(narrow(mix, 2, 1, 1), (B, 1, Ca, F0, N)), v.shape)
        est_re = reshape(masks * mre, (B, n_src, Ca, 1, F0, N))
        est_im = reshape(masks * mim, (B, n_src, Ca, 1, F0, N))
        est = reshape(concat([est_re, est_im], axis=3), (B, n_src * Ca * 2, F0, N))
        z_wave = dsp.istft_cac(est, cfg.n_fft, cfg.hop, L)

    out = t_out + z_wave
    out = reshape(out, (B, n_src, Ca, L))
    return (out, mags) if cfg.spec_mode == "mask_wiener" else (out, None)


# -- public separation API -------------------------------------------------------


def _pad_input(model, mix: dsp.AudioBuffer):
    cfg = model.cfg
    if mix.channels != cfg.audio_channels:
        raise ShapeError(f"separate: input has {mix.channels} channels, model expects {cfg.audio_channels}")
    samples = mix.samples.astype(model.dtype, copy=False)
    L0 = samples.shape[1]
    unit = 2 * cfg.hop
    target = max(unit, ((L0 + unit - 1) // unit) * unit)
    if target != L0:
        padded = np.zeros((cfg.audio_channels, target), dtype=model.dtype)
        padded[:, :L0] = samples
        samples = padded
    return samples, L0


def forward_separate(model: HybridModel, mix: dsp.AudioBuffer):
    """Separate a mixture into per-source AudioBuffers (complex-spectrum mode)."""
    if model.cfg.spec_mode != "cac":
        raise ValueError("forward_separate requires spec_mode='cac'; use forward_separate_wiener")
    samples, L0 = _pad_input(model, mix)
    with no_grad():
        out, _ = _net_forward(model, Tensor(samples[None]))
    est = out.data[0][:, :, :L0]
    return {name: dsp.AudioBuffer(est[i], mix.sample_rate) for i, name in enumerate(model.cfg.sources)}


def forward_separate_wiener(model: HybridModel, mix: dsp.AudioBuffer, iterations: int = 1):
    """Separate via magnitude heads + Wiener filtering (mask mode)."""
    cfg = model.cfg
    if cfg.spec_mode != "mask_wiener":
        raise ValueError("forward_separate_wiener requires spec_mode='mask_wiener'")
    samples, L0 = _pad_input(model, mix)
    with no_grad():
        out, mags = _net_forward(model, Tensor(samples[None]))
    if iterations == 0:
        est = out.data[0][:, :, :L0]
    else:
        n_src, Ca = len(cfg.sources), cfg.audio_channels
        mix_spec = dsp.ComplexSpec(
            dsp._stft_np(samples.astype(np.float64), cfg.n_fft, cfg.hop), cfg.n_fft, cfg.hop
        )
        mag = mags.data[0].reshape(n_src, Ca, cfg.freq_bins, -1)
        specs = dsp.wiener_filter(mag, mix_spec, iterations)
        L = samples.shape[1]
        z_parts = np.stack([dsp._istft_np(s.bins, cfg.n_fft, cfg.hop, L) for s in specs])
        # replace the in-graph soft-mask spectral part with the refined one
        mask0 = dsp.wiener_filter(mag, mix_spec, 0)
        z0 = np.stack([dsp._istft_np(s.bins, cfg.n_fft, cfg.hop, L) for s in mask0])
        est_full = out.data[0] - z0.astype(model.dtype) + z_parts.astype(model.dtype)
        est = est_full[:, :, :L0]
    return {name: dsp.AudioBuffer(est[i], mix.sample_rate) for i, name in enumerate(cfg.sources)}


def separate_batch(model: HybridModel, batch: Tensor):
    """Differentiable batched forward: [B, Ca, L] -> [B, S, Ca, L]."""
    out, _ = _net_forward(model, batch)
    return out


# -- persistence ------------------------------------------------------------------


def _cfg_to_lines(cfg: ModelConfig):
    lines = []
    for f in dc_fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(e) for e in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _cfg_from_lines(text: str) -> ModelConfig:
    raw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        raw[key.strip()] = val.strip()
    known = {f.name: f for f in dc_fields(ModelConfig)}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown model config key {key!r}")
        if key == "sources":
            kwargs[key] = tuple(s for s in val.split(",") if s)
        elif key == "context_layers":
            kwargs[key] = tuple(int(s) for s in val.split(",") if s)
        elif key == "resample_input":
            kwargs[key] = val.lower() in ("1", "true", "yes")
        elif key in ("layerscale_init",):
            kwargs[key] = float(val)
        elif key == "spec_mode":
            kwargs[key] = val
        else:
            kwargs[key] = int(val)
    return ModelConfig(**kwargs)


def save_model(model: HybridModel, path):
    """Write the HSEP parameter container plus a `<path>.cfg` sidecar."""
    save_params(path, model.param_arrays())
    with open(f"{path}.cfg", "w", encoding="utf-8") as fh:
        fh.write(_cfg_to_lines(model.cfg))


def load_model(path) -> HybridModel:
    """Rebuild a model from a container + sidecar pair."""
    with open(f"{path}.cfg", encoding="utf-8") as fh:
        cfg = _cfg_from_lines(fh.read())
    arrays = load_params(path)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    model = build_model(cfg, seed=0, dtype=dtype)
    missing = set(model.params) - set(arrays)
    extra = set(arrays) - set(model.params)
    if missing or extra:
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, arr in arrays.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise ConfigError(f"checkpoint {name}: shape {arr.shape} != model {p.data.shape}")
        p.tensor.data = arr.astype(dtype, copy=False)
        p.tensor.grad = np.zeros_like(p.tensor.data)
    model.dtype = dtype
    return model
