"""The unified streaming/non-streaming two-pass model.

A 1/8 convolutional subsampler feeds M pre-norm Conformer encoder layers
(macaron FFN halves, relative-position self-attention, causal conv module),
followed by a CTC head and two N-layer Transformer decoders, one per reading
direction. Every FFN slot is a MoE layer when the config has experts.

Chunk masks make one set of weights serve both modes: each frame attends to
its own chunk and everything before it, so a big enough chunk degenerates to
full attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .moe import MoeFFN, expert_load_stats, make_ffn_slot
from .params import ParamStore

MEL_DIM = 80


# ---------------------------------------------------------------------------
# chunk masks


def make_chunk_mask(t_prime: int, chunk: int) -> np.ndarray:
    """[T', T'] boolean mask: row t may attend column s iff s's chunk is not
    after t's chunk. chunk >= T' gives the all-true (non-streaming) mask."""
    if t_prime < 1 or chunk < 1:
        raise ValueError("t_prime and chunk must be >= 1")
    blocks = np.arange(t_prime) // chunk
    return blocks[None, :] <= blocks[:, None]


def sample_dynamic_chunk(t_prime: int, rng: np.random.Generator,
                         p_full: float = 0.5, chunk_cap: int = 25) -> int:
    """Full chunk with probability p_full, else uniform on [1, min(T', cap)]."""
    if t_prime < 1:
        raise ValueError("t_prime must be >= 1")
    if rng.random() < p_full:
        return t_prime
    return int(rng.integers(1, min(t_prime, chunk_cap) + 1))


def sinusoid_table(positions: np.ndarray, d: int, dtype) -> np.ndarray:
    """Sinusoidal embeddings for (possibly negative) integer positions."""
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    pe = np.zeros((len(positions), d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# subsampling


def subsampled_length(t: int) -> int:
    """Length after three valid stride-2 convs; raises when t < 15."""
    for _ in range(3):
        if t < 3:
            raise ValueError("utterance too short after subsampling")
        t = (t - 3) // 2 + 1
    return t


class Subsampler:
    """Three stride-2 3x3 convs over (time, mel) then a linear map to d_att."""

    def __init__(self, store: ParamStore, d_att: int):
        ch = d_att
        self.convs = []
        in_ch = 1
        freq = MEL_DIM
        for i in range(1, 4):
            w = store.new(f"sub.conv{i}.W", (ch, in_ch, 3, 3))
            b = store.new(f"sub.conv{i}.b", (ch,), "zeros")
            self.convs.append((w, b))
            in_ch = ch
            freq = (freq - 3) // 2 + 1
        self.out_freq = freq
        self.proj_w = store.new("sub.proj.W", (ch * freq, d_att))
        self.proj_b = store.new("sub.proj.b", (d_att,), "zeros")

    def __call__(self, frames: np.ndarray) -> Tensor:
        t = frames.shape[0]
        subsampled_length(t)  # validates minimum length
        x = Tensor(frames[None, :, :], dtype=self.proj_w.dtype)
        for w, b in self.convs:
            x = ad.relu(ad.conv2d(x, w, b, (2, 2)))
        ch, t_p, freq = x.data.shape
        x = ad.reshape(ad.transpose(x, (1, 0, 2)), (t_p, ch * freq))
        return ad.linear(x, self.proj_w, self.proj_b)


# ---------------------------------------------------------------------------
# attention


class MultiHeadAttention:
    """Multi-head attention; optionally with relative-position scoring.

    The relative variant adds a learned projection of sinusoidal offset
    embeddings plus per-head content/position bias vectors, so scores depend
    only on distance. That keeps cached streaming exact: a chunk's rows see
    the same scores they would in a one-shot masked pass.
    """

    def __init__(self, store: ParamStore, prefix: str, d_att: int, heads: int,
                 rel_pos: bool):
        if d_att % heads:
            raise ValueError("d_att must divide evenly into heads")
        self.d = d_att
        self.h = heads
        self.dh = d_att // heads
        self.rel_pos = rel_pos
        self.wq = store.new(f"{prefix}.Wq", (d_att, d_att))
        self.bq = store.new(f"{prefix}.bq", (d_att,), "zeros")
        self.wk = store.new(f"{prefix}.Wk", (d_att, d_att))
        self.bk = store.new(f"{prefix}.bk", (d_att,), "zeros")
        self.wv = store.new(f"{prefix}.Wv", (d_att, d_att))
        self.bv = store.new(f"{prefix}.bv", (d_att,), "zeros")
        self.wo = store.new(f"{prefix}.Wo", (d_att, d_att))
        self.bo = store.new(f"{prefix}.bo", (d_att,), "zeros")
        if rel_pos:
            self.w_pos = store.new(f"{prefix}.W_pos", (d_att, d_att))
            self.u = store.new(f"{prefix}.u", (heads, self.dh), "zeros")
            self.v = store.new(f"{prefix}.v", (heads, self.dh), "zeros")

    def _heads(self, x: Tensor) -> Tensor:
        t = x.data.shape[0]
        return ad.transpose(ad.reshape(x, (t, self.h, self.dh)), (1, 0, 2))

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return ad.linear(x, self.wk, self.bk), ad.linear(x, self.wv, self.bv)

    def attend(self, q_in: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
               q_pos: np.ndarray | None = None,
               k_pos: np.ndarray | None = None) -> Tensor:
        t_q = q_in.data.shape[0]
        q = self._heads(ad.linear(q_in, self.wq, self.bq))
        kh = self._heads(k)
        vh = self._heads(v)
        if self.rel_pos:
            qu = ad.add(q, ad.reshape(self.u, (self.h, 1, self.dh)))
            scores = ad.matmul(qu, ad.transpose(kh, (0, 2, 1)))
            off = q_pos[:, None] - k_pos[None, :]
            off_vals = np.arange(off.min(), off.max() + 1)
            pe = Tensor(sinusoid_table(off_vals, self.d, q_in.dtype))
            rproj = self._heads(ad.linear(pe, self.w_pos, None))
            qv = ad.add(q, ad.reshape(self.v, (self.h, 1, self.dh)))
            bd_all = ad.matmul(qv, ad.transpose(rproj, (0, 2, 1)))
            scores = ad.add(scores, ad.gather_last(bd_all, (off - off.min())))
        else:
            scores = ad.matmul(q, ad.transpose(kh, (0, 2, 1)))
        scores = ad.scale(scores, 1.0 / np.sqrt(self.dh))
        probs = ad.masked_softmax(scores, mask)
        ctx = ad.matmul(probs, vh)
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t_q, self.d))
        return ad.linear(ctx, self.wo, self.bo)

    def __call__(self, x: Tensor, mask: np.ndarray,
                 pos: np.ndarray | None = None) -> Tensor:
        k, v = self.project_kv(x)
        if self.rel_pos and pos is None:
            pos = np.arange(x.data.shape[0])
        return self.attend(x, k, v, mask, pos, pos)


# ---------------------------------------------------------------------------
# conv module


class ConvModule:
    """Pointwise conv -> GLU -> depthwise conv -> LayerNorm -> Swish ->
    pointwise conv. Layer norm (not batch norm) so streaming needs no running
    statistics; causal padding keeps the module blind to future frames."""

    def __init__(self, store: ParamStore, prefix: str, d_att: int, kernel: int):
        self.kernel = kernel
        self.pw1_w = store.new(f"{prefix}.pw1.W", (d_att, 2 * d_att))
        self.pw1_b = store.new(f"{prefix}.pw1.b", (2 * d_att,), "zeros")
        self.dw_w = store.new(f"{prefix}.dw.W", (kernel, d_att))
        self.dw_b = store.new(f"{prefix}.dw.b", (d_att,), "zeros")
        self.ln_g = store.new(f"{prefix}.ln.gamma", (d_att,), "ones")
        self.ln_b = store.new(f"{prefix}.ln.beta", (d_att,), "zeros")
        self.pw2_w = store.new(f"{prefix}.pw2.W", (d_att, d_att))
        self.pw2_b = store.new(f"{prefix}.pw2.b", (d_att,), "zeros")

    def gate(self, x: Tensor) -> Tensor:
        return ad.glu(ad.linear(x, self.pw1_w, self.pw1_b))

    def finish(self, h: Tensor) -> Tensor:
        h = ad.layer_norm(h, self.ln_g, self.ln_b)
        return ad.linear(ad.swish(h), self.pw2_w, self.pw2_b)

    def __call__(self, x: Tensor, causal: bool = True) -> Tensor:
        h = self.gate(x)
        h = ad.depthwise_conv1d(h, self.dw_w, self.dw_b, causal)
        return self.finish(h)

    def forward_chunk(self, x: Tensor, tail: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Causal conv over [zero pad | cached tail | chunk]; returns the chunk
        outputs and the new tail (last kernel-1 gated rows)."""
        h = self.gate(x)
        need = self.kernel - 1
        ctx = np.zeros((need - tail.shape[0], h.data.shape[1]), dtype=h.data.dtype)
        full = ad.concat_rows([Tensor(ctx), Tensor(tail), h])
        out = ad.depthwise_conv1d_valid(full, self.dw_w, self.dw_b)
        gated = np.concatenate([tail, h.data], axis=0)
        new_tail = gated[-need:] if gated.shape[0] >= need else gated
        return self.finish(out), new_tail


def conv_module_forward(conv: ConvModule, x: Tensor, causal_padding: bool) -> Tensor:
    """Standalone entry point used by the gradient suite."""
    return conv(x, causal=causal_padding)


# ---------------------------------------------------------------------------
# encoder


class Norm:
    def __init__(self, store: ParamStore, prefix: str, d: int):
        self.g = store.new(f"{prefix}.gamma", (d,), "ones")
        self.b = store.new(f"{prefix}.beta", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)


@dataclass
class LayerCache:
    k: np.ndarray
    v: np.ndarray
    conv_tail: np.ndarray


@dataclass
class EncoderCache:
    """Single-owner per-stream state for incremental encoding: per-layer
    projected keys/values (full left context) and conv left-context tails."""

    chunk_size: int
    d_att: int
    m_layers: int
    frames_seen: int = 0
    layers: list = field(default_factory=list)


class ConformerLayer:
    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig):
        d = cfg.d_att
        self.norm_ffn1 = Norm(store, f"{prefix}.norm_ffn1", d)
        self.ffn1 = make_ffn_slot(store, f"{prefix}.ffn1", d, cfg.d_ff,
                                  cfg.num_experts, cfg.topk)
        self.norm_mhsa = Norm(store, f"{prefix}.norm_mhsa", d)
        self.mhsa = MultiHeadAttention(store, f"{prefix}.mhsa", d, cfg.heads,
                                       rel_pos=True)
        self.norm_conv = Norm(store, f"{prefix}.norm_conv", d)
        self.conv = ConvModule(store, f"{prefix}.conv", d, cfg.cnn_kernel)
        self.norm_ffn2 = Norm(store, f"{prefix}.norm_ffn2", d)
        self.ffn2 = make_ffn_slot(store, f"{prefix}.ffn2", d, cfg.d_ff,
                                  cfg.num_experts, cfg.topk)
        self.norm_final = Norm(store, f"{prefix}.norm_final", d)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = ad.add(x, ad.scale(self.ffn1(self.norm_ffn1(x)), 0.5))
        x = ad.add(x, self.mhsa(self.norm_mhsa(x), mask))
        x = ad.add(x, self.conv(self.norm_conv(x), causal=True))
        x = ad.add(x, ad.scale(self.ffn2(self.norm_ffn2(x)), 0.5))
        return self.norm_final(x)

    def forward_chunk(self, x: Tensor, cache: LayerCache,
                      frames_seen: int) -> tuple[Tensor, LayerCache]:
        c = x.data.shape[0]
        x = ad.add(x, ad.scale(self.ffn1(self.norm_ffn1(x)), 0.5))
        xn = self.norm_mhsa(x)
        k_new, v_new = self.mhsa.project_kv(xn)
        k = ad.concat_rows([Tensor(cache.k), k_new]) if cache.k.size else k_new
        v = ad.concat_rows([Tensor(cache.v), v_new]) if cache.v.size else v_new
        s = k.data.shape[0]
        q_pos = np.arange(frames_seen, frames_seen + c)
        att = self.mhsa.attend(xn, k, v, np.ones((c, s), dtype=bool),
                               q_pos, np.arange(s))
        x = ad.add(x, att)
        conv_out, new_tail = self.conv.forward_chunk(self.norm_conv(x), cache.conv_tail)
        x = ad.add(x, conv_out)
        x = ad.add(x, ad.scale(self.ffn2(self.norm_ffn2(x)), 0.5))
        new_cache = LayerCache(k.data, v.data, new_tail)
        return self.norm_final(x), new_cache


class Encoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        self.layers = [ConformerLayer(store, f"enc.{i}", cfg)
                       for i in range(cfg.m_layers)]
        self.final_norm = Norm(store, "enc.final_norm", cfg.d_att)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_norm(x)

    def new_cache(self, chunk_size: int) -> EncoderCache:
        d = self.cfg.d_att
        dt = self.final_norm.g.dtype
        layers = [LayerCache(np.zeros((0, d), dtype=dt), np.zeros((0, d), dtype=dt),
                             np.zeros((0, d), dtype=dt))
                  for _ in self.layers]
        return EncoderCache(chunk_size=chunk_size, d_att=d,
                            m_layers=len(self.layers), layers=layers)

    def forward_chunk(self, chunk: Tensor, cache: EncoderCache) -> tuple[Tensor, EncoderCache]:
        """Advance one chunk; equals the matching rows of a one-shot masked
        forward because left context is unlimited and conv is causal."""
        if cache.d_att != self.cfg.d_att or cache.m_layers != len(self.layers):
            raise ValueError("cache/config mismatch")
        x = chunk
        new_layers = []
        for layer, lc in zip(self.layers, cache.layers):
            x, nlc = layer.forward_chunk(x, lc, cache.frames_seen)
            new_layers.append(nlc)
        out = self.final_norm(x)
        new_cache = EncoderCache(chunk_size=cache.chunk_size, d_att=cache.d_att,
                                 m_layers=cache.m_layers,
                                 frames_seen=cache.frames_seen + chunk.data.shape[0],
                                 layers=new_layers)
        return out, new_cache


# ---------------------------------------------------------------------------
# decoder


class DecoderLayer:
    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig):
        d = cfg.d_att
        self.norm_self = Norm(store, f"{prefix}.norm_self", d)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", d,
                                            cfg.heads, rel_pos=False)
        self.norm_src = Norm(store, f"{prefix}.norm_src", d)
        self.src_attn = MultiHeadAttention(store, f"{prefix}.src_attn", d,
                                           cfg.heads, rel_pos=False)
        self.norm_ffn = Norm(store, f"{prefix}.norm_ffn", d)
        self.ffn = make_ffn_slot(store, f"{prefix}.ffn", d, cfg.d_ff,
                                 cfg.num_experts, cfg.topk)

    def __call__(self, x: Tensor, enc_out: Tensor, causal: np.ndarray) -> Tensor:
        x = ad.add(x, self.self_attn(self.norm_self(x), causal))
        xn = self.norm_src(x)
        k, v = self.src_attn.project_kv(enc_out)
        src_mask = np.ones((x.data.shape[0], enc_out.data.shape[0]), dtype=bool)
        x = ad.add(x, self.src_attn.attend(xn, k, v, src_mask))
        return ad.add(x, self.ffn(self.norm_ffn(x)))


class Decoder:
    """Teacher-forced autoregressive decoder for one reading direction."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig):
        self.cfg = cfg
        self.prefix = prefix
        self.embed = store.new(f"{prefix}.embed.W", (cfg.vocab, cfg.d_att))
        self.layers = [DecoderLayer(store, f"{prefix}.{i}", cfg)
                       for i in range(cfg.n_dec_layers)]
        self.final_norm = Norm(store, f"{prefix}.final_norm", cfg.d_att)
        self.out_w = store.new(f"{prefix}.out.W", (cfg.d_att, cfg.vocab))
        self.out_b = store.new(f"{prefix}.out.b", (cfg.vocab,), "zeros")

    def __call__(self, enc_out: Tensor, labels) -> Tensor:
        """Logits [U+1, V] for <sos> + labels (caller pre-reverses for r2l)."""
        v = self.cfg.vocab
        for t in labels:
            if not 0 <= int(t) < v:
                raise ValueError(f"label id {t} outside vocab {v}")
        ids = np.array([self.cfg.sos_eos_id] + [int(t) for t in labels])
        u1 = len(ids)
        x = ad.scale(ad.take_rows(self.embed, ids), np.sqrt(self.cfg.d_att))
        pe = Tensor(sinusoid_table(np.arange(u1), self.cfg.d_att, x.dtype))
        x = ad.add(x, pe)
        causal = np.tril(np.ones((u1, u1), dtype=bool))
        for layer in self.layers:
            x = layer(x, enc_out, causal)
        x = self.final_norm(x)
        return ad.linear(x, self.out_w, self.out_b)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardOutput:
    encoder_out: Tensor
    ctc_logits: Tensor
    l2r_logits: Tensor | None = None
    r2l_logits: Tensor | None = None


class U2Model:
    """Subsampler + chunk-masked Conformer encoder + CTC head + two decoders."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self.subsampler = Subsampler(self.store, cfg.d_att)
        self.encoder = Encoder(self.store, cfg)
        self.ctc_w = self.store.new("ctc.out.W", (cfg.d_att, cfg.vocab))
        self.ctc_b = self.store.new("ctc.out.b", (cfg.vocab,), "zeros")
        self.dec_l2r = Decoder(self.store, "dec_l2r", cfg)
        self.dec_r2l = Decoder(self.store, "dec_r2l", cfg)

    @property
    def params(self) -> dict:
        return self.store.params

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def encode(self, frames: np.ndarray, chunk_size: int | None = None) -> Tensor:
        """Subsample then run the encoder under the chunk mask (None = full)."""
        x = self.subsampler(frames)
        t_p = x.data.shape[0]
        c = t_p if chunk_size is None else chunk_size
        return self.encoder(x, make_chunk_mask(t_p, c))

    def ctc_head(self, enc_out: Tensor) -> Tensor:
        return ad.linear(enc_out, self.ctc_w, self.ctc_b)

    def decoder_forward(self, enc_out: Tensor, labels, direction: str) -> Tensor:
        if direction == "l2r":
            return self.dec_l2r(enc_out, labels)
        if direction == "r2l":
            return self.dec_r2l(enc_out, list(reversed(list(labels))))
        raise ValueError(f"unknown direction {direction!r}")

    def forward(self, frames: np.ndarray, labels=None,
                chunk_size: int | None = None) -> ForwardOutput:
        enc_out = self.encode(frames, chunk_size)
        out = ForwardOutput(enc_out, self.ctc_head(enc_out))
        if labels is not None:
            out.l2r_logits = self.decoder_forward(enc_out, labels, "l2r")
            out.r2l_logits = self.decoder_forward(enc_out, labels, "r2l")
        return out

    # -- expert helpers ----------------------------------------------------

    def moe_slots(self) -> list[MoeFFN]:
        slots = []
        for layer in self.encoder.layers:
            for slot in (layer.ffn1, layer.ffn2):
                if isinstance(slot, MoeFFN):
                    slots.append(slot)
        for dec in (self.dec_l2r, self.dec_r2l):
            for layer in dec.layers:
                if isinstance(layer.ffn, MoeFFN):
                    slots.append(layer.ffn)
        return slots

    def make_experts_identical(self) -> None:
        for slot in self.moe_slots():
            slot.make_experts_identical()

    def set_record_routing(self, flag: bool) -> None:
        for slot in self.moe_slots():
            slot.record_decisions = flag

    def collect_load_histogram(self):
        decs = [s.last_decision for s in self.moe_slots() if s.last_decision is not None]
        if not decs:
            return None
        return expert_load_stats(decs, self.cfg.num_experts)


def align_dense_with_moe(dense: U2Model, moe: U2Model) -> None:
    """Copy moe weights into a dense twin: shared tensors verbatim, FFN slots
    from expert 0. With identical experts the two models then agree."""
    for name, p in dense.params.items():
        if name in moe.params:
            p.data = moe.params[name].data.copy()
            continue
        parts = name.split(".")
        slot_pos = max(i for i, s in enumerate(parts) if s.startswith("ffn"))
        src = ".".join(parts[:slot_pos + 1] + ["expert0"] + parts[slot_pos + 1:])
        p.data = moe.params[src].data.copy()


# ---------------------------------------------------------------------------
# closed-form parameter counting


@dataclass
class ParamCount:
    breakdown: dict
    total: int


def _ffn_slot_params(cfg: ModelConfig) -> int:
    dense = 2 * cfg.d_att * cfg.d_ff + cfg.d_ff + cfg.d_att
    if not cfg.is_moe:
        return dense
    return cfg.num_experts * dense + cfg.d_att * cfg.num_experts


def dense_ffn_params(d_att: int, d_ff: int) -> int:
    return 2 * d_att * d_ff + d_ff + d_att


def count_params(cfg: ModelConfig) -> ParamCount:
    """Arithmetic mirror of the model constructor; no tensors allocated."""
    d, v = cfg.d_att, cfg.vocab
    ln = 2 * d
    freq = MEL_DIM
    sub = 0
    in_ch = 1
    for _ in range(3):
        sub += d * in_ch * 9 + d
        in_ch = d
        freq = (freq - 3) // 2 + 1
    sub += (d * freq) * d + d

    att_rel = 4 * (d * d + d) + d * d + 2 * d
    att_abs = 4 * (d * d + d)
    conv = d * 2 * d + 2 * d + cfg.cnn_kernel * d + d + ln + d * d + d
    enc_layer = 2 * _ffn_slot_params(cfg) + att_rel + conv + 5 * ln
    encoder = cfg.m_layers * enc_layer + ln

    ctc_head = d * v + v

    dec_layer = att_abs * 2 + _ffn_slot_params(cfg) + 3 * ln
    decoder = cfg.n_dec_layers * dec_layer + ln + d * v + v  # layers + norm + out
    embeddings = 2 * v * d
    decoders = 2 * decoder

    breakdown = {
        "subsampling": sub,
        "encoder": encoder,
        "ctc_head": ctc_head,
        "decoders": decoders,
        "embeddings": embeddings,
    }
    return ParamCount(breakdown, sum(breakdown.values()))


def moe_dense_param_delta(cfg: ModelConfig) -> int:
    """Closed-form identity: extra parameters a MoE config carries over the
    dense config with the same dims, per FFN slot accounting."""
    if not cfg.is_moe:
        return 0
    slots = 2 * cfg.m_layers + 2 * cfg.n_dec_layers
    per_slot = (cfg.num_experts - 1) * dense_ffn_params(cfg.d_att, cfg.d_ff) \
        + cfg.d_att * cfg.num_experts
    return slots * per_slot
