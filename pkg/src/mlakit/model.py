"""Toy encoder-decoder transformer with Whisper's layout.

Pre-norm blocks, sinusoidal encoder positions, learned decoder positions,
decoder cross-attention and an output projection tied to the decoder token
embedding. Parameters live in one flat ``name -> ndarray`` dict so they map
one-to-one onto checkpoint tensors.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    MHA_FIELDS,
    MLA_FIELDS,
    AttentionConfig,
    attend,
    attention_forward_train,
    attention_mask,
    layer_weights,
    new_cache,
    sinusoidal_embedding,
)
from .errors import ArgumentError, CacheStateError, ConfigurationError
from .layers import layer_norm, mlp
from .selection import SubspaceSelection
from .validation import check_count, check_tokens

PAD, BOS, EOS = 0, 1, 2
SITE_KINDS = ("encoder_self", "decoder_self", "cross")


@dataclass(frozen=True)
class ModelSpec:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 64
    max_source_len: int = 128
    max_target_len: int = 128
    encoder_self: AttentionConfig = None
    decoder_self: AttentionConfig = None
    cross: AttentionConfig = None

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff",
                     "vocab_size", "max_source_len", "max_target_len"):
            check_count(getattr(self, name), name, minimum=1)
        if self.vocab_size <= EOS:
            raise ConfigurationError("vocab_size must leave room for PAD/BOS/EOS")
        for kind in SITE_KINDS:
            cfg = getattr(self, kind)
            if cfg is None:
                object.__setattr__(self, kind, AttentionConfig(self.d_model, self.n_heads))
            elif isinstance(cfg, dict):
                object.__setattr__(self, kind, AttentionConfig(**cfg))
            cfg = getattr(self, kind)
            if (cfg.d_model, cfg.n_heads) != (self.d_model, self.n_heads):
                raise ConfigurationError(f"{kind} config disagrees with model dimensions")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def site_names(self):
        for i in range(self.n_encoder_layers):
            yield f"encoder.layers.{i}.self_attn"
        for i in range(self.n_decoder_layers):
            yield f"decoder.layers.{i}.self_attn"
            yield f"decoder.layers.{i}.cross_attn"

    def site_kind(self, site):
        if site.startswith("encoder."):
            return "encoder_self"
        return "cross" if site.endswith("cross_attn") else "decoder_self"

    def site_config(self, site):
        return getattr(self, self.site_kind(site))

    def with_sites(self, **configs):
        return replace(self, **configs)

    def to_dict(self):
        out = {}
        for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff",
                     "vocab_size", "max_source_len", "max_target_len"):
            out[name] = getattr(self, name)
        for kind in SITE_KINDS:
            out[kind] = getattr(self, kind).to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(spec, seed=0):
    """Seeded MHA parameters for ``spec`` (every site must be MHA)."""
    rng = np.random.default_rng(seed)
    d, ff, v = spec.d_model, spec.d_ff, spec.vocab_size
    p = {}

    def linear(name, d_in, d_out):
        p[name] = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out))

    def attn(site):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            linear(f"{site}.{w}", d, d)
        for b in ("b_q", "b_v", "b_o"):
            p[f"{site}.{b}"] = np.zeros(d)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def block_mlp(prefix):
        linear(f"{prefix}.mlp.w1", d, ff)
        p[f"{prefix}.mlp.b1"] = np.zeros(ff)
        linear(f"{prefix}.mlp.w2", ff, d)
        p[f"{prefix}.mlp.b2"] = np.zeros(d)

    p["encoder.embed"] = rng.normal(0.0, 1.0, (v, d))
    for i in range(spec.n_encoder_layers):
        pre = f"encoder.layers.{i}"
        norm(f"{pre}.attn_ln")
        attn(f"{pre}.self_attn")
        norm(f"{pre}.mlp_ln")
        block_mlp(pre)
    norm("encoder.ln_post")

    # small, because it doubles as the output projection: initial logits
    # start near uniform
    p["decoder.embed"] = rng.normal(0.0, 0.02, (v, d))
    p["decoder.pos"] = rng.normal(0.0, 0.02, (spec.max_target_len, d))
    for i in range(spec.n_decoder_layers):
        pre = f"decoder.layers.{i}"
        norm(f"{pre}.attn_ln")
        attn(f"{pre}.self_attn")
        norm(f"{pre}.cross_ln")
        attn(f"{pre}.cross_attn")
        norm(f"{pre}.mlp_ln")
        block_mlp(pre)
    norm("decoder.ln")
    return p


def pad_batch(seqs, pad=PAD):
    """Right-pad integer sequences; returns ``(tokens, valid_mask)``."""
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


@dataclass
class DecoderState:
    """Per-layer caches for one generation stream."""

    self_caches: list
    cross_caches: list

    @property
    def position(self):
        return self.self_caches[0].length if self.self_caches else 0


@dataclass
class Seq2SeqModel:
    """Parameters plus the structural information needed to run them.

    Attributes
    ----------
    spec : ModelSpec
    params : dict of str -> ndarray (float64)
    selections : dict of site name -> SubspaceSelection
        Present for every MLA site.
    """

    spec: ModelSpec
    params: dict
    selections: dict = field(default_factory=dict)
    conversion: dict = None

    def __post_init__(self):
        for site in self.spec.site_names():
            cfg = self.spec.site_config(site)
            names = MHA_FIELDS if cfg.variant == "mha" else MLA_FIELDS
            missing = [n for n in names if f"{site}.{n}" not in self.params]
            if missing:
                raise ConfigurationError(f"{site} ({cfg.variant}) is missing {missing}")
            if cfg.is_mla:
                sel = self.selections.get(site)
                if sel is None:
                    sel = SubspaceSelection.empty(cfg.n_heads, cfg.d_head)
                    if cfg.r_per_head:
                        raise ConfigurationError(f"{site} needs a subspace selection")
                    self.selections[site] = sel
                layer_weights(self.params, site, cfg, sel)

    @classmethod
    def initialize(cls, spec=None, seed=0):
        spec = spec or ModelSpec()
        return cls(spec, init_params(spec, seed))

    def copy(self):
        return Seq2SeqModel(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.selections),
            None if self.conversion is None else dict(self.conversion),
        )

    def weights(self, site):
        return layer_weights(self.params, site, self.spec.site_config(site),
                             self.selections.get(site))

    def trainable_names(self):
        return list(self.params)

    # -- batched full-sequence passes ---------------------------------

    def _ln(self, name, x, tape=None):
        y, cache = layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])
        if tape is not None:
            tape.append(("ln", name, cache))
        return y

    def _mlp(self, prefix, x, tape=None):
        p = self.params
        y, cache = mlp(x, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"],
                       p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
        if tape is not None:
            tape.append(("mlp", prefix, cache))
        return y

    def _attn(self, site, xq, xkv, mask, causal, key_mask, tape=None):
        w = self.weights(site)
        if tape is None:
            return attend(xq, xkv, w, causal=causal, key_mask=key_mask)
        y, cache = attention_forward_train(w, xq, xkv, mask)
        tape.append(("attn", site, cache))
        return y

    def encode_batch(self, src, src_mask=None, tape=None):
        """Encoder states ``(B, S, d)`` for padded source ids ``(B, S)``."""
        src = np.asarray(src, dtype=np.int64)
        b, s = src.shape
        if s > self.spec.max_source_len:
            raise ArgumentError(f"source length {s} exceeds {self.spec.max_source_len}")
        if src_mask is None:
            src_mask = np.ones((b, s), dtype=bool)
        x = self.params["encoder.embed"][src] + sinusoidal_embedding(s, self.spec.d_model)
        if tape is not None:
            tape.append(("enc_embed", None, src))
        mask = attention_mask(s, s, key_mask=src_mask)
        for i in range(self.spec.n_encoder_layers):
            pre = f"encoder.layers.{i}"
            h = self._ln(f"{pre}.attn_ln", x, tape)
            x = x + self._attn(f"{pre}.self_attn", h, h, mask, False, src_mask, tape)
            h = self._ln(f"{pre}.mlp_ln", x, tape)
            x = x + self._mlp(pre, h, tape)
        return self._ln("encoder.ln_post", x, tape)

    def decode_batch(self, tgt_in, enc, src_mask=None, tape=None):
        """Teacher-forced causal decoder logits ``(B, T, vocab)``."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        b, t = tgt_in.shape
        if t > self.spec.max_target_len:
            raise ArgumentError(f"target length {t} exceeds {self.spec.max_target_len}")
        if src_mask is None:
            src_mask = np.ones(enc.shape[:2], dtype=bool)
        p = self.params
        y = p["decoder.embed"][tgt_in] + p["decoder.pos"][:t]
        if tape is not None:
            tape.append(("dec_embed", None, tgt_in))
        self_mask = attention_mask(t, t, causal=True)
        cross_mask = attention_mask(t, enc.shape[1], key_mask=src_mask)
        for i in range(self.spec.n_decoder_layers):
            pre = f"decoder.layers.{i}"
            h = self._ln(f"{pre}.attn_ln", y, tape)
            y = y + self._attn(f"{pre}.self_attn", h, h, self_mask, True, None, tape)
            h = self._ln(f"{pre}.cross_ln", y, tape)
            y = y + self._attn(f"{pre}.cross_attn", h, enc, cross_mask, False, src_mask, tape)
            h = self._ln(f"{pre}.mlp_ln", y, tape)
            y = y + self._mlp(pre, h, tape)
        y = self._ln("decoder.ln", y, tape)
        if tape is not None:
            tape.append(("logits", None, y))
        return y @ p["decoder.embed"].T

    def forward_batch(self, src, src_mask, tgt_in, tape=None):
        enc = self.encode_batch(src, src_mask, tape)
        if tape is not None:
            tape.append(("enc_out", None, None))
        return self.decode_batch(tgt_in, enc, src_mask, tape)

    # -- single-sequence inference ------------------------------------

    def encode(self, source_tokens):
        """Encoder states ``(S, d_model)`` for one unpadded source sequence."""
        src = check_tokens(source_tokens, self.spec.vocab_size, "source_tokens")
        if src.size == 0:
            raise ArgumentError("source sequence is empty")
        return self.encode_batch(src[None])[0]

    def forward(self, source_tokens, decoder_tokens):
        """Causal logits ``(T, vocab)`` for a full decoder input sequence."""
        enc = self.encode(source_tokens)
        tgt = check_tokens(decoder_tokens, self.spec.vocab_size, "decoder_tokens")
        return self.decode_batch(tgt[None], enc[None])[0]

    def new_decoder_state(self):
        n = self.spec.n_decoder_layers
        return DecoderState(
            [new_cache(self.spec.decoder_self) for _ in range(n)],
            [new_cache(self.spec.cross, static=True) for _ in range(n)],
        )

    def decode_step(self, token, position, encoder_states, state, absorbed=False):
        """One autoregressive step; returns logits over the vocabulary.

        ``state`` must hold exactly ``position`` cached tokens. Cross-attention
        caches are filled at the first step and reused afterwards.
        """
        if not 0 <= position < self.spec.max_target_len:
            raise ArgumentError(f"position {position} outside [0, {self.spec.max_target_len})")
        if state.position != position:
            raise CacheStateError(
                f"cache holds {state.position} tokens but step is at position {position}"
            )
        if not 0 <= token < self.spec.vocab_size:
            raise ArgumentError(f"token {token} outside the vocabulary")
        p = self.params
        enc = np.asarray(encoder_states, dtype=np.float64)
        y = (p["decoder.embed"][token] + p["decoder.pos"][position])[None, None, :]
        for i in range(self.spec.n_decoder_layers):
            pre = f"decoder.layers.{i}"
            h = self._ln(f"{pre}.attn_ln", y)
            y = y + attend(h, h, self.weights(f"{pre}.self_attn"), causal=True,
                           cache=state.self_caches[i], absorbed=absorbed)
            h = self._ln(f"{pre}.cross_ln", y)
            cross_cache = state.cross_caches[i]
            source = None if cross_cache.length else enc[None]
            y = y + attend(h, source, self.weights(f"{pre}.cross_attn"),
                           cache=cross_cache, absorbed=absorbed)
            h = self._ln(f"{pre}.mlp_ln", y)
            y = y + self._mlp(pre, h)
        y = self._ln("decoder.ln", y)
        return (y @ p["decoder.embed"].T)[0, 0]

    def greedy_decode(self, source_tokens, max_len=None, absorbed=False):
        """Argmax decoding from BOS until EOS or ``max_len`` new tokens.

        Ties go to the lowest token id. The returned ids exclude BOS and EOS.
        """
        limit = self.spec.max_target_len if max_len is None else min(max_len, self.spec.max_target_len)
        enc = self.encode(source_tokens)
        state = self.new_decoder_state()
        out = []
        token = BOS
        for position in range(limit):
            logits = self.decode_step(token, position, enc, state, absorbed=absorbed)
            token = int(np.argmax(logits))
            if token == EOS:
                break
            out.append(token)
        return np.array(out, dtype=np.int64)

    def capture_qk(self, sources, targets):
        """Per-site query/key heads and allowed-pair masks under teacher forcing.

        Returns
        -------
        dict of site -> (q (B, H, Sq, d_head), k (B, H, Sk, d_head), pair_mask (B, Sq, Sk))
        """
        src, src_mask = pad_batch(sources)
        tgt, tgt_mask = pad_batch([np.concatenate([[BOS], t]) for t in targets])
        tape = []
        self.forward_batch(src, src_mask, tgt, tape)
        h, dh = self.spec.n_heads, self.spec.d_head

        def heads(x):
            b, s, _ = x.shape
            return x.reshape(b, s, h, dh).transpose(0, 2, 1, 3)

        causal = attention_mask(tgt.shape[1], tgt.shape[1], causal=True)
        out = {}
        for kind, site, cache in tape:
            if kind != "attn":
                continue
            site_kind = self.spec.site_kind(site)
            if site_kind == "encoder_self":
                mask = src_mask[:, :, None] & src_mask[:, None, :]
            elif site_kind == "decoder_self":
                mask = causal & tgt_mask[:, :, None] & tgt_mask[:, None, :]
            else:
                mask = tgt_mask[:, :, None] & src_mask[:, None, :]
            out[site] = (heads(cache["q"]), heads(cache["k"]), mask)
        return out
