"""Multi-head attention and its latent (MLA) variants.

Three layer types share one scaled dot-product core:

* ``mha`` -- ordinary attention with full per-token keys and values cached.
* ``mla_full`` -- keys and values are both up-projected from a shared latent
  ``c_kv = x @ w_dkv``; only the latent is cached.
* ``mla_preserving`` -- as ``mla_full`` but a few key dimensions per head
  bypass the latent (``k_p = x @ w_kp``) and are cached verbatim.

Weights use the ``y = x @ w + b`` convention (``w`` is ``d_in x d_out``).
Inputs are ``(S, d_model)`` or batched ``(B, S, d_model)``.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ArgumentError, CacheStateError, ConfigurationError
from .linalg import softmax_rows
from .selection import SubspaceSelection
from .validation import as_batch, check_count

VARIANTS = ("mha", "mla_full", "mla_preserving")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    variant: str = "mha"
    d_latent: int = 0
    r_per_head: int = 0

    def __post_init__(self):
        check_count(self.d_model, "d_model", minimum=2)
        check_count(self.n_heads, "n_heads", minimum=1)
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.d_head % 2:
            raise ConfigurationError(f"d_head must be even, got {self.d_head}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.variant == "mha":
            if self.d_latent or self.r_per_head:
                raise ConfigurationError("mha takes no latent size or preserved dims")
            return
        if self.d_latent < 1:
            raise ConfigurationError("MLA variants need d_latent >= 1")
        if self.variant == "mla_full" and self.r_per_head != 0:
            raise ConfigurationError("mla_full preserves no key dimensions")
        if self.variant == "mla_preserving" and not 1 <= self.r_per_head <= self.d_head // 2:
            raise ConfigurationError(
                f"r_per_head must lie in [1, {self.d_head // 2}] for mla_preserving"
            )

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def scale(self):
        return 1.0 / math.sqrt(self.d_head)

    @property
    def is_mla(self):
        return self.variant != "mha"

    @property
    def n_preserved(self):
        return 2 * self.r_per_head * self.n_heads

    @property
    def entries_per_token(self):
        """Cached scalars per token for one layer."""
        if self.variant == "mha":
            return 2 * self.d_model
        return self.d_latent + self.n_preserved

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class MhaLayerWeights:
    """Projection weights of one MHA layer. The key projection has no bias."""

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ArgumentError(f"{name} must be {d}x{d}")
        for name in ("b_q", "b_v", "b_o"):
            if getattr(self, name).shape != (d,):
                raise ArgumentError(f"{name} must have length {d}")

    @property
    def d_model(self):
        return self.w_q.shape[0]


@dataclass(frozen=True)
class MlaLayerWeights:
    """Weights of one latent-attention layer.

    ``w_kp`` holds the preserved key columns (global dims ascending) and
    ``w_dkv @ w_uk`` replaces the remaining key columns, also ascending.
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_kp: np.ndarray
    w_dkv: np.ndarray
    w_uk: np.ndarray
    w_uv: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    selection: SubspaceSelection

    def __post_init__(self):
        d = self.w_q.shape[0]
        latent = self.w_dkv.shape[1]
        n_p = self.selection.n_preserved
        if self.selection.head_count * self.selection.d_head != d:
            raise ConfigurationError("selection does not match d_model")
        expected = {
            "w_q": (d, d),
            "w_kp": (d, n_p),
            "w_dkv": (d, latent),
            "w_uk": (latent, d - n_p),
            "w_uv": (latent, d),
            "w_o": (d, d),
            "b_q": (d,),
            "b_v": (d,),
            "b_o": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        order = np.concatenate([self.selection.global_dims(), self.selection.compressed_dims()])
        object.__setattr__(self, "_key_order", np.argsort(order, kind="stable"))
        object.__setattr__(self, "_key_perm", order)

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_latent(self):
        return self.w_dkv.shape[1]

    @property
    def n_preserved(self):
        return self.w_kp.shape[1]

    def assemble_keys(self, k_p, k_c):
        """Scatter preserved and compressed key parts back to d_model order."""
        return np.concatenate([k_p, k_c], axis=-1)[..., self._key_order]

    def split_key_grad(self, dk):
        """Inverse of :meth:`assemble_keys` for gradients."""
        gathered = dk[..., self._key_perm]
        return gathered[..., : self.n_preserved], gathered[..., self.n_preserved :]


MHA_FIELDS = tuple(f.name for f in fields(MhaLayerWeights) if f.name != "n_heads")
MLA_FIELDS = tuple(f.name for f in fields(MlaLayerWeights) if f.name != "selection")


class KvCache:
    """Growing (or, for cross-attention, write-once) per-layer cache.

    Tensors are stored as ``(B, T, width)``. ``static`` caches are filled on
    first use and then reused unchanged.
    """

    kind = None
    names = ()

    def __init__(self, static=False):
        self.static = static
        self._store = {name: None for name in self.names}

    @property
    def length(self):
        first = self._store[self.names[0]]
        return 0 if first is None else first.shape[1]

    def __getattr__(self, name):
        store = self.__dict__.get("_store", {})
        if name in store:
            return store[name]
        raise AttributeError(name)

    def append(self, **tensors):
        if self.static and self.length:
            raise CacheStateError("static cache is already filled")
        lengths = {t.shape[1] for t in tensors.values()}
        if len(lengths) != 1 or set(tensors) != set(self.names):
            raise CacheStateError(f"append needs equal-length {self.names}")
        for name, new in tensors.items():
            old = self._store[name]
            self._store[name] = new.copy() if old is None else np.concatenate([old, new], axis=1)

    def entry_count(self):
        """Total cached scalars (all batch rows, tokens and tensors)."""
        return sum(0 if t is None else t.size for t in self._store.values())

    def entries_per_token(self):
        return sum(0 if t is None else t.shape[0] * t.shape[2] for t in self._store.values())


class MhaCache(KvCache):
    kind = "mha"
    names = ("k", "v")


class MlaCache(KvCache):
    kind = "mla"
    names = ("c_kv", "k_p")


def new_cache(cfg, static=False):
    return MhaCache(static) if cfg.variant == "mha" else MlaCache(static)


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def attention_mask(sq, sk, causal=False, past=0, key_mask=None):
    """Boolean ``(B or 1, Sq, Sk)`` mask, True where attention is allowed.

    With ``causal``, query ``i`` sits at absolute position ``past + i`` and
    sees keys up to and including that position.
    """
    mask = np.ones((1, sq, sk), dtype=bool)
    if causal:
        mask = mask & (np.arange(sk)[None, :] <= past + np.arange(sq)[:, None])[None]
    if key_mask is not None:
        mask = mask & np.asarray(key_mask, dtype=bool)[:, None, :]
    return mask


def sdpa(q, k, v, n_heads, scale, mask=None):
    """Scaled dot-product attention over heads.

    Returns
    -------
    out : ndarray (B, Sq, d)
    probs : ndarray (B, H, Sq, Sk)
    """
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale
    if mask is not None:
        scores = np.where(mask[:, None], scores, -np.inf)
    probs = softmax_rows(scores)
    return _merge_heads(probs @ vh), probs


def _sdpa_backward(dout, q, k, v, probs, n_heads, scale):
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    dh = _split_heads(dout, n_heads)
    dp = dh @ vh.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dh
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    dq = ds @ kh * scale
    dk = ds.transpose(0, 1, 3, 2) @ qh * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def _check_inputs(x_q, x_kv, d_model):
    xq, squeeze = as_batch(x_q)
    if xq.shape[-1] != d_model:
        raise ArgumentError(f"x_q width {xq.shape[-1]} != d_model {d_model}")
    xkv = None
    if x_kv is not None:
        xkv, _ = as_batch(x_kv)
        if xkv.shape[-1] != d_model or xkv.shape[0] != xq.shape[0]:
            raise ArgumentError(f"x_kv shape {xkv.shape} incompatible with x_q {xq.shape}")
    return xq, xkv, squeeze


def _cached(cache, expected_kind, new, causal):
    """Append fresh projections to ``cache`` and return (tensors, past)."""
    if cache is None:
        return new, 0
    if cache.kind != expected_kind:
        raise ConfigurationError(f"{cache.kind} cache used with {expected_kind} weights")
    if cache.static and cache.length:
        return {n: getattr(cache, n) for n in cache.names}, 0
    if new is None:
        raise CacheStateError("empty cache and no x_kv to fill it")
    past = cache.length
    cache.append(**new)
    return {n: getattr(cache, n) for n in cache.names}, past if causal else 0


def mha_attend(x_q, x_kv, w, causal=False, cache=None, key_mask=None):
    """Standard multi-head attention.

    Parameters
    ----------
    x_q : ndarray (S, d) or (B, S, d)
    x_kv : ndarray or None
        Key/value source. With a cache this holds only the new tokens; it
        may be None when a static cache is already filled.
    w : MhaLayerWeights
    causal : bool
    cache : MhaCache, optional
    key_mask : bool ndarray (B, S_kv), optional
        False marks padded keys.
    """
    d = w.d_model
    n_heads = w.n_heads
    xq, xkv, squeeze = _check_inputs(x_q, x_kv, d)
    q = xq @ w.w_q + w.b_q
    new = None if xkv is None else {"k": xkv @ w.w_k, "v": xkv @ w.w_v + w.b_v}
    kv, past = _cached(cache, "mha", new, causal)
    mask = attention_mask(q.shape[1], kv["k"].shape[1], causal, past, key_mask)
    out, _ = sdpa(q, kv["k"], kv["v"], n_heads, 1.0 / math.sqrt(d // n_heads), mask)
    y = out @ w.w_o + w.b_o
    return y[0] if squeeze else y


def _mla_new(w, xkv):
    if xkv is None:
        return None
    return {"c_kv": xkv @ w.w_dkv, "k_p": xkv @ w.w_kp}


def mla_attend(x_q, x_kv, w, causal=False, cache=None, key_mask=None):
    """Latent attention with explicit key reconstruction.

    Full keys are rebuilt per cached token by scattering ``k_p`` and
    ``c_kv @ w_uk`` into their original dimension slots; values are
    ``c_kv @ w_uv + b_v``.
    """
    d = w.d_model
    n_heads = w.selection.head_count
    xq, xkv, squeeze = _check_inputs(x_q, x_kv, d)
    q = xq @ w.w_q + w.b_q
    lat, past = _cached(cache, "mla", _mla_new(w, xkv), causal)
    keys = w.assemble_keys(lat["k_p"], lat["c_kv"] @ w.w_uk)
    values = lat["c_kv"] @ w.w_uv + w.b_v
    mask = attention_mask(q.shape[1], keys.shape[1], causal, past, key_mask)
    out, _ = sdpa(q, keys, values, n_heads, 1.0 / math.sqrt(d // n_heads), mask)
    y = out @ w.w_o + w.b_o
    return y[0] if squeeze else y


def mla_attend_absorbed(x_q, x_kv, w, causal=False, cache=None, key_mask=None):
    """Latent attention that never materialises full keys or values.

    The key up-projection is folded into the query, so compressed-part
    scores are ``(q_c @ w_uk_h.T) @ c_kv.T``; attention weights act on the
    latents and ``w_uv`` is applied afterwards.
    """
    d = w.d_model
    sel = w.selection
    n_heads, d_head = sel.head_count, sel.d_head
    n_keep = 2 * sel.r
    n_comp = d_head - n_keep
    xq, xkv, squeeze = _check_inputs(x_q, x_kv, d)
    q = xq @ w.w_q + w.b_q
    lat, past = _cached(cache, "mla", _mla_new(w, xkv), causal)
    c_kv, k_p = lat["c_kv"], lat["k_p"]
    b, sq, _ = q.shape
    t = c_kv.shape[1]

    q_keep = q[..., sel.global_dims()].reshape(b, sq, n_heads, n_keep).transpose(0, 2, 1, 3)
    q_comp = q[..., sel.compressed_dims()].reshape(b, sq, n_heads, n_comp).transpose(0, 2, 1, 3)
    kp_heads = k_p.reshape(b, t, n_heads, n_keep).transpose(0, 2, 1, 3)
    w_uk_heads = w.w_uk.reshape(w.d_latent, n_heads, n_comp)

    absorbed_q = np.einsum("bhsn,lhn->bhsl", q_comp, w_uk_heads)
    scores = kp_heads.transpose(0, 1, 3, 2)
    scores = q_keep @ scores + np.einsum("bhsl,btl->bhst", absorbed_q, c_kv)
    scores = scores / math.sqrt(d_head)
    mask = attention_mask(sq, t, causal, past, key_mask)
    scores = np.where(mask[:, None], scores, -np.inf)
    probs = softmax_rows(scores)

    latent_out = np.einsum("bhst,btl->bhsl", probs, c_kv)
    w_uv_heads = w.w_uv.reshape(w.d_latent, n_heads, d_head)
    heads = np.einsum("bhsl,lhe->bhse", latent_out, w_uv_heads)
    out = _merge_heads(heads) + w.b_v
    y = out @ w.w_o + w.b_o
    return y[0] if squeeze else y


def attend(x_q, x_kv, w, causal=False, cache=None, key_mask=None, absorbed=False):
    """Dispatch to the right attention routine for ``w``."""
    if isinstance(w, MlaLayerWeights):
        fn = mla_attend_absorbed if absorbed else mla_attend
        return fn(x_q, x_kv, w, causal, cache, key_mask)
    return mha_attend(x_q, x_kv, w, causal, cache, key_mask)


def layer_weights(params, site, cfg, selection=None):
    """Build the weight object for ``site`` from a flat parameter dict."""
    if cfg.variant == "mha":
        return MhaLayerWeights(n_heads=cfg.n_heads, **{f: params[f"{site}.{f}"] for f in MHA_FIELDS})
    if selection is None:
        raise ConfigurationError(f"{site} is MLA but has no subspace selection")
    if selection.r != cfg.r_per_head:
        raise ConfigurationError(f"{site}: selection keeps {selection.r} subspaces per head, "
                                 f"config says {cfg.r_per_head}")
    return MlaLayerWeights(selection=selection, **{f: params[f"{site}.{f}"] for f in MLA_FIELDS})


def attention_forward_train(w, x_q, x_kv, mask):
    """Batched forward that keeps what :func:`attention_backward` needs."""
    d = w.d_model
    n_heads = w.selection.head_count if isinstance(w, MlaLayerWeights) else w.n_heads
    scale = 1.0 / math.sqrt(d // n_heads)
    q = x_q @ w.w_q + w.b_q
    tape = {"x_q": x_q, "x_kv": x_kv, "n_heads": n_heads, "scale": scale}
    if isinstance(w, MlaLayerWeights):
        c = x_kv @ w.w_dkv
        k = w.assemble_keys(x_kv @ w.w_kp, c @ w.w_uk)
        v = c @ w.w_uv + w.b_v
        tape["c"] = c
    else:
        k = x_kv @ w.w_k
        v = x_kv @ w.w_v + w.b_v
    o, probs = sdpa(q, k, v, n_heads, scale, mask)
    tape.update(q=q, k=k, v=v, o=o, probs=probs)
    return o @ w.w_o + w.b_o, tape


def _weight_grad(x, dy):
    rows = x.size // x.shape[-1]
    return x.reshape(rows, x.shape[-1]).T @ dy.reshape(rows, dy.shape[-1])


def attention_backward(w, tape, dy):
    """Gradients for one attention layer.

    Returns
    -------
    dx_q, dx_kv : ndarray
    grads : dict of field name -> ndarray
    """
    x_q, x_kv = tape["x_q"], tape["x_kv"]
    grads = {"w_o": _weight_grad(tape["o"], dy), "b_o": dy.sum(axis=(0, 1))}
    do = dy @ w.w_o.T
    dq, dk, dv = _sdpa_backward(
        do, tape["q"], tape["k"], tape["v"], tape["probs"], tape["n_heads"], tape["scale"]
    )
    grads["w_q"] = _weight_grad(x_q, dq)
    grads["b_q"] = dq.sum(axis=(0, 1))
    grads["b_v"] = dv.sum(axis=(0, 1))
    dx_q = dq @ w.w_q.T
    if isinstance(w, MlaLayerWeights):
        c = tape["c"]
        dkp, dkc = w.split_key_grad(dk)
        grads["w_kp"] = _weight_grad(x_kv, dkp)
        grads["w_uk"] = _weight_grad(c, dkc)
        grads["w_uv"] = _weight_grad(c, dv)
        dc = dkc @ w.w_uk.T + dv @ w.w_uv.T
        grads["w_dkv"] = _weight_grad(x_kv, dc)
        dx_kv = dkp @ w.w_kp.T + dc @ w.w_dkv.T
    else:
        grads["w_k"] = _weight_grad(x_kv, dk)
        grads["w_v"] = _weight_grad(x_kv, dv)
        dx_kv = dk @ w.w_k.T + dv @ w.w_v.T
    return dx_q, dx_kv, grads


def sinusoidal_embedding(max_pos, d_model):
    """Interleaved sinusoidal positions.

    Row ``p`` holds ``sin(p * w_k)`` at column ``2k`` and ``cos(p * w_k)`` at
    ``2k + 1`` with ``w_k = 10000 ** (-2k / d_model)``, so each consecutive
    column pair is one frequency subspace.
    """
    max_pos = check_count(max_pos, "max_pos", minimum=1)
    d_model = check_count(d_model, "d_model", minimum=2)
    if d_model % 2:
        raise ArgumentError(f"d_model must be even, got {d_model}")
    freqs = 10000.0 ** (-2.0 * np.arange(d_model // 2) / d_model)
    angles = np.arange(max_pos)[:, None] * freqs[None, :]
    table = np.empty((max_pos, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table
