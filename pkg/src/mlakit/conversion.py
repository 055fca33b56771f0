"""MHA -> MLA weight conversion by key splitting and joint SVD.

For each converted layer the key projection is split column-wise into the
preserved block ``w_kp`` and the compressible block ``w_kc``; ``[w_kc | w_v]``
is factorised once, giving a shared latent down-projection ``w_dkv`` and the
up-projections ``w_uk`` / ``w_uv``. Queries, output projections and biases
are copied unchanged.
"""

from dataclasses import dataclass

import numpy as np

from .attention import MHA_FIELDS, MLA_FIELDS, AttentionConfig, MhaLayerWeights, MlaLayerWeights
from .checkpoint import Checkpoint
from .errors import ArgumentError, ConfigurationError
from .linalg import truncated_svd
from .model import Seq2SeqModel
from .selection import SubspaceSelection, collect_norm_statistics, select_2norm
from .validation import check_count, check_matrix

STRATEGIES = ("full_compression", "uniform", "two_norm")
PLACEMENTS = ("full", "dso")


@dataclass(frozen=True)
class ConversionSpec:
    """What to convert and how.

    ``calibration`` is a sequence of ``(source, target)`` token pairs and is
    required exactly when ``strategy == "two_norm"``.
    """

    strategy: str = "uniform"
    d_latent: int = 8
    r_per_head: int = 1
    placement: str = "dso"
    calibration: tuple = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}")
        check_count(self.d_latent, "d_latent", minimum=1)
        check_count(self.r_per_head, "r_per_head", minimum=0)
        if self.strategy == "full_compression" and self.r_per_head != 0:
            raise ConfigurationError("full_compression preserves no dimensions (r_per_head=0)")
        if self.strategy != "full_compression" and self.r_per_head < 1:
            raise ConfigurationError(f"{self.strategy} needs r_per_head >= 1")
        if self.strategy == "two_norm" and not self.calibration:
            raise ConfigurationError("calibration required for the two_norm strategy")
        if self.strategy != "two_norm" and self.calibration:
            raise ConfigurationError("calibration is only used by the two_norm strategy")

    def attention_config(self, d_model, n_heads):
        variant = "mla_full" if self.strategy == "full_compression" else "mla_preserving"
        return AttentionConfig(d_model, n_heads, variant, self.d_latent, self.r_per_head)

    def sites(self, model_spec):
        for site in model_spec.site_names():
            if self.placement == "full" or model_spec.site_kind(site) == "decoder_self":
                yield site

    def record(self):
        return {
            "strategy": self.strategy,
            "d_latent": self.d_latent,
            "r_per_head": self.r_per_head,
            "placement": self.placement,
            "calibration_samples": len(self.calibration) if self.calibration else 0,
        }


def split_key_projection(w_k, head_dims):
    """Split key columns into preserved and compressible blocks.

    Parameters
    ----------
    w_k : ndarray (d_model, d_model)
    head_dims : int array (n_heads, m)
        Head-local preserved dimensions; head ``h`` dim ``j`` is global
        column ``h * d_head + j``.

    Returns
    -------
    w_kp, w_kc : ndarray
        Both with columns in ascending global order.
    """
    w_k = check_matrix(w_k, "w_k")
    dims = np.asarray(head_dims, dtype=np.int64)
    if dims.ndim != 2 or dims.shape[0] < 1:
        raise ArgumentError("head_dims must be (n_heads, m)")
    d_model = w_k.shape[1]
    n_heads = dims.shape[0]
    if d_model % n_heads:
        raise ArgumentError("d_model is not divisible by the number of heads")
    d_head = d_model // n_heads
    if dims.size and (dims.min() < 0 or dims.max() >= d_head):
        raise ArgumentError(f"preserved dimension outside [0, {d_head})")
    if any(len(set(row.tolist())) != len(row) for row in dims):
        raise ArgumentError("duplicate preserved dimension")
    preserved = np.sort((dims + np.arange(n_heads)[:, None] * d_head).ravel())
    mask = np.ones(d_model, dtype=bool)
    mask[preserved] = False
    return np.ascontiguousarray(w_k[:, preserved]), np.ascontiguousarray(w_k[:, mask])


def joint_svd_factorize(w_kc, w_v, d_latent):
    """Shared-latent factorisation of ``[w_kc | w_v]``.

    With ``U S V^T`` the rank-``d_latent`` truncated SVD, returns
    ``w_dkv = U S^1/2`` and ``S^1/2 V^T`` split column-wise into ``w_uk``
    (first ``cols(w_kc)`` columns) and ``w_uv`` (the rest).
    """
    w_kc = check_matrix(w_kc, "w_kc")
    w_v = check_matrix(w_v, "w_v")
    if w_kc.shape[0] != w_v.shape[0]:
        raise ArgumentError("w_kc and w_v must have the same row count")
    joint = np.hstack([w_kc, w_v])
    limit = min(joint.shape)
    if not 1 <= d_latent <= limit:
        raise ArgumentError(f"d_latent must lie in [1, {limit}], got {d_latent}")
    f = truncated_svd(joint, d_latent)
    root = np.sqrt(f.s)
    w_dkv = f.u * root
    up = root[:, None] * f.v.T
    n_kc = w_kc.shape[1]
    return w_dkv, np.ascontiguousarray(up[:, :n_kc]), np.ascontiguousarray(up[:, n_kc:])


def convert_layer(w, cfg, sel):
    """Convert one MHA layer into MLA weights for ``cfg``."""
    if not isinstance(w, MhaLayerWeights):
        raise ConfigurationError("convert_layer expects MHA weights")
    if not cfg.is_mla:
        raise ConfigurationError("target config must be an MLA variant")
    if sel.r != cfg.r_per_head or sel.head_count != cfg.n_heads or sel.d_head != cfg.d_head:
        raise ConfigurationError("selection does not match the attention config")
    w_kp, w_kc = split_key_projection(w.w_k, sel.head_dims())
    w_dkv, w_uk, w_uv = joint_svd_factorize(w_kc, w.w_v, cfg.d_latent)
    return MlaLayerWeights(
        w_q=w.w_q.copy(), b_q=w.b_q.copy(), w_kp=w_kp, w_dkv=w_dkv, w_uk=w_uk,
        w_uv=w_uv, b_v=w.b_v.copy(), w_o=w.w_o.copy(), b_o=w.b_o.copy(), selection=sel,
    )


def joint_relative_error(w, mla):
    """Relative Frobenius error of the rebuilt ``[w_kc | w_v]`` block."""
    _, w_kc = split_key_projection(w.w_k, mla.selection.head_dims())
    joint = np.hstack([w_kc, w.w_v])
    approx = mla.w_dkv @ np.hstack([mla.w_uk, mla.w_uv])
    return float(np.linalg.norm(joint - approx) / max(np.linalg.norm(joint), 1e-300))


def choose_selections(model, spec):
    """Subspace selection for every site the placement converts."""
    sites = list(spec.sites(model.spec))
    n_heads, d_head = model.spec.n_heads, model.spec.d_head
    if spec.strategy == "full_compression":
        return {s: SubspaceSelection.empty(n_heads, d_head) for s in sites}
    if spec.strategy == "uniform":
        return {s: SubspaceSelection.uniform(n_heads, d_head, spec.r_per_head) for s in sites}
    stats = collect_norm_statistics(model, spec.calibration, sites)
    return {s: select_2norm(stats[s], spec.r_per_head) for s in sites}


def convert_model(ckpt, spec, selections=None, float_dtype=None):
    """Convert the sites chosen by ``spec.placement`` and return a new container.

    Tensors of untouched sites are copied bit-for-bit and keep their on-disk
    dtype; new factor tensors are stored as ``float_dtype`` (default: the
    input container's). The output records the conversion settings,
    per-site reconstruction error and selections.
    """
    model = ckpt.to_model() if isinstance(ckpt, Checkpoint) else ckpt
    for site in model.spec.site_names():
        if model.spec.site_config(site).is_mla:
            raise ConfigurationError(f"{site} is already MLA; conversion expects an MHA model")
    if selections is None:
        selections = choose_selections(model, spec)
    cfg = spec.attention_config(model.spec.d_model, model.spec.n_heads)
    converted, errors = {}, {}
    for site in spec.sites(model.spec):
        w = model.weights(site)
        mla = convert_layer(w, cfg, selections[site])
        converted[site] = mla
        errors[site] = joint_relative_error(w, mla)

    params = {}
    for name, arr in model.params.items():
        site, _, leaf = name.rpartition(".")
        if site in converted:
            if leaf == MHA_FIELDS[0]:
                for f in MLA_FIELDS:
                    params[f"{site}.{f}"] = getattr(converted[site], f)
            continue
        params[name] = arr.copy()

    kinds = {"decoder_self": cfg}
    if spec.placement == "full":
        kinds.update(encoder_self=cfg, cross=cfg)
    new_spec = model.spec.with_sites(**kinds)
    record = spec.record()
    record["sites"] = {s: {"relative_error": errors[s]} for s in converted}
    out = Seq2SeqModel(new_spec, params, {s: selections[s] for s in converted}, record)
    if float_dtype is None:
        float_dtype = ckpt.float_dtype if isinstance(ckpt, Checkpoint) else "f32"
    result = Checkpoint.from_model(out, float_dtype)
    if isinstance(ckpt, Checkpoint):
        kept = {k: ckpt._dtype_of(k, a) for k, a in ckpt.tensors.items() if k in result.tensors}
        result._disk_dtypes.update(kept)
    return result
