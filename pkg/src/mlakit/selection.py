"""Choosing which key frequency subspaces survive compression.

A subspace ``k`` of a head is the dimension pair ``(2k, 2k + 1)``; under
sinusoidal positions that pair carries one sine/cosine frequency.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .validation import check_count


@dataclass(frozen=True)
class SubspaceSelection:
    """Preserved subspace indices, one sorted row per head.

    Attributes
    ----------
    d_head : int
    subspaces : ndarray of shape (n_heads, r), int
    """

    d_head: int
    subspaces: np.ndarray

    def __post_init__(self):
        sub = np.asarray(self.subspaces, dtype=np.int64)
        if sub.ndim != 2:
            raise ArgumentError("subspaces must be (n_heads, r)")
        if self.d_head % 2:
            raise ArgumentError(f"d_head must be even, got {self.d_head}")
        half = self.d_head // 2
        if sub.size and (sub.min() < 0 or sub.max() >= half):
            raise ArgumentError(f"subspace index outside [0, {half})")
        for row in sub:
            if np.any(np.diff(row) <= 0):
                raise ArgumentError("per-head subspaces must be sorted and distinct")
        object.__setattr__(self, "subspaces", sub)

    @property
    def head_count(self):
        return self.subspaces.shape[0]

    @property
    def r(self):
        return self.subspaces.shape[1]

    @property
    def n_preserved(self):
        return 2 * self.r * self.head_count

    def head_dims(self):
        return expand_to_dims(self)

    def global_dims(self):
        """Preserved indices into the d_model key vector, ascending."""
        dims = self.head_dims()
        offsets = np.arange(self.head_count)[:, None] * self.d_head
        return (dims + offsets).ravel()

    def compressed_dims(self):
        """Complement of :meth:`global_dims`, ascending."""
        mask = np.ones(self.head_count * self.d_head, dtype=bool)
        mask[self.global_dims()] = False
        return np.flatnonzero(mask)

    @classmethod
    def empty(cls, n_heads, d_head):
        return cls(d_head, np.zeros((n_heads, 0), dtype=np.int64))

    @classmethod
    def uniform(cls, n_heads, d_head, r):
        row = select_uniform(d_head, r)
        return cls(d_head, np.tile(row, (n_heads, 1)))


@dataclass(frozen=True)
class NormStatistics:
    """Mean per-subspace ``||q|| * ||k||`` for one attention layer.

    ``scores`` has shape (n_heads, d_head // 2); ``sample_count`` is the
    number of (query, key) pairs averaged over.
    """

    scores: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ArgumentError("sample_count must be >= 1")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ArgumentError("scores must be finite and non-negative")

    def merge(self, other):
        total = self.sample_count + other.sample_count
        scores = (self.scores * self.sample_count + other.scores * other.sample_count) / total
        return NormStatistics(scores, total)


def select_uniform(d_head, r):
    """Evenly spaced subspaces ``floor(k * d_head / (2 r))`` for ``0 <= k < r``.

    >>> select_uniform(64, 4).tolist()
    [0, 8, 16, 24]
    """
    d_head = check_count(d_head, "d_head", minimum=2)
    if d_head % 2:
        raise ArgumentError(f"d_head must be even, got {d_head}")
    r = check_count(r, "r", minimum=1, maximum=d_head // 2)
    k = np.arange(r, dtype=np.int64)
    return (k * d_head) // (2 * r)


def select_2norm(stats, r):
    """Per head, the ``r`` highest-scoring subspaces (lowest index wins ties).

    Parameters
    ----------
    stats : NormStatistics or ndarray of shape (n_heads, d_head // 2)
    r : int

    Returns
    -------
    SubspaceSelection
    """
    scores = np.asarray(getattr(stats, "scores", stats), dtype=np.float64)
    if scores.ndim != 2:
        raise ArgumentError("scores must be (n_heads, n_subspaces)")
    half = scores.shape[1]
    r = check_count(r, "r", minimum=0, maximum=half)
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :r]
    return SubspaceSelection(2 * half, np.sort(order, axis=1))


def expand_to_dims(sel):
    """Map each subspace ``k`` to the head-local dimensions ``2k, 2k + 1``."""
    sub = sel.subspaces
    dims = np.empty((sub.shape[0], 2 * sub.shape[1]), dtype=np.int64)
    dims[:, 0::2] = 2 * sub
    dims[:, 1::2] = 2 * sub + 1
    return dims


def _subspace_norms(x):
    """(..., d_head) -> (..., d_head // 2) pairwise 2-norms."""
    pairs = x.reshape(*x.shape[:-1], x.shape[-1] // 2, 2)
    return np.sqrt(np.sum(pairs * pairs, axis=-1))


def pair_norm_statistics(q, k, pair_mask):
    """Average ``||q_i^[2s,2s+1]|| * ||k_j^[2s,2s+1]||`` over allowed pairs.

    Parameters
    ----------
    q : ndarray (B, H, Sq, d_head)
    k : ndarray (B, H, Sk, d_head)
    pair_mask : bool ndarray (B, Sq, Sk)
        True where query ``i`` may attend to key ``j``.
    """
    count = int(pair_mask.sum())
    if count == 0:
        raise ArgumentError("no query/key pairs to average over")
    qn = _subspace_norms(q)
    kn = _subspace_norms(k)
    total = np.einsum("bij,bhis,bhjs->hs", pair_mask.astype(np.float64), qn, kn)
    return NormStatistics(total / count, count)


def collect_norm_statistics(model, calibration, sites=None):
    """Run the original MHA model on calibration pairs and score subspaces.

    Parameters
    ----------
    model : Seq2SeqModel
        Must use MHA at every requested site.
    calibration : sequence of (source_tokens, target_tokens)
    sites : iterable of str, optional
        Attention site names such as ``"decoder.layers.0.self_attn"``;
        defaults to every site in the model.

    Returns
    -------
    dict mapping site name to NormStatistics
    """
    calibration = list(calibration)
    if not calibration:
        raise ArgumentError("calibration set is empty")
    wanted = list(model.spec.site_names()) if sites is None else list(sites)
    unknown = set(wanted) - set(model.spec.site_names())
    if unknown:
        raise ArgumentError(f"unknown attention sites: {sorted(unknown)}")
    stats = {}
    for src, tgt in calibration:
        captured = model.capture_qk([src], [tgt])
        for site in wanted:
            q, k, mask = captured[site]
            s = pair_norm_statistics(q, k, mask)
            stats[site] = s if site not in stats else stats[site].merge(s)
    return stats
