"""Small dense linear algebra: a deterministic Jacobi SVD and a stable softmax."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, NumericalError
from .validation import check_count, check_matrix

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m ~= u @ diag(s) @ v.T``.

    Attributes
    ----------
    u : ndarray of shape (m, k)
    s : ndarray of shape (k,)
        Non-negative, non-increasing.
    v : ndarray of shape (n, k)
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self):
        return self.s.shape[0]

    def reconstruct(self):
        return (self.u * self.s) @ self.v.T


@lru_cache(maxsize=None)
def _round_robin(n):
    """Pair schedule covering every (i, j) once per sweep, ``n`` even.

    Each round is a set of disjoint pairs, so all its rotations commute and
    can be applied as one vectorised update.
    """
    order = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = np.array(order[: n // 2])
        right = np.array(order[n // 2 :][::-1])
        rounds.append((np.minimum(left, right), np.maximum(left, right)))
        order = [order[0]] + [order[-1]] + order[1:-1]
    return tuple(rounds)


def _complete_orthonormal(basis, good):
    """Replace the columns of ``basis`` not flagged ``good`` by an orthonormal
    completion drawn from the standard basis (Gram-Schmidt, applied twice)."""
    m = basis.shape[0]
    out = basis.copy()
    kept = [out[:, i] for i in range(out.shape[1]) if good[i]]
    candidate = 0
    for i in range(out.shape[1]):
        if good[i]:
            continue
        while candidate < m:
            vec = np.zeros(m)
            vec[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for q in kept:
                    vec -= (q @ vec) * q
            norm = np.linalg.norm(vec)
            if norm > 0.5:
                vec /= norm
                out[:, i] = vec
                kept.append(vec)
                break
        else:
            raise NumericalError("could not complete orthonormal basis")
    return out


def _one_sided_jacobi(a, max_sweeps):
    """Hestenes one-sided Jacobi on a tall matrix ``a`` (rows >= cols).

    Returns ``(g, v)`` with ``a @ v = g`` and mutually orthogonal columns of
    ``g``; ``v`` is orthogonal.
    """
    m, n = a.shape
    n_pad = n + (n % 2)
    g = np.zeros((m, n_pad))
    g[:, :n] = a
    v = np.eye(n_pad)
    tol = max(m, n_pad) * _EPS
    off = np.inf
    for _ in range(max_sweeps):
        off = 0.0
        for left, right in _round_robin(n_pad):
            gi, gj = g[:, left], g[:, right]
            alpha = np.einsum("ij,ij->j", gi, gi)
            beta = np.einsum("ij,ij->j", gj, gj)
            gamma = np.einsum("ij,ij->j", gi, gj)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            off = max(off, float(ratio.max(initial=0.0)))
            active = ratio > tol
            if not active.any():
                continue
            left, right = left[active], right[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (g, v):
                ci, cj = mat[:, left], mat[:, right]
                mat[:, left] = c * ci - s * cj
                mat[:, right] = s * ci + c * cj
        if off <= tol:
            return g[:, :n], v[:n, :n]
    residual = np.linalg.norm(a @ v[:n, :n] - g[:, :n])
    raise NumericalError(
        f"Jacobi SVD did not converge after {max_sweeps} sweeps "
        f"(off-diagonal ratio {off:.3e}, residual {residual:.3e})"
    )


def truncated_svd(m, rank, max_sweeps=60):
    """Top-``rank`` singular triplets of a dense matrix.

    Uses one-sided Jacobi rotations on the thinner orientation of ``m``.
    The result is deterministic: each column of ``u`` is signed so that its
    largest-magnitude entry is positive (first such entry on ties).

    Parameters
    ----------
    m : array-like of shape (rows, cols)
    rank : int
        Number of triplets, ``1 <= rank <= min(rows, cols)``.
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericalError`.

    Returns
    -------
    SvdFactors
    """
    a = check_matrix(m, "m", allow_empty=False)
    rows, cols = a.shape
    rank = check_count(rank, "rank", minimum=1, maximum=min(rows, cols))

    transposed = rows < cols
    work = a.T if transposed else a
    g, right = _one_sided_jacobi(work, max_sweeps)
    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, g, right = sigma[order], g[:, order], right[:, order]

    cutoff = max(work.shape) * _EPS * (sigma[0] if sigma.size else 0.0)
    good = sigma > cutoff
    left = np.zeros_like(g)
    left[:, good] = g[:, good] / sigma[good]
    left = _complete_orthonormal(left, good)
    sigma = np.where(good, sigma, 0.0)

    u, v = (right, left) if transposed else (left, right)
    u, s, v = u[:, :rank], sigma[:rank], v[:, :rank]
    pivot = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[pivot, np.arange(rank)] < 0, -1.0, 1.0)
    return SvdFactors(u=u * flip, s=s.copy(), v=v * flip)


def softmax_rows(m):
    """Softmax along the last axis with max-subtraction.

    ``-inf`` entries (masked positions) receive zero weight; each row must
    contain at least one finite entry.
    """
    x = np.asarray(m, dtype=np.float64)
    if x.ndim == 0:
        raise ArgumentError("softmax_rows needs at least one axis")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)
