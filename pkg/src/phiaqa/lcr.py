"""List-wise contrastive regularization.

Feature-space action distances (directed Chamfer sums over clips) are turned
into per-row distributions and aligned with score-space distances through a
symmetric KL divergence.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .errors import ShapeError


def action_distance(F_i, F_j) -> float:
    """sum_m min_n ||F_i[m] - F_j[n]||^2."""
    F_i, F_j = np.asarray(F_i, dtype=float), np.asarray(F_j, dtype=float)
    if F_i.shape != F_j.shape or F_i.ndim != 2:
        raise ShapeError(f"action_distance needs equal (M, D) shapes, got {F_i.shape} and {F_j.shape}")
    diff = F_i[:, None, :] - F_j[None, :, :]
    return float((diff * diff).sum(-1).min(axis=1).sum())


def matched_indices(F_i, F_j) -> np.ndarray:
    """For each clip of F_i, the index of its nearest clip in F_j (ties -> smallest index)."""
    F_i, F_j = np.asarray(F_i, dtype=float), np.asarray(F_j, dtype=float)
    diff = F_i[:, None, :] - F_j[None, :, :]
    return (diff * diff).sum(-1).argmin(axis=1)


def ordering_consistency(F_i, F_j) -> float:
    """Fraction of clip pairs m1 < m2 whose matches keep order (n1 <= n2)."""
    idx = matched_indices(F_i, F_j)
    m1, m2 = np.triu_indices(len(idx), k=1)
    if m1.size == 0:
        return 1.0
    return float(np.mean(idx[m1] <= idx[m2]))


def distance_matrix(batch) -> Tensor:
    """B x B directed action distances of a (B, M, D) stack (or a list of M x D matrices).

    The gradient flows through the selected nearest clip only.
    """
    if isinstance(batch, (list, tuple)):
        batch = np.stack([np.asarray(getattr(f, "data", f), dtype=float) for f in batch])
    F = as_tensor(batch)
    if F.data.ndim != 3:
        raise ShapeError(f"distance_matrix needs a (B, M, D) stack, got {F.shape}")
    B, M, _ = F.shape
    if B < 2:
        raise ShapeError("distance_matrix needs at least two samples")
    x = F.data
    out = np.empty((B, B))
    idx = np.empty((B, B, M), dtype=np.intp)
    picked = np.empty((B, B, M, x.shape[2]))
    rows = np.arange(M)
    for i in range(B):
        diff = x[i][None, :, None, :] - x[:, None, :, :]
        d = (diff * diff).sum(-1)
        best = d.argmin(axis=2)
        idx[i] = best
        out[i] = np.take_along_axis(d, best[..., None], axis=2)[..., 0].sum(axis=1)
        picked[i] = diff[np.arange(B)[:, None], rows[None, :], best]
    np.fill_diagonal(out, 0.0)

    def backward(g):
        gF = 2.0 * np.einsum("ij,ijmd->imd", g, picked)
        onehot = (idx[..., None] == rows).astype(float)
        gF -= 2.0 * np.einsum("ijmn,ijmd->jnd", onehot, g[:, :, None, None] * picked)
        dc._accumulate(F, gF)

    return dc._node(out, (F,), "distance_matrix", backward)


def score_distance_matrix(scores) -> Tensor:
    s = np.asarray(scores, dtype=float).reshape(-1)
    if s.size < 2:
        raise ShapeError("score_distance_matrix needs at least two scores")
    return Tensor(np.abs(s[:, None] - s[None, :]))


def row_to_distribution(row, self_index: int, scale: float = 1.0):
    """Softmax over a row with its self entry removed."""
    row = np.asarray(row, dtype=float)
    if row.size - 1 < 1:
        raise ShapeError("a distance row needs at least one off-diagonal entry")
    rest = np.delete(row, self_index) / scale
    e = np.exp(rest - rest.max())
    return e / e.sum()


def row_distributions(X, normalize: str = "softmax", rescale: bool = True) -> tuple[Tensor, Tensor]:
    """Per-row (probabilities, log-probabilities) over off-diagonal entries.

    With ``rescale`` the matrix is first divided by its mean off-diagonal
    entry, so feature and score distances meet on the same scale.
    """
    X = as_tensor(X)
    off = dc.offdiag(X)
    if rescale:
        B = X.shape[0]
        off = off / (dc.total(off) * (1.0 / (B * (B - 1))) + 1e-12)
    if normalize == "softmax":
        logp = dc.log_softmax_rows(off)
        return dc.exp(logp), logp
    if normalize == "sum":
        shifted = off + 1e-8
        p = shifted / dc.sum_last(shifted, keepdims=True)
        return p, dc.log(p)
    raise ValueError(f"unknown row normalization {normalize!r}")


def lcr_loss(D, S, divergence: str = "kl", normalize: str = "softmax", rescale: bool = True) -> Tensor:
    """Symmetric KL (or mean-squared) alignment of the row distributions of D and S."""
    D, S = as_tensor(D), as_tensor(S)
    if D.shape != S.shape or D.data.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"lcr_loss needs two equal square matrices, got {D.shape} and {S.shape}")
    p, logp = row_distributions(D, normalize, rescale)
    q, logq = row_distributions(S, normalize, rescale)
    if divergence == "kl":
        # KL(q||p) + KL(p||q) = sum (q - p)(log q - log p)
        return dc.total((q - p) * (logq - logp))
    if divergence == "mse":
        return dc.total((q - p) * (q - p)) * (1.0 / (D.shape[1] - 1))
    raise ValueError(f"unknown divergence {divergence!r}")
