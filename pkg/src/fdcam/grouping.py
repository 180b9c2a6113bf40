"""Channel similarity and per-channel similarity groups."""
from __future__ import annotations

import json
import math

import numpy as np

from .backend import ActivationStack
from .errors import InputError


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two maps flattened in row-major order.

    Returns 0 when either map has zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    va, vb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def similarity_matrix(acts) -> np.ndarray:
    """``K x K`` cosine similarities between all pairs of channels.

    The result is exactly symmetric; the diagonal is 1 for nonzero channels
    and 0 for all-zero channels.
    """
    data = acts.data if isinstance(acts, ActivationStack) else np.asarray(acts, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1:
        raise InputError(f"expected a K x h x w stack, got shape {data.shape}")
    v = data.reshape(data.shape[0], -1).astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    nonzero = norms > 0
    gram = v @ v.T
    denom = np.outer(norms, norms)
    m = np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0)
    m = np.clip(m, -1.0, 1.0)
    upper = np.triu(m, 1)
    m = upper + upper.T
    m[np.diag_indices_from(m)] = nonzero.astype(np.float64)
    return m


def group_size(num_channels: int, theta: float) -> int:
    """Number of channels in a group: the top ``theta`` percent, at least one."""
    return max(1, math.ceil(theta / 100.0 * num_channels))


def _check(matrix: np.ndarray, theta: float) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
        raise InputError(f"expected a square similarity matrix, got {matrix.shape}")
    if not 0 < theta <= 100:
        raise InputError(f"theta must be in (0, 100], got {theta}")
    return matrix


def _ranked(row: np.ndarray, k: int) -> np.ndarray:
    # anchor first, then descending similarity; stable sort puts smaller indices first on ties
    keyed = -row.copy()
    keyed[k] = -np.inf
    return np.argsort(keyed, kind="stable")


def similarity_group(matrix, k: int, theta: float = 5.0) -> tuple[int, ...]:
    """Channels most similar to anchor ``k``, returned as sorted indices.

    A zero-norm anchor (zero diagonal entry) always gets the singleton group.
    """
    matrix = _check(matrix, theta)
    n = matrix.shape[0]
    if not 0 <= k < n:
        raise InputError(f"channel index {k} out of range [0, {n})")
    if matrix[k, k] == 0:
        return (int(k),)
    members = _ranked(matrix[k], k)[: group_size(n, theta)]
    return tuple(sorted(int(i) for i in members))


def all_groups(matrix, theta: float = 5.0) -> list[tuple[int, ...]]:
    """``similarity_group`` for every anchor, vectorized over rows."""
    matrix = _check(matrix, theta)
    n = matrix.shape[0]
    keyed = -matrix.copy()
    keyed[np.diag_indices(n)] = -np.inf
    order = np.argsort(keyed, axis=1, kind="stable")[:, : group_size(n, theta)]
    zero = np.diag(matrix) == 0
    groups = []
    for k in range(n):
        members = (k,) if zero[k] else tuple(sorted(int(i) for i in order[k]))
        groups.append(members)
    return groups


def singleton_groups(num_channels: int) -> list[tuple[int, ...]]:
    return [(k,) for k in range(num_channels)]


def groups_to_json(groups, theta: float) -> str:
    return json.dumps({"K": len(groups), "theta": float(theta), "groups": [list(g) for g in groups]})
