"""Monotonic alignment search and duration bookkeeping."""

import math

import numpy as np

from .exceptions import ContractViolation, DataError


def log_prior_gaussian(c, x0):
    """Unit-variance Gaussian log-density of every mel frame under every token.

    Args:
        c: encoder output, shape ``[L, M]``.
        x0: mel frames, shape ``[T, M]``.

    Returns:
        ``[L, T]`` matrix with entry ``-0.5 * ||c_i - x_j||^2 - M/2 * log(2 pi)``.
    """
    c = np.asarray(c, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if c.ndim != 2 or x0.ndim != 2 or c.shape[1] != x0.shape[1]:
        raise ContractViolation(f"feature dimensions differ: {c.shape} vs {x0.shape}")
    m = c.shape[1]
    sq = (c * c).sum(1)[:, None] - 2.0 * c @ x0.T + (x0 * x0).sum(1)[None, :]
    return -0.5 * np.maximum(sq, 0.0) - 0.5 * m * math.log(2.0 * math.pi)


def mas(log_prior):
    """Most likely monotonic, surjective frame-to-token path.

    ``log_prior`` is ``[L, T]``. The returned integer array has one token
    index per frame, starts at 0, ends at ``L - 1`` and advances by at most
    one token per frame. On equal scores the backtrack stays on the current
    token, so tokens advance as late as possible.
    """
    lp = np.asarray(log_prior, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractViolation(f"log prior must be 2-D, got shape {lp.shape}")
    n_tok, n_frames = lp.shape
    if n_tok < 1 or n_tok > n_frames:
        raise DataError(f"no monotonic path for {n_tok} tokens over {n_frames} frames")
    if not np.all(np.isfinite(lp)):
        raise ContractViolation("log prior must be finite")

    neg_inf = -np.inf
    # value[i, j]: best score of frames 0..j ending on token i
    value = np.full((n_tok, n_frames), neg_inf)
    value[0, 0] = lp[0, 0]
    for j in range(1, n_frames):
        prev = value[:, j - 1]
        shifted = np.empty(n_tok)
        shifted[0] = neg_inf
        shifted[1:] = prev[:-1]
        value[:, j] = np.maximum(prev, shifted) + lp[:, j]
        # a token i needs at least i prior frames and must leave room for the rest
        lo = max(0, n_tok - (n_frames - j))
        value[:lo, j] = neg_inf
        value[j + 1:, j] = neg_inf

    path = np.empty(n_frames, dtype=np.int64)
    i = n_tok - 1
    for j in range(n_frames - 1, -1, -1):
        path[j] = i
        if j == 0:
            break
        if i > 0 and (i == j or value[i - 1, j - 1] > value[i, j - 1]):
            i -= 1
    return path


def path_score(log_prior, path):
    lp = np.asarray(log_prior)
    return float(lp[np.asarray(path), np.arange(len(path))].sum())


def check_path(path, n_tok):
    """Raise unless ``path`` is a valid monotonic surjective alignment."""
    path = np.asarray(path)
    if path.ndim != 1 or len(path) < n_tok:
        raise ContractViolation("path shorter than the token count")
    steps = np.diff(path)
    if path[0] != 0 or path[-1] != n_tok - 1 or np.any((steps != 0) & (steps != 1)):
        raise ContractViolation(f"invalid alignment path {path.tolist()}")


def durations_from_path(path, n_tok):
    """Frames per token for an alignment path."""
    path = np.asarray(path, dtype=np.int64)
    return np.bincount(path, minlength=n_tok)[:n_tok].astype(np.int64)


def path_from_durations(d):
    d = check_durations(d)
    return np.repeat(np.arange(len(d)), d)


def check_durations(d, total=None):
    d = np.asarray(d)
    if d.ndim != 1 or len(d) == 0:
        raise ContractViolation("durations must be a non-empty 1-D sequence")
    if not np.issubdtype(d.dtype, np.integer):
        if not np.all(np.equal(np.mod(d, 1), 0)):
            raise ContractViolation("durations must be integers")
        d = d.astype(np.int64)
    if np.any(d <= 0):
        raise ContractViolation(f"every duration must be >= 1, got {d.tolist()}")
    if total is not None and int(d.sum()) != int(total):
        raise ContractViolation(f"durations sum to {int(d.sum())}, expected {total}")
    return d


def expand(seq, d):
    """Repeat row ``i`` of ``seq`` ``d[i]`` times (numpy or torch input)."""
    d = check_durations(d)
    if len(seq) != len(d):
        raise ContractViolation(f"{len(seq)} rows but {len(d)} durations")
    if isinstance(seq, np.ndarray):
        return np.repeat(seq, d, axis=0)
    import torch

    return torch.repeat_interleave(seq, torch.as_tensor(d, device=seq.device), dim=0)
