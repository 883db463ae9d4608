"""Input validation helpers shared by the estimators and the command line."""

import numpy as np

from .exceptions import ContractViolation, DataError


def check_mel(mel, n_mels=None, min_frames=1):
    """Return ``mel`` as a finite float32 ``[T, M]`` array or raise ``DataError``."""
    arr = np.asarray(mel, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"mel must be a [T, M] matrix, got shape {arr.shape}")
    if len(arr) < min_frames:
        raise DataError(f"mel has {len(arr)} frames, need at least {min_frames}")
    if n_mels is not None and arr.shape[1] != n_mels:
        raise DataError(f"mel has {arr.shape[1]} bins, model expects {n_mels}")
    if not np.all(np.isfinite(arr)):
        raise DataError("mel contains non-finite values")
    return arr


def check_mels(mels, n_mels=None):
    mels = [check_mel(m, n_mels) for m in mels]
    if not mels:
        raise DataError("no training mels supplied")
    return mels


def check_same_length(*seqs):
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ContractViolation(f"inputs have mismatched lengths {sorted(lengths)}")
