"""Discrete speech units: feature extraction, K-means, upsampling and run-length coding."""

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ContractViolation, DataError

logger = logging.getLogger(__name__)

DEFAULT_K = 200
KMEANS_TOL = 1e-6


@dataclass
class FeatureFrames:
    f: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.ndim != 2 or len(self.f) < 1:
            raise DataError(f"feature frames must be a non-empty [T, D] matrix, got {self.f.shape}")
        if not np.all(np.isfinite(self.f)):
            raise DataError("feature frames contain non-finite values")

    def __len__(self):
        return len(self.f)


@dataclass
class Codebook:
    centroids: np.ndarray
    extractor_id: str = "mel-frames"

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 2:
            raise ContractViolation("a codebook needs at least two centroid rows")

    @property
    def K(self):
        return len(self.centroids)

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass
class SqueezedUnits:
    u: np.ndarray
    d_u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.int64)
        self.d_u = np.asarray(self.d_u, dtype=np.int64)
        if self.u.shape != self.d_u.shape or self.u.ndim != 1 or len(self.u) == 0:
            raise ContractViolation("units and durations must be equal-length non-empty 1-D arrays")
        if np.any(self.d_u < 1):
            raise ContractViolation("unit durations must be >= 1")
        if np.any(self.u[1:] == self.u[:-1]):
            raise ContractViolation("adjacent squeezed units must differ")

    @property
    def n_frames(self):
        return int(self.d_u.sum())

    def __len__(self):
        return len(self.u)


# -- feature extractors ----------------------------------------------------

_EXTRACTORS = {}


def register_extractor(name):
    def deco(fn):
        _EXTRACTORS[name] = fn
        return fn

    return deco


@register_extractor("mel-frames")
def _mel_frames(mel, frame_rate_hz=None):
    from .corpus import DEFAULT_MEL_CONFIG

    rate = frame_rate_hz or DEFAULT_MEL_CONFIG.frame_rate_hz
    return FeatureFrames(np.array(mel, dtype=np.float64, copy=True), rate)


@register_extractor("mel-cmvn")
def _mel_cmvn(mel, frame_rate_hz=None):
    """Mel frames with per-utterance mean and variance removed per bin.

    Strips most of a speaker's spectral colouring, so clusters track content.
    """
    frames = _mel_frames(mel, frame_rate_hz)
    f = frames.f
    std = f.std(0)
    frames.f = (f - f.mean(0)) / np.where(std > 1e-8, std, 1.0)
    return frames


@register_extractor("precomputed")
def _precomputed(source, frame_rate_hz=None):
    from .corpus import read_feature_file

    if isinstance(source, FeatureFrames):
        return FeatureFrames(source.f.copy(), source.frame_rate_hz)
    return read_feature_file(source)


def available_extractors():
    return sorted(_EXTRACTORS)


def extract_features(audio_or_mel, extractor_id="mel-frames", **kwargs):
    """Run a registered feature extractor.

    ``"mel-frames"`` returns the mel itself; ``"precomputed"`` reads a
    feature file (or passes a ``FeatureFrames`` through unchanged).
    """
    try:
        fn = _EXTRACTORS[extractor_id]
    except KeyError:
        raise ConfigurationError(
            f"unknown feature extractor {extractor_id!r}; known: {available_extractors()}"
        ) from None
    return fn(audio_or_mel, **kwargs)


# -- K-means ---------------------------------------------------------------

def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than clusters so far; pick any unused point
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features, K=DEFAULT_K, max_iters=100, seed=0, return_history=False):
    """Lloyd's algorithm with k-means++ seeding.

    ``features`` is a ``FeatureFrames``, a matrix, or a list of either; all
    frames are pooled. Iteration stops after ``max_iters`` or when inertia
    changes by less than ``1e-6`` relative. Empty clusters are re-seeded
    from the point farthest from its centroid.
    """
    x = _pool(features)
    if K < 2:
        raise DataError("K-means needs K >= 2")
    if len(x) < K:
        raise DataError(f"{len(x)} frames cannot fill {K} clusters")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, K, rng)

    history = []
    labels = None
    for it in range(max_iters):
        d = _sq_dists(x, centroids)
        labels = d.argmin(1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise FloatingPointError(f"K-means inertia increased at iteration {it}")
        history.append(inertia)
        if len(history) > 1 and abs(history[-2] - inertia) <= KMEANS_TOL * max(history[-2], 1e-300):
            break
        point_d = d[np.arange(len(x)), labels].copy()
        new = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=K)
        np.add.at(new, labels, x)
        for k in np.flatnonzero(counts == 0):
            far = int(point_d.argmax())
            new[k] = x[far]
            counts[k] = 1
            point_d[far] = 0.0
            logger.debug("re-seeded empty cluster %d from frame %d", k, far)
        nonempty = np.bincount(labels, minlength=K) > 0
        new[nonempty] /= counts[nonempty, None]
        if inertia == 0.0:
            break
        centroids = new
    _dedupe(centroids, x, rng)
    if return_history:
        return centroids, history
    return centroids


def _dedupe(centroids, x, rng):
    """Keep centroid rows pairwise distinct (only triggered by duplicate data)."""
    _, first = np.unique(centroids, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(len(centroids)), first)
    for k in dup:
        for _ in range(100):
            cand = x[rng.integers(len(x))]
            if not np.any(np.all(centroids == cand, axis=1)):
                centroids[k] = cand
                break
        else:
            centroids[k] = centroids[k] + 1e-6 * (k + 1)


def _pool(features):
    if isinstance(features, FeatureFrames):
        return features.f
    if isinstance(features, np.ndarray) and features.ndim == 2:
        return features.astype(np.float64)
    mats = [f.f if isinstance(f, FeatureFrames) else np.asarray(f, dtype=np.float64) for f in features]
    if not mats:
        raise DataError("no feature frames supplied")
    return np.concatenate(mats, axis=0)


def assign(features, codebook):
    """Nearest-centroid label per frame; ties go to the lowest index."""
    x = features.f if isinstance(features, FeatureFrames) else np.asarray(features, dtype=np.float64)
    c = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ContractViolation(f"feature dim {x.shape[-1]} does not match codebook dim {c.shape[1]}")
    # exact differences rather than the expanded dot-product form, so exact
    # ties resolve deterministically
    out = np.empty(len(x), dtype=np.int64)
    step = max(1, 2**22 // max(1, c.size))
    for s in range(0, len(x), step):
        d = ((x[s:s + step, None, :] - c[None, :, :]) ** 2).sum(-1)
        out[s:s + step] = d.argmin(1)
    return out


# -- sequence operations ---------------------------------------------------

def upsample_to_mel(unit_ids, n_mel):
    """Nearest-neighbour upsampling: ``out[j] = ids[floor(j * T_feat / T_mel)]``."""
    ids = np.asarray(unit_ids, dtype=np.int64)
    n_feat = len(ids)
    if n_feat < 1:
        raise DataError("cannot upsample an empty unit sequence")
    if n_mel < n_feat:
        raise DataError(f"downsampling {n_feat} -> {n_mel} frames is not supported")
    return ids[(np.arange(n_mel) * n_feat) // n_mel]


def rle_compress(frame_units):
    x = np.asarray(frame_units, dtype=np.int64)
    if x.ndim != 1 or len(x) == 0:
        raise DataError("cannot compress an empty unit sequence")
    starts = np.flatnonzero(np.r_[True, x[1:] != x[:-1]])
    d = np.diff(np.r_[starts, len(x)])
    return SqueezedUnits(x[starts], d)


def rle_expand(sq):
    return np.repeat(sq.u, sq.d_u)


def squeeze_units(features, codebook, n_mel):
    """Full pipeline: assign, upsample to mel length, run-length compress."""
    return rle_compress(upsample_to_mel(assign(features, codebook), n_mel))
