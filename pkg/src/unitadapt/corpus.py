"""Data ingestion and persistence: manifests, toy corpora, mel/feature files, checkpoints."""

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import MelConfig, wav_to_mel  # noqa: F401  (re-exported)
from .exceptions import CheckpointError, DataError, MissingBaseError

logger = logging.getLogger(__name__)

DEFAULT_MEL_CONFIG = MelConfig()
FORMAT_VERSION = 1
_MAGIC = b"UADAPT\x00"


# -- versioned binary container ---------------------------------------------

def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, kind, arrays, meta=None):
    """Serialise named arrays plus JSON metadata; the payload is SHA-256 checked."""
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"kind": kind, "version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries,
              "sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True).encode()
    _atomic_write(path, _MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def read_container(path, kind=None):
    """Inverse of :func:`write_container`; returns ``(arrays, meta)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such file: {path}")
    blob = path.read_bytes()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a unitadapt container")
    n = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[n:n + 8])
    try:
        header = json.loads(blob[n + 8:n + 8 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt header in {path}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    payload = blob[n + 8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- mel / feature / codebook files -------------------------------------------

def write_mel(path, mel, mel_config_hash=None, meta=None):
    mel = np.asarray(mel, dtype=np.float32)
    info = {"T": int(mel.shape[0]), "M": int(mel.shape[1]),
            "mel_config_hash": mel_config_hash or DEFAULT_MEL_CONFIG.digest()}
    info.update(meta or {})
    write_container(path, "mel", {"mel": mel}, info)


def read_mel(path, with_meta=False):
    arrays, meta = read_container(path, "mel")
    return (arrays["mel"], meta) if with_meta else arrays["mel"]


def write_feature_file(path, frames):
    f = np.asarray(frames.f)
    write_container(path, "features", {"f": f},
                    {"T_feat": int(f.shape[0]), "D_feat": int(f.shape[1]),
                     "frame_rate": float(frames.frame_rate_hz)})


def read_feature_file(path):
    from .units import FeatureFrames

    arrays, meta = read_container(path, "features")
    return FeatureFrames(arrays["f"], meta["frame_rate"])


def save_codebook(path, codebook, meta=None):
    c = codebook.centroids
    info = {"K": int(c.shape[0]), "D_feat": int(c.shape[1]), "extractor_id": codebook.extractor_id}
    info.update(meta or {})
    write_container(path, "codebook", {"centroids": c}, info)


def load_codebook(path):
    from .units import Codebook

    arrays, meta = read_container(path, "codebook")
    return Codebook(arrays["centroids"], meta["extractor_id"])


def load_utterance_mel(path, mel_config=DEFAULT_MEL_CONFIG):
    """Mel matrix for a manifest path: a mel container or a WAV file."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        from scipy.io import wavfile

        rate, y = wavfile.read(path)
        if np.issubdtype(y.dtype, np.integer):
            y = y / float(np.iinfo(y.dtype).max)
        return wav_to_mel(y, mel_config, sample_rate_hz=rate).astype(np.float32)
    return read_mel(path)


# -- manifests ------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    speaker: str
    duration: float = 0.0
    transcript: str = None
    tokens: list = None

    def to_record(self):
        rec = {"id": self.id, "path": self.path, "speaker": self.speaker, "duration": self.duration}
        if self.transcript is not None:
            rec["transcript"] = self.transcript
        if self.tokens is not None:
            rec["tokens"] = [int(t) for t in self.tokens]
        return rec


def write_manifest(path, entries):
    lines = [json.dumps(e.to_record(), sort_keys=True) for e in entries]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path, require_transcripts=False):
    """Parse a line-delimited manifest; paths are resolved against its directory.

    Duplicate ids, dangling paths and (optionally) missing transcripts are
    rejected before any work starts.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(**rec)
        except (ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        if entry.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utterance id {entry.id!r}")
        seen.add(entry.id)
        full = Path(entry.path)
        if not full.is_absolute():
            full = path.parent / full
        if not full.exists():
            raise DataError(f"{path}:{lineno}: missing file {full}")
        entry.path = str(full)
        if require_transcripts and entry.transcript is None and entry.tokens is None:
            raise DataError(f"{path}:{lineno}: utterance {entry.id!r} has no transcript")
        entries.append(entry)
    if not entries:
        raise DataError(f"manifest {path} is empty")
    return entries


# -- tokenizer --------------------------------------------------------------

class CharTokenizer:
    """Character-level tokenizer; pre-tokenised id lists pass through unchanged."""

    SYMBOLS = "_ abcdefghijklmnopqrstuvwxyz'.,?!-"

    def __init__(self, symbols=SYMBOLS):
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, text):
        if not isinstance(text, str):
            ids = np.asarray(text, dtype=np.int64)
            if np.any((ids < 0) | (ids >= len(self))):
                raise DataError("token id outside the vocabulary")
            return ids
        ids = [self._index[ch] for ch in text.lower() if ch in self._index]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids):
        return "".join(self.symbols[i] for i in ids)


# -- synthetic corpus -------------------------------------------------------

@dataclass
class ToyUtterance:
    id: str
    speaker: str
    text: str
    tokens: np.ndarray
    durations: np.ndarray
    mel: np.ndarray


@dataclass
class ToyCorpus:
    utterances: list
    speakers: list
    heldout_speakers: list
    templates: np.ndarray
    gains: dict = field(default_factory=dict)
    offsets: dict = field(default_factory=dict)
    n_mels: int = 16

    def by_speaker(self, speaker):
        return [u for u in self.utterances if u.speaker == speaker]

    @property
    def train(self):
        return [u for u in self.utterances if u.speaker in self.speakers]

    @property
    def heldout(self):
        return [u for u in self.utterances if u.speaker in self.heldout_speakers]

    def profile(self, speaker):
        """Per-bin mean over every frame of a speaker's utterances."""
        return np.concatenate([u.mel for u in self.by_speaker(speaker)]).mean(0)


def make_toy_corpus(n_speakers=2, n_utts=20, seed=0, n_mels=16, n_phones=10, n_heldout=1,
                    margin=3.0, noise=0.1, min_tokens=3, max_tokens=7, min_dur=2, max_dur=5,
                    offset_scale=1.0, tokenizer=None):
    """Synthetic multi-speaker corpus of phone-template mels.

    Each phone (a lowercase letter) owns a random spectral template; a
    speaker colours it with a gain and a per-bin offset, so frame ``j`` of a
    token ``p`` is ``gain * template[p] + offset + noise``. Speaker mean
    profiles are pairwise at least ``margin`` apart in L2. Every speaker
    reads the same ``n_utts`` sentences. ``n_heldout`` extra speakers are
    generated for adaptation experiments.
    """
    if n_speakers < 2:
        raise DataError("the toy corpus needs at least two speakers")
    tok = tokenizer or CharTokenizer()
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"[:n_phones]
    ids = tok.encode(letters)
    templates = np.zeros((len(tok), n_mels))
    templates[ids] = rng.normal(0.0, 1.0, (n_phones, n_mels))

    names = [f"spk{i}" for i in range(n_speakers)] + [f"new{i}" for i in range(n_heldout)]
    gains, offsets = {}, {}
    for name in names:
        for _ in range(1000):
            off = rng.normal(0.0, offset_scale, n_mels)
            if all(np.linalg.norm(off - o) >= margin for o in offsets.values()):
                break
        else:
            raise DataError("could not place speaker offsets at the requested margin")
        offsets[name] = off
        gains[name] = float(rng.uniform(0.85, 1.15))

    # one shared sentence pool read by every speaker, so content never identifies the speaker
    sentences = []
    for _ in range(n_utts):
        n_tok = int(rng.integers(min_tokens, max_tokens + 1))
        seq = [int(rng.integers(n_phones))]
        while len(seq) < n_tok:
            p = int(rng.integers(n_phones))
            if p != seq[-1]:
                seq.append(p)
        sentences.append("".join(letters[p] for p in seq))

    utts = []
    for name in names:
        for k, text in enumerate(sentences):
            tokens = tok.encode(text)
            d = rng.integers(min_dur, max_dur + 1, size=len(tokens))
            frames = np.repeat(templates[tokens], d, axis=0)
            mel = gains[name] * frames + offsets[name] + rng.normal(0.0, noise, frames.shape)
            utts.append(ToyUtterance(f"{name}_{k:03d}", name, text, tokens, d.astype(np.int64),
                                     mel.astype(np.float32)))
    return ToyCorpus(utts, names[:n_speakers], names[n_speakers:], templates, gains, offsets, n_mels)


def write_toy_corpus(corpus, out_dir):
    """Write mel files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for u in corpus.utterances:
        rel = f"mels/{u.id}.mel"
        write_mel(out / rel, u.mel, meta={"speaker": u.speaker})
        secs = len(u.mel) * DEFAULT_MEL_CONFIG.hop_length / DEFAULT_MEL_CONFIG.sample_rate_hz
        entries.append(ManifestEntry(u.id, rel, u.speaker, round(secs, 4), u.text))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    heldout = [e for e in entries if e.speaker in corpus.heldout_speakers]
    write_manifest(out / "train.jsonl", [e for e in entries if e.speaker in corpus.speakers])
    if heldout:
        write_manifest(out / "heldout.jsonl", heldout)
    return manifest


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, state, meta=None, base=None):
    """Write a parameter checkpoint.

    ``state`` maps ``"group/param"`` names to arrays. With ``base`` (a path
    to a full checkpoint) the file is an adapted checkpoint: it stores only
    the groups it carries and records the base file's digest.
    """
    info = dict(meta or {})
    if base is not None:
        info["base"] = {"path": str(base), "sha256": file_digest(base)}
    write_container(path, "adapted" if base is not None else "checkpoint",
                    {k: np.asarray(v) for k, v in state.items()}, info)


def resolve_base(path, meta):
    """Locate and verify the base checkpoint an adapted checkpoint refers to."""
    ref = meta["base"]
    base_path = Path(ref["path"])
    if not base_path.exists():
        # fall back to a sibling file of the same name (checkpoints moved together)
        base_path = Path(path).parent / base_path.name
    if not base_path.exists():
        raise MissingBaseError(f"adapted checkpoint {path} needs base {ref['path']}, which is missing")
    if file_digest(base_path) != ref["sha256"]:
        raise MissingBaseError(f"base checkpoint {base_path} does not match the recorded digest")
    return base_path


def load_checkpoint(path):
    """Read a checkpoint; adapted checkpoints are resolved against their base.

    Returns ``(state, meta)`` where ``state`` holds every array (base arrays
    overridden by the adapted ones).
    """
    arrays, meta = read_container(path)
    if "base" not in meta:
        return arrays, meta
    state, base_meta = load_checkpoint(resolve_base(path, meta))
    state.update(arrays)
    merged = dict(base_meta)
    merged.update(meta)
    return state, merged
