"""Inference: guided reverse diffusion, text-to-speech and voice conversion."""

from dataclasses import dataclass

import numpy as np
import torch

from . import align
from .exceptions import ConfigurationError, ContractViolation, DataError, ModelHealthError
from .nets import durations_from_log
from .schedule import reverse_step, time_grid
from .units import extract_features, squeeze_units

TTS_GAMMA = 1.0
VC_GAMMA = 1.5
N_STEPS = 50


@dataclass
class GuidanceConfig:
    """Classifier-free guidance with the dataset mel mean as the unconditional input."""

    gamma: float = TTS_GAMMA
    c_mel: np.ndarray = None
    n_steps: int = N_STEPS
    temperature: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigurationError(f"gradient scale must be >= 0, got {self.gamma}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"sampling steps must be a positive integer, got {self.n_steps}")
        if self.gamma > 0 and self.c_mel is None:
            raise ConfigurationError("guidance with gamma > 0 needs the dataset mel mean")


def mel_mean(corpus):
    """Per-bin mean over every frame of every mel in ``corpus``."""
    mels = [np.asarray(m, dtype=np.float64) for m in corpus]
    if not mels or sum(len(m) for m in mels) == 0:
        raise DataError("cannot average an empty corpus")
    total = sum(m.sum(0) for m in mels)
    return total / sum(len(m) for m in mels)


def cfg_score(s_cond, s_uncond, gamma):
    """Guided score ``s_cond + gamma * (s_cond - s_uncond)``."""
    if np.shape(s_cond) != np.shape(s_uncond):
        raise ContractViolation("conditional and unconditional scores differ in shape")
    if gamma == 0:
        return s_cond
    return s_cond + gamma * (s_cond - s_uncond)


@torch.no_grad()
def sample_mel(decoder, c_aligned, e_s, guidance, seed=0):
    """Reverse-diffuse from ``N(0, tau^2 I)`` to a mel shaped like ``c_aligned``.

    Runs ``guidance.n_steps`` steps on the grid ``1, 1 - 1/N, ..., 1/N``; the
    last step adds no noise. Deterministic for a given seed.
    """
    c = torch.as_tensor(np.asarray(c_aligned), dtype=torch.float32)
    if c.ndim != 2:
        raise ContractViolation("aligned condition must be [T, M]")
    e = torch.as_tensor(np.asarray(e_s), dtype=torch.float32).reshape(1, -1)
    gen = torch.Generator().manual_seed(int(seed))
    n = guidance.n_steps
    x = torch.randn(c.shape, generator=gen)[None] * guidance.temperature
    guided = guidance.gamma > 0
    if guided:
        c_u = torch.as_tensor(np.asarray(guidance.c_mel), dtype=torch.float32).reshape(1, -1).expand_as(c)
        cond = torch.stack([c, c_u])
        e2 = e.expand(2, -1)
    for i, t in enumerate(time_grid(n)):
        if guided:
            s = decoder(x.expand(2, -1, -1), float(t), cond, e2)
            s = cfg_score(s[:1], s[1:], guidance.gamma)
        else:
            s = decoder(x, float(t), c[None], e)
        z = torch.randn(x.shape, generator=gen) if i < n - 1 else torch.zeros_like(x)
        x = reverse_step(x, float(t), s, z, n, decoder.schedule)
        if not torch.isfinite(x).all():
            raise ModelHealthError("sampler state became non-finite", step=i)
    return x[0].numpy()


@torch.no_grad()
def tts(model, tokens, e_s, guidance, seed=0):
    """Text tokens -> predicted durations -> expanded condition -> sampled mel.

    Returns ``(mel, durations)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise DataError("text-to-speech needs a non-empty token sequence")
    c, hidden = model.text_encoder(torch.as_tensor(tokens))
    d = durations_from_log(model.duration_predictor(hidden)[0]).numpy()
    c_al = align.expand(c[0], d)
    return sample_mel(model.decoder, c_al, e_s, guidance, seed), d


def source_units(source_mel, codebook, extractor_id="mel-frames"):
    """Squeezed units for a source utterance, using the codebook's extractor."""
    if codebook.extractor_id != extractor_id:
        raise ConfigurationError(
            f"codebook was fit on {codebook.extractor_id!r} features, not {extractor_id!r}"
        )
    mel = np.asarray(source_mel)
    feats = extract_features(mel, extractor_id)
    return squeeze_units(feats, codebook, len(mel))


@torch.no_grad()
def vc(model, source_mel, codebook, e_s, guidance, seed=0, extractor_id="mel-frames", units=None):
    """Voice conversion: source units with source durations -> mel in the target voice."""
    mel = np.asarray(source_mel)
    sq = units if units is not None else source_units(mel, codebook, extractor_id)
    if sq.n_frames != len(mel):
        raise ContractViolation("unit durations do not cover the source frames")
    c, _ = model.unit_encoder(torch.as_tensor(sq.u))
    c_al = align.expand(c[0], sq.d_u)
    return sample_mel(model.decoder, c_al, e_s, guidance, seed)
