"""Neural components: sequence encoders, duration predictor, speaker table and score decoder.

All modules use batch-first ``[B, T, C]`` tensors at their public surface and
boolean masks where ``True`` marks a valid position.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ContractViolation, ModelHealthError
from .schedule import NoiseSchedule

PARAM_GROUPS = ("text_encoder", "unit_encoder", "duration_predictor", "decoder", "speaker_table")


def sequence_mask(lengths, max_len=None):
    lengths = torch.as_tensor(lengths)
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoidal_embedding(x, dim, scale=1000.0):
    """Sinusoidal features of a real scalar per batch row."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / max(half - 1, 1))
    args = scale * x[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


def positional_encoding(n_pos, dim, dtype=torch.float32):
    pos = torch.arange(n_pos, dtype=dtype)
    return sinusoidal_embedding(pos, dim, scale=1.0)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a ``[B, C, T]`` tensor (no mixing across time)."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ConvAttentionBlock(nn.Module):
    def __init__(self, hidden, n_heads, kernel_size, dropout=0.0):
        super().__init__()
        self.conv = nn.Conv1d(hidden, hidden, kernel_size, padding=kernel_size // 2)
        self.norm1 = ChannelNorm(hidden)
        self.attn = nn.MultiheadAttention(hidden, n_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.ReLU(), nn.Linear(2 * hidden, hidden))
        self.norm3 = nn.LayerNorm(hidden)

    def forward(self, h, mask):
        # h: [B, L, H]
        m = mask[..., None].to(h.dtype)
        y = self.conv((h * m).transpose(1, 2))
        h = self.norm1((h.transpose(1, 2) + F.relu(y))).transpose(1, 2) * m
        a, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        h = self.norm2(h + a) * m
        h = self.norm3(h + self.ffn(h)) * m
        return h


class SequenceEncoder(nn.Module):
    """Token sequence to mel-space condition; shared by the text and unit encoders.

    Only the vocabulary size differs between the two uses.
    """

    def __init__(self, vocab_size, n_mels, hidden=128, n_blocks=2, n_heads=2, kernel_size=3):
        super().__init__()
        if hidden % n_heads:
            raise ContractViolation("hidden size must be divisible by the head count")
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embed = nn.Embedding(vocab_size, hidden)
        nn.init.normal_(self.embed.weight, 0.0, hidden ** -0.5)
        self.blocks = nn.ModuleList(ConvAttentionBlock(hidden, n_heads, kernel_size) for _ in range(n_blocks))
        self.proj = nn.Linear(hidden, n_mels)

    def forward(self, tokens, mask=None):
        """Returns ``(condition [B, L, M], hidden [B, L, H])``."""
        tokens = torch.as_tensor(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab_size):
            raise ContractViolation(f"token ids must lie in [0, {self.vocab_size})")
        if mask is None:
            mask = torch.ones(tokens.shape, dtype=torch.bool, device=tokens.device)
        w = self.embed.weight
        h = self.embed(tokens) * math.sqrt(self.hidden)
        h = h + positional_encoding(tokens.shape[1], self.hidden, w.dtype).to(w.device)[None]
        h = h * mask[..., None].to(h.dtype)
        for block in self.blocks:
            h = block(h, mask)
        return self.proj(h) * mask[..., None].to(h.dtype), h


class DurationPredictor(nn.Module):
    """Predicts log-durations from (detached) encoder hidden states."""

    def __init__(self, hidden, filter_channels=None, kernel_size=3):
        super().__init__()
        fc = filter_channels or hidden
        self.conv1 = nn.Conv1d(hidden, fc, kernel_size, padding=kernel_size // 2)
        self.norm1 = ChannelNorm(fc)
        self.conv2 = nn.Conv1d(fc, fc, kernel_size, padding=kernel_size // 2)
        self.norm2 = ChannelNorm(fc)
        self.out = nn.Linear(fc, 1)

    def forward(self, hidden, mask=None):
        if mask is None:
            mask = torch.ones(hidden.shape[:2], dtype=torch.bool, device=hidden.device)
        m = mask[:, None, :].to(hidden.dtype)
        x = hidden.transpose(1, 2) * m
        x = self.norm1(F.relu(self.conv1(x))) * m
        x = self.norm2(F.relu(self.conv2(x))) * m
        return self.out(x.transpose(1, 2)).squeeze(-1) * mask.to(hidden.dtype)


def durations_from_log(log_d):
    """``round(exp(log_d))`` clamped to at least one frame."""
    if isinstance(log_d, torch.Tensor):
        return torch.clamp(torch.round(torch.exp(log_d)), min=1).long()
    return np.maximum(np.round(np.exp(np.asarray(log_d, dtype=np.float64))), 1).astype(np.int64)


class SpeakerTable(nn.Module):
    """Trainable per-speaker embeddings, kept on the unit sphere."""

    def __init__(self, n_speakers, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_speakers, dim))
        self.renormalize()

    @torch.no_grad()
    def renormalize(self):
        # rows already on the sphere are left bit-identical
        norms = self.weight.norm(dim=-1)
        off = (norms - 1).abs() > 1e-6
        if off.any():
            self.weight[off] = self.weight[off] / norms[off, None]

    def forward(self, ids):
        return F.normalize(self.weight[torch.as_tensor(ids, device=self.weight.device)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = ChannelNorm(c_out)
        self.film = nn.Linear(time_dim, 2 * c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = ChannelNorm(c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb, m):
        h = F.mish(self.norm1(self.conv1(x * m)))
        scale, shift = self.film(temb)[..., None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = F.mish(self.norm2(self.conv2(h * m)))
        return (h + self.skip(x)) * m


class ScoreDecoder(nn.Module):
    """Two-resolution 1-D U-Net estimating the conditional score of noisy mels.

    The network predicts the noise component; ``forward`` converts it into a
    score by dividing by ``-sqrt(lambda_t)``.
    """

    def __init__(self, n_mels, spk_dim, channels=64, time_dim=64, schedule=None):
        super().__init__()
        self.n_mels = n_mels
        self.spk_dim = spk_dim
        self.schedule = schedule or NoiseSchedule()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, 2 * time_dim), nn.Mish(), nn.Linear(2 * time_dim, time_dim)
        )
        c_in = 2 * n_mels + spk_dim
        self.down1 = ResBlock(c_in, channels, time_dim)
        self.down2 = ResBlock(channels, 2 * channels, time_dim)
        self.mid = ResBlock(2 * channels, 2 * channels, time_dim)
        self.up = ResBlock(3 * channels, channels, time_dim)
        self.out = nn.Conv1d(channels, n_mels, 1)

    def lam(self, t):
        s = self.schedule
        return -torch.expm1(-(s.beta0 * t + 0.5 * (s.beta1 - s.beta0) * t * t))

    def predict_noise(self, x, t, c, e, mask=None):
        b, n, _ = x.shape
        if c.shape != x.shape:
            raise ContractViolation(f"condition shape {tuple(c.shape)} != input shape {tuple(x.shape)}")
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool, device=x.device)
        pad = n % 2
        inp = torch.cat([x, c, e[:, None, :].expand(b, n, e.shape[-1])], dim=-1).transpose(1, 2)
        m = mask[:, None, :].to(x.dtype)
        if pad:
            inp = F.pad(inp, (0, 1))
            m = F.pad(m, (0, 1))
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        m2 = m[..., ::2]
        h1 = self.down1(inp, temb, m)
        h2 = self.down2(F.avg_pool1d(h1, 2), temb, m2)
        h2 = self.mid(h2, temb, m2)
        up = F.interpolate(h2, scale_factor=2, mode="nearest")
        h = self.up(torch.cat([h1, up], dim=1), temb, m)
        out = self.out(h) * m
        if pad:
            out = out[..., :n]
        return out.transpose(1, 2)

    def forward(self, x, t, c, e, mask=None):
        """Score estimate with the shape of ``x`` (``[B, T, M]``); ``t`` is ``[B]``."""
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1).expand(x.shape[0])
        eps_hat = self.predict_noise(x, t, c, e, mask)
        return -eps_hat / torch.sqrt(self.lam(t))[:, None, None]


class AdaptiveTTS(nn.Module):
    """Container holding every parameter group under its canonical name."""

    def __init__(self, n_symbols, n_units, n_speakers, n_mels=80, hidden=128, n_blocks=2,
                 n_heads=2, spk_dim=16, dec_channels=64, schedule=None):
        super().__init__()
        self.text_encoder = SequenceEncoder(n_symbols, n_mels, hidden, n_blocks, n_heads)
        self.unit_encoder = SequenceEncoder(n_units, n_mels, hidden, n_blocks, n_heads)
        self.duration_predictor = DurationPredictor(hidden)
        self.decoder = ScoreDecoder(n_mels, spk_dim, dec_channels, schedule=schedule)
        self.speaker_table = SpeakerTable(n_speakers, spk_dim)

    def group(self, name):
        if name not in PARAM_GROUPS:
            raise ContractViolation(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def freeze(self, *names):
        for name in names:
            for p in self.group(name).parameters():
                p.requires_grad_(False)

    def unfreeze_all(self):
        for p in self.parameters():
            p.requires_grad_(True)


def encode_text(model, token_ids):
    c, _ = model.text_encoder(torch.as_tensor(token_ids, dtype=torch.long))
    return c[0]


def encode_units(model, unit_ids):
    c, _ = model.unit_encoder(torch.as_tensor(unit_ids, dtype=torch.long))
    return c[0]


def predict_durations(model, hidden, mask=None):
    squeeze = hidden.ndim == 2
    out = model.duration_predictor(hidden[None] if squeeze else hidden, mask)
    return out[0] if squeeze else out


def score(model, x_t, t, c, e_s, mask=None):
    """Score of an unbatched ``[T, M]`` or batched ``[B, T, M]`` noisy mel."""
    single = x_t.ndim == 2
    if single:
        x_t, c = x_t[None], c[None]
        e_s = e_s.reshape(1, -1)
    elif e_s.ndim == 1:
        e_s = e_s[None].expand(x_t.shape[0], -1)
    s = model.decoder(x_t, t, c, e_s, mask)
    if not torch.isfinite(s).all():
        raise ModelHealthError("score network produced non-finite values")
    return s[0] if single else s
