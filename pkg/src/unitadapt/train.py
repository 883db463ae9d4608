"""Losses and the three training regimes: TTS pretraining, unit-encoder training, speaker fine-tuning."""

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import align
from .exceptions import ConfigurationError, ContractViolation, ModelHealthError
from .nets import PARAM_GROUPS, sequence_mask

logger = logging.getLogger(__name__)

REGIMES = ("pretrain", "unit_encoder", "finetune")
FINETUNE_STEPS = 500
FINETUNE_LR = 2e-5
PRETRAIN_LR = 1e-4


@dataclass
class RegimeConfig:
    regime: str = "pretrain"
    lr: float = PRETRAIN_LR
    steps: int = 1000
    batch_size: int = 16
    frozen: tuple = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.frozen is None:
            self.frozen = default_frozen(self.regime)
        self.frozen = tuple(self.frozen)
        unknown = set(self.frozen) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups {sorted(unknown)}")
        if self.regime == "unit_encoder" and "decoder" not in self.frozen:
            raise ConfigurationError("unit-encoder training must freeze the decoder")
        if self.regime == "finetune" and "unit_encoder" not in self.frozen:
            raise ConfigurationError("fine-tuning must freeze the unit encoder")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("lr and steps must be >= 0 and batch_size >= 1")


def default_frozen(regime):
    if regime == "pretrain":
        return ("unit_encoder",)
    if regime == "unit_encoder":
        return tuple(g for g in PARAM_GROUPS if g != "unit_encoder")
    return tuple(g for g in PARAM_GROUPS if g != "decoder")


@dataclass
class Sample:
    """One training example: a mel plus exactly one of text tokens or squeezed units."""

    mel: np.ndarray
    speaker: int = 0
    tokens: np.ndarray = None
    units: np.ndarray = None
    unit_durations: np.ndarray = None

    def __post_init__(self):
        if (self.tokens is None) == (self.units is None):
            raise ContractViolation("a sample carries exactly one of text tokens or units")
        if self.units is not None:
            if self.unit_durations is None:
                raise ContractViolation("unit samples need ground-truth durations")
            align.check_durations(self.unit_durations, total=len(self.mel))


# -- losses -----------------------------------------------------------------

def _lam(sched, t):
    return -torch.expm1(-(sched.beta0 * t + 0.5 * (sched.beta1 - sched.beta0) * t * t))


def loss_grad(decoder, x0, c, e, t, eps, mask=None):
    """Denoising score-matching loss ``mean ||sqrt(lambda_t) * s(X_t) + eps||^2``.

    Batched over ``[B, T, M]``; the mean runs over valid (masked) elements.
    """
    if x0.ndim == 2:
        x0, c, eps = x0[None], c[None], eps[None]
        e = e.reshape(1, -1)
    if eps.shape != x0.shape or c.shape != x0.shape:
        raise ContractViolation("x0, condition and noise must share one shape")
    t = torch.as_tensor(t, dtype=x0.dtype).reshape(-1).expand(x0.shape[0])
    lam = _lam(decoder.schedule, t)[:, None, None]
    x_t = torch.sqrt(1.0 - lam) * x0 + torch.sqrt(lam) * eps
    s = decoder(x_t, t, c, e, mask)
    err = (torch.sqrt(lam) * s + eps) ** 2
    loss = _masked_mean(err, mask)
    if not torch.isfinite(loss):
        raise ModelHealthError("non-finite diffusion loss")
    return loss


def loss_enc(c, x0, mask=None):
    """Mean squared error between an aligned encoder output and the mel."""
    if c.shape != x0.shape:
        raise ContractViolation(f"shape mismatch {tuple(c.shape)} vs {tuple(x0.shape)}")
    if isinstance(c, np.ndarray):
        return float(np.mean((c - x0) ** 2))
    return _masked_mean((c - x0) ** 2, mask)


def loss_dur(log_pred, durations, mask):
    target = torch.log(durations.to(log_pred.dtype).clamp(min=1))
    return ((log_pred - target) ** 2 * mask).sum() / mask.sum()


def _masked_mean(err, mask):
    if mask is None:
        return err.mean()
    m = mask[..., None].to(err.dtype)
    return (err * m).sum() / (m.sum() * err.shape[-1])


def _pad_stack(arrays, dtype=torch.float32):
    lens = [len(a) for a in arrays]
    out = torch.zeros((len(arrays), max(lens)) + tuple(np.shape(arrays[0])[1:]), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
    return out, sequence_mask(torch.tensor(lens))


def param_checksum(module):
    """SHA-256 over the raw bytes of every parameter, for bitwise freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- trainer ------------------------------------------------------------------

class Trainer:
    """Owns the optimizer for one regime and applies single update steps."""

    def __init__(self, model, config, extra_params=(), metrics_sink=None):
        self.model = model
        self.config = config
        self.step_count = 0
        self.metrics_sink = metrics_sink
        self.last_grad_norm = 0.0
        model.unfreeze_all()
        model.freeze(*config.frozen)
        params = [p for p in model.parameters() if p.requires_grad] + list(extra_params)
        self.params = params
        self.optimizer = torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.eps) if params else None
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(int(config.seed))

    def sample_batch(self, samples):
        """Draw a batch without replacement from this trainer's random stream."""
        n = min(self.config.batch_size, len(samples))
        return [samples[i] for i in self.rng.choice(len(samples), n, replace=False)]

    def state_dict(self):
        """Everything needed to continue bit-identically: optimizer moments and RNG streams."""
        opt = self.optimizer.state_dict() if self.optimizer else {"state": {}}
        arrays = {}
        for idx, st in opt["state"].items():
            for key, val in st.items():
                arrays[f"opt/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        arrays["torch_rng"] = self.gen.get_state().numpy()
        meta = {"step_count": self.step_count, "numpy_rng": self.rng.bit_generator.state,
                "regime": self.config.regime}
        return arrays, meta

    def load_state_dict(self, arrays, meta):
        if meta["regime"] != self.config.regime:
            raise ConfigurationError(
                f"trainer state is for the {meta['regime']!r} regime, not {self.config.regime!r}"
            )
        self.step_count = int(meta["step_count"])
        self.rng.bit_generator.state = meta["numpy_rng"]
        self.gen.set_state(torch.as_tensor(arrays["torch_rng"], dtype=torch.uint8))
        if self.optimizer is None:
            return
        state = {}
        for name, val in arrays.items():
            if not name.startswith("opt/"):
                continue
            _, idx, key = name.split("/")
            t = torch.as_tensor(val.copy())
            state.setdefault(int(idx), {})[key] = t if t.ndim or key != "step" else t.reshape(())
        current = self.optimizer.state_dict()
        current["state"] = state
        self.optimizer.load_state_dict(current)

    def _draws(self, shape):
        t = torch.as_tensor(self.rng.uniform(self.model.decoder.schedule.t_min, 1.0, size=shape[0]),
                            dtype=torch.float32)
        eps = torch.randn(shape, generator=self.gen)
        return t, eps

    def _apply(self, loss):
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.clip_norm:
            norm = torch.nn.utils.clip_grad_norm_(self.params, self.config.clip_norm)
        else:
            norm = torch.sqrt(sum((p.grad ** 2).sum() for p in self.params if p.grad is not None))
        self.last_grad_norm = float(norm)
        if not np.isfinite(self.last_grad_norm):
            raise ModelHealthError("non-finite gradient norm", self.step_count)
        self.optimizer.step()
        if "speaker_table" not in self.config.frozen:
            self.model.speaker_table.renormalize()
        self.step_count += 1

    def _emit(self, metrics):
        if self.metrics_sink is not None:
            rec = {"step": self.step_count, "regime": self.config.regime, **metrics,
                   "grad_norm": self.last_grad_norm}
            self.metrics_sink(rec)

    def step_pretrain(self, batch):
        """Text encoder -> MAS -> expand -> L_grad + L_enc + L_dur, one Adam update."""
        if self.config.regime != "pretrain":
            raise ConfigurationError(f"step_pretrain called in the {self.config.regime!r} regime")
        kept = []
        for s in batch:
            if s.tokens is None:
                raise ConfigurationError("pretraining needs text tokens")
            if len(s.tokens) > len(s.mel):
                logger.warning("skipping sample: %d tokens exceed %d frames", len(s.tokens), len(s.mel))
                continue
            kept.append(s)
        if not kept:
            return None
        m = self.model
        tokens, tmask = _pad_stack([s.tokens for s in kept], torch.long)
        c, hidden = m.text_encoder(tokens, tmask)
        mels, fmask = _pad_stack([s.mel for s in kept])
        aligned, durs = [], torch.zeros(tokens.shape, dtype=torch.long)
        for i, s in enumerate(kept):
            n_tok = len(s.tokens)
            ci = c[i, :n_tok]
            with torch.no_grad():
                lp = align.log_prior_gaussian(ci.double().numpy(), np.asarray(s.mel, dtype=np.float64))
            path = align.mas(lp)
            d = align.durations_from_path(path, n_tok)
            durs[i, :n_tok] = torch.as_tensor(d)
            aligned.append(align.expand(ci, d))
        c_al = torch.zeros_like(mels)
        for i, a in enumerate(aligned):
            c_al[i, :len(a)] = a
        l_enc = loss_enc(c_al, mels, fmask)
        log_pred = m.duration_predictor(hidden.detach(), tmask)
        l_dur = loss_dur(log_pred, durs, tmask.to(log_pred.dtype))
        e = m.speaker_table([s.speaker for s in kept])
        t, eps = self._draws(mels.shape)
        l_grad = loss_grad(m.decoder, mels, c_al, e, t, eps, fmask)
        self._apply(l_grad + l_enc + l_dur)
        metrics = {"L_grad": l_grad.item(), "L_enc": l_enc.item(), "L_dur": l_dur.item()}
        self._emit(metrics)
        return metrics

    def step_unit_encoder(self, batch):
        """Unit encoder -> expand with ground-truth durations -> L_grad + L_enc; decoder frozen."""
        if self.config.regime != "unit_encoder":
            raise ConfigurationError(f"step_unit_encoder called in the {self.config.regime!r} regime")
        for s in batch:
            if s.units is None or s.tokens is not None:
                raise ConfigurationError("unit-encoder training accepts unit samples only")
            align.check_durations(s.unit_durations, total=len(s.mel))
        m = self.model
        units, umask = _pad_stack([s.units for s in batch], torch.long)
        c, _ = m.unit_encoder(units, umask)
        mels, fmask = _pad_stack([s.mel for s in batch])
        c_al = torch.zeros_like(mels)
        for i, s in enumerate(batch):
            c_al[i, :len(s.mel)] = align.expand(c[i, :len(s.units)], s.unit_durations)
        l_enc = loss_enc(c_al, mels, fmask)
        e = m.speaker_table([s.speaker for s in batch])
        t, eps = self._draws(mels.shape)
        l_grad = loss_grad(m.decoder, mels, c_al, e, t, eps, fmask)
        self._apply(l_grad + l_enc)
        metrics = {"L_grad": l_grad.item(), "L_enc": l_enc.item()}
        self._emit(metrics)
        return metrics

    def step_finetune(self, mel, c_al, e):
        """One L_grad update of the decoder (and the speaker vector ``e`` if trainable)."""
        if self.config.regime != "finetune":
            raise ConfigurationError(f"step_finetune called in the {self.config.regime!r} regime")
        x0 = torch.as_tensor(np.asarray(mel), dtype=torch.float32)
        bsz = self.config.batch_size
        x0 = x0[None].expand(bsz, -1, -1)
        c_b = c_al[None].expand(bsz, -1, -1)
        e_n = F.normalize(e, dim=-1)[None].expand(bsz, -1)
        t, eps = self._draws(x0.shape)
        l_grad = loss_grad(self.model.decoder, x0, c_b, e_n, t, eps)
        self._apply(l_grad)
        with torch.no_grad():
            if e.requires_grad:
                n = e.norm()
                if abs(float(n) - 1.0) > 1e-6:
                    e.div_(n)
        metrics = {"L_grad": l_grad.item()}
        self._emit(metrics)
        return metrics


def finetune_speaker(model, reference_mel, units, unit_durations, e_init, config=None,
                     speaker_id="adapted", min_frames=None, metrics_sink=None, train_embedding=True):
    """Adapt a copy of ``model``'s decoder to one reference utterance.

    Content comes from the frozen unit encoder on the reference's own
    squeezed units. Returns ``(adapted_model, speaker_vector, info)``; with
    zero steps the copy is bit-identical to the input.
    """
    config = config or RegimeConfig("finetune", lr=FINETUNE_LR, steps=FINETUNE_STEPS, batch_size=4)
    if config.regime != "finetune":
        raise ConfigurationError("finetune_speaker needs a finetune regime config")
    mel = np.asarray(reference_mel, dtype=np.float32)
    align.check_durations(unit_durations, total=len(mel))
    if min_frames is not None and len(mel) < min_frames:
        logger.warning("reference has %d frames, fewer than the recommended %d", len(mel), min_frames)
    adapted = copy.deepcopy(model)
    e = torch.nn.Parameter(torch.as_tensor(np.asarray(e_init), dtype=torch.float32).clone(),
                           requires_grad=train_embedding)
    extra = [e] if train_embedding else []
    trainer = Trainer(adapted, config, extra_params=extra, metrics_sink=metrics_sink)
    with torch.no_grad():
        c, _ = adapted.unit_encoder(torch.as_tensor(np.asarray(units), dtype=torch.long))
        c_al = align.expand(c[0], unit_durations)
    history = []
    for _ in range(config.steps):
        history.append(trainer.step_finetune(mel, c_al, e)["L_grad"])
    adapted.unfreeze_all()
    e_out = e.detach().clone()
    if config.steps:
        e_out = F.normalize(e_out, dim=-1)
    info = {"speaker_id": speaker_id, "steps": config.steps, "lr": config.lr, "zero_shot": config.steps == 0,
            "loss_history": history}
    return adapted, e_out, info


class JsonlSink:
    """Append metric records to a line-delimited JSON file."""

    def __init__(self, path):
        self.path = path
        self.fh = open(path, "a")

    def __call__(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


@dataclass
class History:
    records: list = field(default_factory=list)

    def __call__(self, record):
        self.records.append(record)

    def series(self, key):
        return np.array([r[key] for r in self.records if key in r])
