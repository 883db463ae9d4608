"""scikit-learn style front end for the whole pipeline.

``UnitQuantizer`` turns mels (or precomputed features) into squeezed unit
sequences. ``AdaptiveDiffusionTTS`` pretrains the diffusion TTS model, plugs
in a unit encoder, adapts the decoder to new speakers from one untranscribed
utterance, and runs text-to-speech or voice conversion.
"""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import align, corpus
from .exceptions import CheckpointError, ConfigurationError, DataError
from .nets import AdaptiveTTS
from .sample import GuidanceConfig, mel_mean, sample_mel, tts, vc
from .schedule import NoiseSchedule
from .train import (FINETUNE_LR, FINETUNE_STEPS, JsonlSink, RegimeConfig, Sample, Trainer,
                    finetune_speaker)
from .units import (DEFAULT_K, Codebook, assign, extract_features, kmeans_fit, squeeze_units)
from .validation import check_mel, check_mels, check_same_length

logger = logging.getLogger(__name__)


class UnitQuantizer(TransformerMixin, BaseEstimator):
    """K-means codebook over speech features producing squeezed units.

    Parameters
    ----------
    n_clusters : int
        Codebook size K.
    extractor : str
        Registered feature extractor id (``"mel-frames"``, ``"mel-cmvn"`` or
        ``"precomputed"``).
    """

    def __init__(self, n_clusters=DEFAULT_K, extractor="mel-frames", max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.extractor = extractor
        self.max_iter = max_iter
        self.random_state = random_state

    def _features(self, X):
        return [extract_features(x, self.extractor) for x in X]

    def fit(self, X, y=None):
        feats = self._features(X)
        centroids, history = kmeans_fit(feats, self.n_clusters, self.max_iter, self.random_state,
                                        return_history=True)
        self.codebook_ = Codebook(centroids, self.extractor)
        self.cluster_centers_ = self.codebook_.centroids
        self.inertia_history_ = history
        self.n_features_in_ = centroids.shape[1]
        return self

    def predict(self, X):
        """Frame-level unit ids at the feature frame rate."""
        check_is_fitted(self)
        return [assign(f, self.codebook_) for f in self._features(X)]

    def transform(self, X, n_frames=None):
        """Squeezed units per utterance, upsampled to mel length before compression.

        ``n_frames`` defaults to each input's row count (right for mel inputs).
        """
        check_is_fitted(self)
        feats = self._features(X)
        if n_frames is None:
            n_frames = [len(f) for f in feats]
        return [squeeze_units(f, self.codebook_, n) for f, n in zip(feats, n_frames)]

    def save(self, path, config_hash=None):
        check_is_fitted(self)
        corpus.save_codebook(path, self.codebook_, {"max_iter": self.max_iter, "seed": self.random_state,
                                                     "config_hash": config_hash})

    @classmethod
    def load(cls, path):
        arrays, meta = corpus.read_container(path, "codebook")
        q = cls(n_clusters=meta["K"], extractor=meta["extractor_id"], max_iter=meta.get("max_iter", 100),
                random_state=meta.get("seed", 0))
        q.codebook_ = Codebook(arrays["centroids"], meta["extractor_id"])
        q.cluster_centers_ = q.codebook_.centroids
        q.inertia_history_ = []
        q.n_features_in_ = q.codebook_.dim
        return q


@dataclass
class AdaptedSpeaker:
    decoder_state: dict
    embedding: np.ndarray
    info: dict = field(default_factory=dict)


class AdaptiveDiffusionTTS(BaseEstimator):
    """Multi-speaker diffusion TTS with a pluggable unit encoder and one-shot speaker adaptation.

    ``fit`` pretrains on transcribed speech, ``fit_unit_encoder`` trains the
    unit encoder against the frozen decoder, ``adapt`` fine-tunes the decoder
    on one untranscribed reference, and ``synthesize`` / ``convert`` run
    guided sampling for text-to-speech and voice conversion.
    """

    def __init__(self, n_mels=80, n_units=DEFAULT_K, hidden=128, n_blocks=2, n_heads=2, spk_dim=16,
                 dec_channels=64, beta0=0.05, beta1=20.0, t_min=1e-4,
                 pretrain_lr=1e-4, pretrain_steps=1000, unit_lr=1e-4, unit_steps=1000, batch_size=16,
                 finetune_lr=FINETUNE_LR, finetune_steps=FINETUNE_STEPS, finetune_batch_size=4,
                 min_reference_seconds=2.0, frame_rate_hz=22050 / 256,
                 n_sampling_steps=50, tts_gamma=1.0, vc_gamma=1.5, temperature=1.0,
                 clip_norm=1.0, random_state=0, warm_start=False, metrics_path=None):
        self.n_mels = n_mels
        self.n_units = n_units
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.spk_dim = spk_dim
        self.dec_channels = dec_channels
        self.beta0 = beta0
        self.beta1 = beta1
        self.t_min = t_min
        self.pretrain_lr = pretrain_lr
        self.pretrain_steps = pretrain_steps
        self.unit_lr = unit_lr
        self.unit_steps = unit_steps
        self.batch_size = batch_size
        self.finetune_lr = finetune_lr
        self.finetune_steps = finetune_steps
        self.finetune_batch_size = finetune_batch_size
        self.min_reference_seconds = min_reference_seconds
        self.frame_rate_hz = frame_rate_hz
        self.n_sampling_steps = n_sampling_steps
        self.tts_gamma = tts_gamma
        self.vc_gamma = vc_gamma
        self.temperature = temperature
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.warm_start = warm_start
        self.metrics_path = metrics_path

    # -- construction -----------------------------------------------------

    @property
    def schedule(self):
        return NoiseSchedule(self.beta0, self.beta1, self.t_min)

    def _build(self, n_speakers):
        torch.manual_seed(self.random_state)
        return AdaptiveTTS(len(corpus.CharTokenizer()), self.n_units, n_speakers, self.n_mels,
                           self.hidden, self.n_blocks, self.n_heads, self.spk_dim, self.dec_channels,
                           self.schedule)

    def _trainer(self, regime):
        if regime == "pretrain":
            cfg = RegimeConfig("pretrain", self.pretrain_lr, self.pretrain_steps, self.batch_size,
                               clip_norm=self.clip_norm, seed=self.random_state)
        else:
            cfg = RegimeConfig("unit_encoder", self.unit_lr, self.unit_steps, self.batch_size,
                               clip_norm=self.clip_norm, seed=self.random_state + 1)
        sink = JsonlSink(self.metrics_path) if self.metrics_path else None
        trainer = Trainer(self.model_, cfg, metrics_sink=_chain(self.history_.append, sink))
        saved = getattr(self, "trainer_states_", {}).get(regime)
        if saved is not None and self.warm_start:
            trainer.load_state_dict(*saved)
        return trainer, sink

    def _store_trainer(self, regime, trainer):
        if not hasattr(self, "trainer_states_"):
            self.trainer_states_ = {}
        self.trainer_states_[regime] = trainer.state_dict()

    # -- training ---------------------------------------------------------

    def fit(self, X, y, speakers, n_steps=None):
        """Pretrain on mels ``X`` with transcripts ``y`` (strings or token-id lists).

        With ``warm_start=True`` and an existing model, training continues
        from the stored optimizer and random state.
        """
        mels = check_mels(X, self.n_mels)
        check_same_length(mels, y, speakers)
        tok = corpus.CharTokenizer()
        tokens = [tok.encode(t) for t in y]
        if any(len(t) == 0 for t in tokens):
            raise DataError("every training utterance needs a non-empty transcript")
        continuing = self.warm_start and hasattr(self, "model_")
        if not continuing:
            self.speakers_ = sorted(set(speakers))
            self.model_ = self._build(len(self.speakers_))
            self.history_ = []
            self.trainer_states_ = {}
            self.adapted_ = {}
            self.unit_extractor_ = None
            self.mel_mean_ = mel_mean(mels)
            self.speaker_profiles_ = np.stack(
                [mel_mean([m for m, s in zip(mels, speakers) if s == name]) for name in self.speakers_]
            )
        index = {s: i for i, s in enumerate(self.speakers_)}
        unknown = set(speakers) - set(index)
        if unknown:
            raise DataError(f"speakers {sorted(unknown)} are not in the fitted speaker table")
        samples = [Sample(m, index[s], tokens=t) for m, t, s in zip(mels, tokens, speakers)]
        trainer, sink = self._trainer("pretrain")
        try:
            for _ in range(self.pretrain_steps if n_steps is None else n_steps):
                trainer.step_pretrain(trainer.sample_batch(samples))
        finally:
            if sink:
                sink.close()
        self._store_trainer("pretrain", trainer)
        self.model_.unfreeze_all()
        return self

    def fit_unit_encoder(self, X, speakers, quantizer=None, units=None, n_steps=None):
        """Train the unit encoder with the decoder frozen.

        Units come from ``quantizer.transform(X)`` unless passed explicitly as
        a list of ``SqueezedUnits``.
        """
        check_is_fitted(self, "model_")
        mels = check_mels(X, self.n_mels)
        check_same_length(mels, speakers)
        if units is None:
            if quantizer is None:
                raise ConfigurationError("fit_unit_encoder needs a fitted quantizer or explicit units")
            self._check_quantizer(quantizer, fitting=True)
            units = quantizer.transform(mels)
            self.unit_extractor_ = quantizer.extractor
        if any(int(u.u.max()) >= self.n_units for u in units):
            raise ConfigurationError(f"unit ids exceed the unit vocabulary of {self.n_units}")
        index = {s: i for i, s in enumerate(self.speakers_)}
        samples = [Sample(m, index[s], units=u.u, unit_durations=u.d_u) for m, u, s in zip(mels, units, speakers)]
        trainer, sink = self._trainer("unit_encoder")
        try:
            for _ in range(self.unit_steps if n_steps is None else n_steps):
                trainer.step_unit_encoder(trainer.sample_batch(samples))
        finally:
            if sink:
                sink.close()
        self._store_trainer("unit_encoder", trainer)
        self.model_.unfreeze_all()
        self.unit_encoder_trained_ = True
        return self

    def _check_quantizer(self, quantizer, fitting=False):
        check_is_fitted(quantizer)
        if quantizer.n_clusters > self.n_units:
            raise ConfigurationError(f"quantizer K={quantizer.n_clusters} exceeds n_units={self.n_units}")
        expected = getattr(self, "unit_extractor_", None)
        if not fitting and expected is not None and quantizer.extractor != expected:
            raise ConfigurationError(
                f"unit encoder was trained on {expected!r} units, quantizer uses {quantizer.extractor!r}"
            )

    def initial_embedding(self, reference_mel):
        """Speaker-table row whose mel profile is nearest in cosine to the reference's mean frame."""
        check_is_fitted(self, "model_")
        centred = self.speaker_profiles_ - self.mel_mean_
        ref = np.asarray(reference_mel, dtype=np.float64).mean(0) - self.mel_mean_
        denom = np.linalg.norm(centred, axis=1) * max(np.linalg.norm(ref), 1e-12)
        cos = centred @ ref / np.maximum(denom, 1e-12)
        idx = int(np.argmax(cos))
        with torch.no_grad():
            return self.model_.speaker_table(idx).numpy().copy(), self.speakers_[idx]

    def adapt(self, reference_mel, quantizer, speaker="adapted", embedding=None, n_steps=None,
              seed=None):
        """Fine-tune a copy of the decoder (and speaker vector) on one reference utterance.

        ``embedding`` supplies an external speaker vector; otherwise the
        nearest training speaker's row initialises it. ``n_steps=0`` gives a
        zero-shot speaker.
        """
        check_is_fitted(self, "model_")
        if not getattr(self, "unit_encoder_trained_", False):
            raise ConfigurationError("adaptation needs a trained unit encoder; run fit_unit_encoder first")
        self._check_quantizer(quantizer)
        mel = check_mel(reference_mel, self.n_mels)
        sq = quantizer.transform([mel])[0]
        if embedding is None:
            e0, init_from = self.initial_embedding(mel)
        else:
            e0 = np.asarray(embedding, dtype=np.float32).reshape(-1)
            if len(e0) != self.spk_dim:
                raise ConfigurationError(f"speaker embedding has {len(e0)} dims, expected {self.spk_dim}")
            e0 = e0 / max(np.linalg.norm(e0), 1e-12)
            init_from = "external"
        steps = self.finetune_steps if n_steps is None else n_steps
        cfg = RegimeConfig("finetune", self.finetune_lr, steps, self.finetune_batch_size,
                           clip_norm=self.clip_norm, seed=self.random_state if seed is None else seed)
        sink = JsonlSink(self.metrics_path) if self.metrics_path else None
        try:
            adapted, e, info = finetune_speaker(
                self.model_, mel, sq.u, sq.d_u, e0, cfg, speaker_id=speaker,
                min_frames=int(round(self.min_reference_seconds * self.frame_rate_hz)),
                metrics_sink=sink,
            )
        finally:
            if sink:
                sink.close()
        info["init_from"] = init_from
        state = {k: v.detach().clone() for k, v in adapted.decoder.state_dict().items()}
        self.adapted_[speaker] = AdaptedSpeaker(state, e.numpy(), info)
        return self

    # -- inference ----------------------------------------------------------

    def _resolve(self, speaker):
        """``(model, embedding)`` for a speaker name or an explicit embedding vector."""
        check_is_fitted(self, "model_")
        if isinstance(speaker, str) and speaker in self.adapted_:
            ad = self.adapted_[speaker]
            model = copy.copy(self.model_)
            # a shallow module copy shares the submodule registry; give it its own
            model._modules = dict(self.model_._modules)
            model.decoder = copy.deepcopy(self.model_.decoder)
            model.decoder.load_state_dict(ad.decoder_state)
            return model, ad.embedding
        if isinstance(speaker, str):
            if speaker not in self.speakers_:
                raise DataError(f"unknown speaker {speaker!r}")
            with torch.no_grad():
                return self.model_, self.model_.speaker_table(self.speakers_.index(speaker)).numpy()
        e = np.asarray(speaker, dtype=np.float32).reshape(-1)
        if len(e) != self.spk_dim:
            raise ConfigurationError(f"speaker embedding has {len(e)} dims, expected {self.spk_dim}")
        return self.model_, e / max(np.linalg.norm(e), 1e-12)

    def _guidance(self, gamma, n_steps):
        return GuidanceConfig(gamma, self.mel_mean_, n_steps or self.n_sampling_steps, self.temperature)

    def synthesize(self, text, speaker, gamma=None, n_steps=None, seed=0, return_durations=False):
        """Text-to-speech in the voice of ``speaker`` (name or embedding)."""
        model, e = self._resolve(speaker)
        tokens = corpus.CharTokenizer().encode(text)
        if len(tokens) == 0:
            raise DataError("text-to-speech needs a non-empty token sequence")
        g = self._guidance(self.tts_gamma if gamma is None else gamma, n_steps)
        mel, d = tts(model, tokens, e, g, seed)
        return (mel, d) if return_durations else mel

    def predict(self, X, speaker, seed=0):
        """Batch text-to-speech: one mel per text, seeds ``seed, seed + 1, ...``."""
        return [self.synthesize(x, speaker, seed=seed + i) for i, x in enumerate(X)]

    def convert(self, source_mel, speaker, quantizer, gamma=None, n_steps=None, seed=0):
        """Voice conversion: output has exactly the source's frame count."""
        if not getattr(self, "unit_encoder_trained_", False):
            raise ConfigurationError("voice conversion needs a trained unit encoder")
        self._check_quantizer(quantizer)
        model, e = self._resolve(speaker)
        mel = check_mel(source_mel, self.n_mels)
        units = quantizer.transform([mel])[0]
        g = self._guidance(self.vc_gamma if gamma is None else gamma, n_steps)
        return vc(model, mel, quantizer.codebook_, e, g, seed, quantizer.extractor, units=units)

    def sample(self, condition, speaker, gamma=0.0, n_steps=None, seed=0):
        """Sample from an explicit aligned condition ``[T, M]``."""
        model, e = self._resolve(speaker)
        return sample_mel(model.decoder, condition, e, self._guidance(gamma, n_steps), seed)

    def encode_units_aligned(self, units):
        with torch.no_grad():
            c, _ = self.model_.unit_encoder(torch.as_tensor(units.u))
            return align.expand(c[0], units.d_u).numpy()

    def encode_text_aligned(self, text, durations):
        with torch.no_grad():
            c, _ = self.model_.text_encoder(torch.as_tensor(corpus.CharTokenizer().encode(text)))
            return align.expand(c[0], durations).numpy()

    # -- persistence ------------------------------------------------------

    def _state_arrays(self):
        arrays = {k: v.detach().cpu().numpy() for k, v in self.model_.state_dict().items()}
        arrays = {k.replace(".", "/", 1): v for k, v in arrays.items()}
        arrays["extra/mel_mean"] = np.asarray(self.mel_mean_)
        arrays["extra/speaker_profiles"] = np.asarray(self.speaker_profiles_)
        for regime, (tarr, _) in getattr(self, "trainer_states_", {}).items():
            for k, v in tarr.items():
                arrays[f"trainer/{regime}/{k}"] = v
        return arrays

    def save(self, path, config_hash=None):
        check_is_fitted(self, "model_")
        meta = {
            "estimator_params": {k: v for k, v in self.get_params().items() if k != "metrics_path"},
            "speakers": self.speakers_,
            "unit_encoder_trained": bool(getattr(self, "unit_encoder_trained_", False)),
            "unit_extractor": getattr(self, "unit_extractor_", None),
            "trainer_meta": {r: m for r, (_, m) in getattr(self, "trainer_states_", {}).items()},
            "config_hash": config_hash,
        }
        corpus.save_checkpoint(path, self._state_arrays(), meta)

    def save_adapted(self, path, speaker, base_path, config_hash=None):
        """Adapted checkpoint: decoder and speaker vector only, resolved against ``base_path``."""
        ad = self.adapted_[speaker]
        arrays = {f"decoder/{k}": v.cpu().numpy() for k, v in ad.decoder_state.items()}
        arrays["speaker/embedding"] = np.asarray(ad.embedding)
        info = {k: v for k, v in ad.info.items() if k != "loss_history"}
        corpus.save_checkpoint(path, arrays, {"adapted_speaker": speaker, "finetune": info,
                                              "config_hash": config_hash}, base=base_path)

    @classmethod
    def load(cls, path, **overrides):
        """Load a full checkpoint, or an adapted one together with its base."""
        arrays, meta = corpus.read_container(path)
        if "base" in meta:
            est = cls.load(corpus.resolve_base(path, meta), **overrides)
            prefix = "decoder/"
            dec = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
            est.adapted_[meta["adapted_speaker"]] = AdaptedSpeaker(dec, arrays["speaker/embedding"],
                                                                  dict(meta.get("finetune", {})))
            return est
        if "estimator_params" not in meta:
            raise CheckpointError(f"{path} is not a model checkpoint")
        params = dict(meta["estimator_params"])
        params.update(overrides)
        est = cls(**params)
        est.speakers_ = list(meta["speakers"])
        est.model_ = est._build(len(est.speakers_))
        model_state = {k.replace("/", ".", 1): torch.from_numpy(v.copy()) for k, v in arrays.items()
                       if k.split("/", 1)[0] not in ("extra", "trainer")}
        est.model_.load_state_dict(model_state)
        est.mel_mean_ = arrays["extra/mel_mean"]
        est.speaker_profiles_ = arrays["extra/speaker_profiles"]
        est.unit_encoder_trained_ = meta.get("unit_encoder_trained", False)
        est.unit_extractor_ = meta.get("unit_extractor")
        est.config_hash_ = meta.get("config_hash")
        est.history_ = []
        est.adapted_ = {}
        est.trainer_states_ = {}
        for regime, tmeta in meta.get("trainer_meta", {}).items():
            pre = f"trainer/{regime}/"
            tarr = {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
            est.trainer_states_[regime] = (tarr, tmeta)
        return est


def _chain(*sinks):
    sinks = [s for s in sinks if s is not None]

    def emit(record):
        for s in sinks:
            s(record)

    return emit
