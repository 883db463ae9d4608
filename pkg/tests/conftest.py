import time
import warnings

import numpy as np
import pytest
import torch

from unitadapt.config import load_config
from unitadapt.corpus import make_toy_corpus
from unitadapt.estimator import AdaptiveDiffusionTTS, UnitQuantizer
from unitadapt.train import param_checksum

CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    """Record a criterion outcome for the summary, then assert it."""

    def _record(key, ok, detail):
        CRITERIA[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _record


@pytest.fixture(scope="session")
def toy_corpus():
    return make_toy_corpus(n_speakers=2, n_utts=100, seed=0)


@pytest.fixture(scope="session")
def toy_pipeline(toy_corpus):
    """Pretrain, fit the unit codebook, train the unit encoder and adapt to the held-out speaker."""
    torch.set_num_threads(1)
    cfg = load_config(preset="toy")
    train = toy_corpus.train
    mels = [u.mel for u in train]
    speakers = [u.speaker for u in train]
    timings = {}

    start = time.perf_counter()
    est = AdaptiveDiffusionTTS(**cfg.estimator_params())
    est.fit(mels, [u.text for u in train], speakers)
    timings["pretrain"] = time.perf_counter() - start

    u = cfg["units"]
    quantizer = UnitQuantizer(u["K"], u["extractor"], u["max_iters"], u["seed"]).fit(mels)

    decoder_before = param_checksum(est.model_.decoder)
    start = time.perf_counter()
    est.fit_unit_encoder(mels, speakers, quantizer)
    timings["unit_encoder"] = time.perf_counter() - start
    decoder_after = param_checksum(est.model_.decoder)

    target = toy_corpus.heldout_speakers[0]
    reference = toy_corpus.by_speaker(target)[0]
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est.adapt(reference.mel, quantizer, speaker=target)
    timings["finetune"] = time.perf_counter() - start

    return {
        "est": est, "quantizer": quantizer, "config": cfg, "target": target, "reference": reference,
        "decoder_checksums": (decoder_before, decoder_after), "timings": timings,
    }


@pytest.fixture(scope="session")
def overfit_estimator(toy_corpus):
    """A small model pretrained on one utterance until it reproduces it."""
    torch.set_num_threads(1)
    utt = toy_corpus.train[0]
    est = AdaptiveDiffusionTTS(n_mels=16, n_units=16, hidden=32, dec_channels=32, pretrain_lr=2e-3,
                               batch_size=1, pretrain_steps=600, random_state=0)
    est.fit([utt.mel], [utt.text], [utt.speaker])
    return est, utt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
