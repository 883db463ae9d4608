"""Acceptance criteria, one test per criterion, each with its tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per criterion.
"""

import copy
import itertools
import time

import numpy as np
import pytest
import torch
from scipy.integrate import quad

from unitadapt import align, units
from unitadapt.corpus import file_digest
from unitadapt.estimator import AdaptiveDiffusionTTS
from unitadapt.nets import AdaptiveTTS
from unitadapt.sample import cfg_score
from unitadapt.schedule import NoiseSchedule, forward_sample, lambda_at
from unitadapt.train import RegimeConfig, Sample, Trainer, loss_enc, param_checksum


def test_criterion_01_schedule(record):
    start = time.perf_counter()
    sched = NoiseSchedule()
    rng = np.random.default_rng(1)
    grid = lambda_at(sched, np.linspace(0.0, 1.0, 1000))
    worst = 0.0
    for t in rng.uniform(0.0, 1.0, 20):
        integral, _ = quad(sched.beta, 0.0, t)
        worst = max(worst, abs(lambda_at(sched, t) - (1.0 - np.exp(-integral))))
    elapsed = time.perf_counter() - start
    ok = lambda_at(sched, 0.0) == 0.0 and np.all(np.diff(grid) > 0) and worst <= 1e-3 and elapsed < 1
    record(1, ok, f"lambda_0=0, monotone grid, max quadrature error {worst:.1e}, {elapsed:.2f}s")


def test_criterion_02_forward_marginal(record):
    start = time.perf_counter()
    sched, rng, n = NoiseSchedule(), np.random.default_rng(2), 100_000
    ok, lines = True, []
    for _ in range(3):
        x0, t = rng.normal(0.0, 2.0), rng.uniform(0.0, 1.0)
        lam = float(lambda_at(sched, t))
        xt = forward_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        mean_err = abs(xt.mean() - np.sqrt(1 - lam) * x0)
        var_rel = abs(xt.var() / lam - 1.0)
        ok &= mean_err <= 3 * np.sqrt(lam / n) and var_rel <= 0.02
        lines.append(f"t={t:.2f} mean err {mean_err:.1e} var dev {var_rel:.2%}")
    elapsed = time.perf_counter() - start
    record(2, ok and elapsed < 10, "; ".join(lines) + f", {elapsed:.2f}s")


def _enumerate_best(lp):
    """Maximum over every monotone surjective token-to-frame map, built frame by frame."""
    n_tok, n_frames = lp.shape
    best = -np.inf

    def walk(frame, tok, score):
        nonlocal best
        score += lp[tok, frame]
        if frame == n_frames - 1:
            if tok == n_tok - 1:
                best = max(best, score)
            return
        walk(frame + 1, tok, score)
        if tok + 1 < n_tok:
            walk(frame + 1, tok + 1, score)

    walk(0, 0, 0.0)
    return best


def test_criterion_03_alignment_oracle(record):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        n_frames = int(rng.integers(1, 9))
        n_tok = int(rng.integers(1, min(5, n_frames) + 1))
        lp = rng.normal(size=(n_tok, n_frames))
        path = align.mas(lp)
        align.check_path(path, n_tok)
        mismatches += not np.isclose(align.path_score(lp, path), _enumerate_best(lp), rtol=0, atol=1e-9)
    elapsed = time.perf_counter() - start
    record(3, mismatches == 0 and elapsed < 30, f"{1000 - mismatches}/1000 optimal, {elapsed:.2f}s")


def test_criterion_04_run_length(record):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(10_000):
        seq = rng.integers(0, int(rng.integers(1, 6)), size=int(rng.integers(1, 60)))
        sq = units.rle_compress(seq)
        bad += bool(np.any(sq.u[1:] == sq.u[:-1]) or sq.d_u.sum() != len(seq)
                    or not np.array_equal(units.rle_expand(sq), seq))
    elapsed = time.perf_counter() - start
    record(4, bad == 0 and elapsed < 5, f"{10_000 - bad}/10000 roundtrips, {elapsed:.2f}s")


def test_criterion_05_guidance_algebra(record):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, identity = 0.0, True
    for _ in range(100):
        sc, su = rng.normal(size=(2, 20, 16))
        gamma = rng.uniform(0.0, 5.0)
        lhs = np.linalg.norm(cfg_score(sc, su, gamma) - sc)
        worst = max(worst, abs(lhs - gamma * np.linalg.norm(sc - su)) / max(gamma * np.linalg.norm(sc - su), 1e-300))
        identity &= np.array_equal(cfg_score(sc, su, 0.0), sc)
    elapsed = time.perf_counter() - start
    record(5, identity and worst < 1e-12 and elapsed < 1,
           f"gamma=0 exact, max relative error {worst:.1e}, {elapsed:.2f}s")


def test_criterion_06_analytic_score(record):
    torch.set_num_threads(1)
    start = time.perf_counter()
    torch.manual_seed(0)
    rng = np.random.default_rng(6)
    x0 = torch.as_tensor(rng.normal(size=(32, 16)), dtype=torch.float32)
    model = AdaptiveTTS(40, 4, 1, n_mels=16, hidden=16, spk_dim=16, dec_channels=64)
    trainer = Trainer(model, RegimeConfig("finetune", lr=1e-3, steps=1500, batch_size=16, seed=0))
    cond = torch.zeros_like(x0)
    e = torch.nn.functional.normalize(torch.randn(16), dim=0)
    for _ in range(1500):
        trainer.step_finetune(x0.numpy(), cond, e)
    model.eval()
    sched, gen, cosines = model.decoder.schedule, torch.Generator().manual_seed(60), []
    with torch.no_grad():
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            lam = float(lambda_at(sched, t))
            xt = np.sqrt(1 - lam) * x0 + np.sqrt(lam) * torch.randn(x0.shape, generator=gen)
            s = model.decoder(xt[None], torch.tensor([t]), cond[None], e[None])[0]
            analytic = -(xt - np.sqrt(1 - lam) * x0) / lam
            cosines.append(float(torch.nn.functional.cosine_similarity(s.flatten(), analytic.flatten(), dim=0)))
    elapsed = time.perf_counter() - start
    record(6, min(cosines) >= 0.95 and elapsed <= 600,
           f"cosines {[round(c, 3) for c in cosines]}, {elapsed:.0f}s")


def _shuffled_baseline(est, utts, unit_seqs, rng):
    perm = np.arange(len(utts))
    while np.any(perm == np.arange(len(utts))):
        perm = rng.permutation(len(utts))
    matched, shuffled = [], []
    for i, j in enumerate(perm):
        c = est.encode_units_aligned(unit_seqs[i])
        matched.append(float(loss_enc(c, utts[i].mel)))
        n = min(len(c), len(utts[j].mel))
        shuffled.append(float(loss_enc(c[:n], utts[j].mel[:n])))
    return float(np.mean(matched)), float(np.mean(shuffled))


def test_criterion_07_toy_pipeline(record, toy_pipeline, toy_corpus):
    p = toy_pipeline
    est, quantizer, target = p["est"], p["quantizer"], p["target"]
    start = time.perf_counter()

    grad = np.array([r["L_grad"] for r in est.history_ if r["regime"] == "pretrain"])
    first, last = grad[:100].mean(), grad[-100:].mean()
    drop = 1 - last / first
    ok_a = drop >= 0.8

    before, after = p["decoder_checksums"]
    train = toy_corpus.train
    matched, shuffled = _shuffled_baseline(est, train, quantizer.transform([u.mel for u in train]),
                                           np.random.default_rng(7))
    ok_b = before == after and matched < shuffled

    texts = [u.text for u in toy_corpus.by_speaker(target)[1:6]]
    e_pre = est.initial_embedding(p["reference"].mel)[0]
    profiles = {s: toy_corpus.profile(s) for s in toy_corpus.speakers}
    goal = toy_corpus.profile(target)
    nearest_other = min(np.linalg.norm(goal - prof) for prof in profiles.values())
    wins, rows = 0, []
    for seed in range(10):
        pre = np.concatenate([est.synthesize(t, e_pre, seed=10 * seed + k) for k, t in enumerate(texts)])
        post = np.concatenate([est.synthesize(t, target, seed=10 * seed + k) for k, t in enumerate(texts)])
        d_pre = np.linalg.norm(pre.mean(0) - goal)
        d_post = np.linalg.norm(post.mean(0) - goal)
        d_other = min(np.linalg.norm(post.mean(0) - prof) for prof in profiles.values())
        wins += d_post < d_pre and d_post < d_other and d_post < nearest_other
        rows.append(f"{d_pre:.2f}/{d_post:.2f}")
    ok_c = wins >= 8

    elapsed = sum(p["timings"].values()) + time.perf_counter() - start
    detail = (f"(a) L_grad drop {drop:.1%}; (b) decoder unchanged={before == after}, "
              f"L_enc {matched:.3f} vs shuffled {shuffled:.3f}; (c) {wins}/10 seeds "
              f"[pre/post L2 {', '.join(rows[:3])}, ...]; {elapsed:.0f}s")
    record(7, ok_a and ok_b and ok_c and elapsed <= 1800, detail)


def test_criterion_08_voice_conversion(record, toy_pipeline, toy_corpus):
    est, quantizer = toy_pipeline["est"], toy_pipeline["quantizer"]
    start = time.perf_counter()
    tests = toy_corpus.heldout
    lengths_ok = all(est.convert(u.mel, "spk0", quantizer, seed=i).shape == u.mel.shape
                     for i, u in enumerate(tests))
    speakers = toy_corpus.speakers
    wins = 0
    for seed in range(10):
        own, other = speakers[seed % 2], speakers[1 - seed % 2]
        src = toy_corpus.by_speaker(own)[seed].mel
        same = est.convert(src, own, quantizer, gamma=1.5, n_steps=50, seed=seed)
        cross = est.convert(src, other, quantizer, gamma=1.5, n_steps=50, seed=seed)
        wins += np.linalg.norm(same - src) < np.linalg.norm(cross - src)
    elapsed = time.perf_counter() - start
    record(8, lengths_ok and wins >= 8 and elapsed <= 600,
           f"lengths preserved on {len(tests)} utterances={lengths_ok}, identity wins {wins}/10, {elapsed:.0f}s")


def test_criterion_09_determinism_and_persistence(record, toy_pipeline, toy_corpus, tmp_path):
    est, quantizer, target = toy_pipeline["est"], toy_pipeline["quantizer"], toy_pipeline["target"]
    start = time.perf_counter()
    text, src = toy_corpus.heldout[1].text, toy_corpus.train[0].mel
    same_tts = est.synthesize(text, target, seed=5).tobytes() == est.synthesize(text, target, seed=5).tobytes()
    same_vc = (est.convert(src, target, quantizer, seed=5).tobytes()
               == est.convert(src, target, quantizer, seed=5).tobytes())

    est.save(tmp_path / "base.ckpt")
    loaded = AdaptiveDiffusionTTS.load(tmp_path / "base.ckpt")
    loaded.save(tmp_path / "again.ckpt")
    a, b = est.model_.state_dict(), loaded.model_.state_dict()
    bitwise = a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    bitwise &= file_digest(tmp_path / "base.ckpt") == file_digest(tmp_path / "again.ckpt")

    est.save_adapted(tmp_path / "adapted.ckpt", target, tmp_path / "base.ckpt")
    resolved = AdaptiveDiffusionTTS.load(tmp_path / "adapted.ckpt")
    ad, orig = resolved.adapted_[target], est.adapted_[target]
    resolves = (all(torch.equal(ad.decoder_state[k], orig.decoder_state[k]) for k in orig.decoder_state)
                and np.array_equal(ad.embedding, orig.embedding)
                and resolved.synthesize(text, target, seed=5).tobytes() == est.synthesize(text, target, seed=5).tobytes())
    elapsed = time.perf_counter() - start
    record(9, same_tts and same_vc and bitwise and resolves and elapsed < 60,
           f"tts repeat={same_tts}, vc repeat={same_vc}, save/load bitwise={bitwise}, "
           f"adapted resolves={resolves}, {elapsed:.1f}s")


def test_criterion_10_freeze_contracts(record, toy_pipeline, toy_corpus):
    est, quantizer = toy_pipeline["est"], toy_pipeline["quantizer"]
    start = time.perf_counter()
    train = toy_corpus.train
    index = {s: i for i, s in enumerate(est.speakers_)}
    samples = [Sample(u.mel, index[u.speaker], units=sq.u, unit_durations=sq.d_u)
               for u, sq in zip(train, quantizer.transform([u.mel for u in train]))]

    model = copy.deepcopy(est.model_)
    trainer = Trainer(model, RegimeConfig("unit_encoder", lr=1e-3, batch_size=8, seed=10))
    decoder = param_checksum(model.decoder)
    unit_before = param_checksum(model.unit_encoder)
    decoder_frozen = True
    for _ in range(100):
        trainer.step_unit_encoder(trainer.sample_batch(samples))
        decoder_frozen &= param_checksum(model.decoder) == decoder
    decoder_frozen &= param_checksum(model.unit_encoder) != unit_before

    model = copy.deepcopy(est.model_)
    ref = toy_pipeline["reference"]
    sq = quantizer.transform([ref.mel])[0]
    with torch.no_grad():
        c, _ = model.unit_encoder(torch.as_tensor(sq.u))
        c_al = align.expand(c[0], sq.d_u)
    e = torch.nn.Parameter(torch.as_tensor(est.initial_embedding(ref.mel)[0]))
    trainer = Trainer(model, RegimeConfig("finetune", lr=2e-5, batch_size=4, seed=11), extra_params=[e])
    others = ("unit_encoder", "text_encoder", "duration_predictor", "speaker_table")
    frozen = {g: param_checksum(model.group(g)) for g in others}
    decoder_before = param_checksum(model.decoder)
    encoder_frozen = True
    for _ in range(100):
        trainer.step_finetune(ref.mel, c_al, e)
        encoder_frozen &= {g: param_checksum(model.group(g)) for g in others} == frozen
    encoder_frozen &= param_checksum(model.decoder) != decoder_before
    elapsed = time.perf_counter() - start
    record(10, decoder_frozen and encoder_frozen and elapsed < 120,
           f"decoder frozen during unit-encoder training={decoder_frozen}, "
           f"encoders frozen during fine-tuning={encoder_frozen} (checked each of 100 steps), {elapsed:.1f}s")
