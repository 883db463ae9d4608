"""Fast self-checks of the core invariants, each against an independent oracle."""

import itertools
import time

import numpy as np
from scipy.integrate import quad

from . import align, units
from .sample import cfg_score
from .schedule import NoiseSchedule, forward_sample, lambda_at


def check_schedule(rng, sched=NoiseSchedule()):
    grid = lambda_at(sched, np.linspace(0.0, 1.0, 1000))
    worst = 0.0
    for t in rng.uniform(0.0, 1.0, 20):
        integral, _ = quad(lambda s: sched.beta0 + s * (sched.beta1 - sched.beta0), 0.0, t)
        worst = max(worst, abs(lambda_at(sched, t) - (1.0 - np.exp(-integral))))
    ok = lambda_at(sched, 0.0) == 0.0 and np.all(np.diff(grid) > 0) and worst < 1e-3
    return ok, f"max quadrature error {worst:.2e}"


def check_forward_marginal(rng, sched=NoiseSchedule(), n=100_000):
    worst = 0.0
    ok = True
    for _ in range(3):
        x0, t = rng.normal(0.0, 2.0), rng.uniform(0.05, 1.0)
        lam = lambda_at(sched, t)
        xt = forward_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        mean_err = abs(xt.mean() - np.sqrt(1 - lam) * x0)
        var_rel = abs(xt.var() / lam - 1.0)
        ok &= mean_err <= 3 * np.sqrt(lam / n) and var_rel <= 0.02
        worst = max(worst, var_rel)
    return bool(ok), f"worst variance deviation {worst:.3%}"


def _brute_force_best(lp):
    n_tok, n_frames = lp.shape
    best = -np.inf
    # a monotone surjective path is fixed by which frames start a new token
    for starts in itertools.combinations(range(1, n_frames), n_tok - 1):
        d = np.diff((0, *starts, n_frames))
        path = np.repeat(np.arange(n_tok), d)
        best = max(best, lp[path, np.arange(n_frames)].sum())
    return best


def check_mas(rng, n=1000):
    for _ in range(n):
        n_frames = int(rng.integers(1, 9))
        n_tok = int(rng.integers(1, min(5, n_frames) + 1))
        lp = rng.normal(size=(n_tok, n_frames))
        path = align.mas(lp)
        align.check_path(path, n_tok)
        if not np.isclose(align.path_score(lp, path), _brute_force_best(lp), rtol=0, atol=1e-9):
            return False, f"suboptimal path on a {n_tok}x{n_frames} instance"
    return True, f"{n} instances optimal"


def check_rle(rng, n=10_000):
    for _ in range(n):
        seq = rng.integers(0, 4, size=int(rng.integers(1, 40)))
        sq = units.rle_compress(seq)
        if np.any(sq.u[1:] == sq.u[:-1]) or sq.d_u.sum() != len(seq):
            return False, "compressed form breaks its contract"
        if not np.array_equal(units.rle_expand(sq), seq):
            return False, "roundtrip mismatch"
    return True, f"{n} sequences roundtrip"


def check_guidance(rng, n=100):
    worst = 0.0
    for _ in range(n):
        sc, su = rng.normal(size=(2, 12, 5))
        gamma = rng.uniform(0.0, 5.0)
        lhs = np.linalg.norm(cfg_score(sc, su, gamma) - sc)
        rhs = gamma * np.linalg.norm(sc - su)
        worst = max(worst, abs(lhs - rhs) / max(rhs, 1e-12))
    identity = np.array_equal(cfg_score(sc, su, 0.0), sc)
    return identity and worst < 1e-12, f"max relative error {worst:.1e}"


CHECKS = {
    "schedule": check_schedule,
    "forward-marginal": check_forward_marginal,
    "alignment": check_mas,
    "run-length": check_rle,
    "guidance": check_guidance,
}


def run_all(seed=0, report=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS.items():
        start = time.perf_counter()
        ok, detail = fn(np.random.default_rng(seed))
        all_ok &= bool(ok)
        report(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - start:.2f}s)")
    return all_ok
