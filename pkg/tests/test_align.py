import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unitadapt import align
from unitadapt.exceptions import ContractViolation, DataError


def all_paths(n_tok, n_frames):
    for starts in itertools.combinations(range(1, n_frames), n_tok - 1):
        yield np.repeat(np.arange(n_tok), np.diff((0, *starts, n_frames)))


def test_enumeration_count():
    assert len(list(all_paths(3, 6))) == math.comb(5, 2) == 10


def test_mas_matches_enumeration_3x6(rng):
    lp = rng.normal(size=(3, 6))
    best = max(align.path_score(lp, p) for p in all_paths(3, 6))
    assert align.path_score(lp, align.mas(lp)) == pytest.approx(best, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(0, 5), st.integers(0, 2 ** 32 - 1))
def test_mas_optimal_and_valid(n_tok, extra, seed):
    n_frames = n_tok + extra
    lp = np.random.default_rng(seed).normal(size=(n_tok, n_frames))
    path = align.mas(lp)
    align.check_path(path, n_tok)
    best = max(align.path_score(lp, p) for p in all_paths(n_tok, n_frames))
    assert align.path_score(lp, path) == pytest.approx(best, abs=1e-9)


def test_mas_square_is_diagonal():
    np.testing.assert_array_equal(align.mas(np.zeros((4, 4))), np.arange(4))


def test_mas_single_token():
    np.testing.assert_array_equal(align.mas(np.ones((1, 5))), np.zeros(5))


def test_mas_tie_breaks_late():
    # all paths tie; the backtrack stays on the current token, so the last token takes the extra frames
    np.testing.assert_array_equal(align.mas(np.zeros((2, 4))), [0, 1, 1, 1])


def test_mas_infeasible_and_invalid():
    with pytest.raises(DataError):
        align.mas(np.zeros((4, 3)))
    with pytest.raises(ContractViolation):
        align.mas(np.array([[0.0, np.nan]]))
    with pytest.raises(ContractViolation):
        align.mas(np.zeros(3))


def test_log_prior_reference_value():
    lp = align.log_prior_gaussian(np.zeros((1, 1)), np.full((1, 1), 2.0))
    assert lp[0, 0] == pytest.approx(-2 - 0.5 * math.log(2 * math.pi))
    assert lp[0, 0] == pytest.approx(-2.9189, abs=1e-4)


def test_log_prior_matches_loop(rng):
    c, x = rng.normal(size=(3, 5)), rng.normal(size=(7, 5))
    lp = align.log_prior_gaussian(c, x)
    for i, j in itertools.product(range(3), range(7)):
        expect = sum(-0.5 * (c[i, k] - x[j, k]) ** 2 - 0.5 * math.log(2 * math.pi) for k in range(5))
        assert lp[i, j] == pytest.approx(expect)


def test_log_prior_shape_mismatch():
    with pytest.raises(ContractViolation):
        align.log_prior_gaussian(np.zeros((2, 3)), np.zeros((4, 5)))


def test_durations_from_path():
    np.testing.assert_array_equal(align.durations_from_path([0, 0, 1, 2, 2, 2], 3), [2, 1, 3])


def test_check_path_rejects_skips():
    with pytest.raises(ContractViolation):
        align.check_path([0, 2, 2], 3)
    with pytest.raises(ContractViolation):
        align.check_path([0, 0, 1], 3)


def test_check_durations():
    with pytest.raises(ContractViolation):
        align.check_durations([2, 0, 1])
    with pytest.raises(ContractViolation):
        align.check_durations([2, 1], total=4)
    with pytest.raises(ContractViolation):
        align.check_durations([1.5, 2])
    assert align.check_durations([2.0, 1.0]).dtype == np.int64


def test_expand_numpy_and_torch():
    seq = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(align.expand(seq, [2, 1, 3])[:, 0], [1, 1, 2, 3, 3, 3])
    out = align.expand(torch.as_tensor(seq), [2, 1, 3])
    assert torch.is_tensor(out) and out.shape == (6, 1)
    with pytest.raises(ContractViolation):
        align.expand(seq, [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 2 ** 32 - 1))
def test_expand_roundtrip(d, seed):
    rows = np.random.default_rng(seed).normal(size=(len(d), 3))
    out = align.expand(rows, d)
    assert len(out) == sum(d)
    # rows are distinct almost surely, so the step pattern recovers the durations
    change = np.any(out[1:] != out[:-1], axis=1)
    path = np.concatenate([[0], np.cumsum(change)])
    np.testing.assert_array_equal(align.durations_from_path(path, len(d)), d)
    np.testing.assert_array_equal(align.path_from_durations(d), path)
