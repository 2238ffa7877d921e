import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collusion_lab.alphabet import (
    Alphabet,
    DecodedRows,
    EstimationError,
    Policy,
    RowDecodeResult,
    Status,
    build_unique_set,
    decode_row,
    decode_rows,
    enumerate_consistent,
    estimate_prior_from_exact_rows,
    pairwise_differences,
)
from collusion_lab.analysis import uniform_symmetric_row_error

from oracles import brute_consistent, brute_unique_set, random_tiebreak_row_error

TERNARY = Alphabet.uniform((-1.0, 0.0, 1.0))


# ---------------------------------------------------------------- Alphabet


@pytest.mark.parametrize(
    "symbols, prior",
    [((0.0,), (1.0,)), ((0.0, 0.0), (0.5, 0.5)), ((1.0, 0.0), (0.5, 0.5)), ((0.0, 1.0), (0.7, 0.7)),
     ((0.0, 1.0), (1.2, -0.2)), ((0.0, 1.0, 2.0), (0.5, 0.5))],
)
def test_alphabet_rejects_invalid(symbols, prior):
    with pytest.raises(ValueError):
        Alphabet(symbols, prior)


def test_alphabet_prior_sum_tolerance():
    Alphabet((0.0, 1.0), (0.5, 0.5 + 5e-13))
    with pytest.raises(ValueError):
        Alphabet((0.0, 1.0), (0.5, 0.5 + 1e-11))


def test_scaled_alphabet_keeps_prior_and_scales_tolerance():
    a = Alphabet((-1.0, 0.0, 1.0), (1 / 6, 2 / 3, 1 / 6)).scaled(0.5)
    assert a.symbols == (-0.5, 0.0, 0.5)
    assert a.prior == (1 / 6, 2 / 3, 1 / 6)
    assert a.tol == pytest.approx(1e-9)


# ------------------------------------------------------- unique differences


@pytest.mark.parametrize(
    "symbols, expected",
    [((-1, 0, 1), [-2, 2]), ((0, 1), [-1, 1]), ((0, 1, 2, 4), [-4, -3, 3, 4])],
)
def test_unique_set_examples(symbols, expected):
    u = build_unique_set(Alphabet.uniform(symbols))
    assert list(u.values) == expected
    assert brute_unique_set(symbols) == expected


@given(st.lists(st.integers(-20, 20), min_size=2, max_size=6, unique=True))
def test_unique_set_matches_brute_force(symbols):
    symbols = sorted(symbols)
    u = build_unique_set(Alphabet.uniform(symbols))
    assert list(u.values) == brute_unique_set(symbols)
    span = symbols[-1] - symbols[0]
    assert span in u and -span in u
    assert len(u.values) >= 2


# ------------------------------------------------------ pairwise differences


def test_pairwise_differences_examples():
    assert pairwise_differences([0, -1, -1, 1]) == {0, 1, -1, 2, -2}
    assert pairwise_differences([0]) == {0}
    assert pairwise_differences([0, -2]) == {0, 2, -2}


@given(st.lists(st.integers(-5, 5), min_size=0, max_size=5))
def test_pairwise_differences_properties(tail):
    row = [0, *tail]
    d = pairwise_differences(row)
    assert 0 in d
    assert all(-x in d for x in d)
    assert all(x in d for x in row)


# ------------------------------------------------------ consistent candidates


def test_enumerate_examples():
    assert enumerate_consistent([0, 0], TERNARY) == [(-1, -1), (0, 0), (1, 1)]
    assert enumerate_consistent([0, -1, -2], Alphabet.uniform((0, 1, 2))) == [(0, 1, 2)]
    assert enumerate_consistent([0, 5], TERNARY) == []


def test_enumerate_rejects_row_not_starting_at_zero():
    with pytest.raises(ValueError):
        enumerate_consistent([1, 0], TERNARY)


alphabets = st.lists(st.integers(-6, 6), min_size=2, max_size=4, unique=True).map(sorted)


@settings(max_examples=300)
@given(alphabets, st.integers(1, 5), st.data())
def test_enumerate_equals_brute_force(symbols, K, data):
    truth = data.draw(st.lists(st.sampled_from(symbols), min_size=K, max_size=K))
    perturb = data.draw(st.booleans())
    row = [truth[0] - t for t in truth]
    if perturb and K > 1:
        row[data.draw(st.integers(1, K - 1))] += data.draw(st.integers(-3, 3))
    got = enumerate_consistent(row, Alphabet.uniform(symbols))
    assert got == brute_consistent(row, symbols)
    if not perturb:
        assert tuple(float(t) for t in truth) in got


@given(alphabets, st.integers(1, 5), st.data())
def test_candidates_are_shifts_of_each_other(symbols, K, data):
    truth = data.draw(st.lists(st.sampled_from(symbols), min_size=K, max_size=K))
    cands = enumerate_consistent([truth[0] - t for t in truth], Alphabet.uniform(symbols))
    base = np.array(cands[0])
    for c in cands[1:]:
        diff = np.array(c) - base
        assert np.allclose(diff, diff[0])


@given(alphabets, st.integers(1, 5), st.data())
def test_unique_difference_hit_implies_exact(symbols, K, data):
    alpha = Alphabet.uniform(symbols)
    truth = data.draw(st.lists(st.sampled_from(symbols), min_size=K, max_size=K))
    row = [truth[0] - t for t in truth]
    u = build_unique_set(alpha)
    if any(d in u for d in pairwise_differences(row)):
        assert len(enumerate_consistent(row, alpha)) == 1


def test_exact_without_unique_hit():
    """A unique difference is sufficient for exactness but not necessary."""
    alpha = Alphabet.uniform((0, 1, 2, 4))
    row = [0, -1, -2]  # truth (0, 1, 2)
    u = build_unique_set(alpha)
    assert not any(d in u for d in pairwise_differences(row))
    assert decode_row(row, alpha) == RowDecodeResult(Status.EXACT, (0.0, 1.0, 2.0), 1)


def test_float_alphabet_tolerates_representation_error():
    z = math.sqrt(8 / 3)
    alpha = TERNARY.scaled(1 / z)
    f = np.array([1.0, -1.0, 0.0]) / z
    s = 0.123456789
    q = f + s
    row = q[0] - q
    assert enumerate_consistent(row, alpha) == [tuple(f)]


# ------------------------------------------------------------- row decoder


def test_decode_examples():
    r = decode_row([0, -1, -1, 1], TERNARY, Policy.MAX_PRIOR)
    assert r == RowDecodeResult(Status.EXACT, (0, 1, 1, -1), 1)
    assert decode_row([0, -1, -1, 1], TERNARY, Policy.MAX_ZEROS).estimate == (0, 1, 1, -1)
    p1 = Alphabet((-1, 0, 1), (1 / 6, 2 / 3, 1 / 6))
    r = decode_row([0, 0, 0], p1, Policy.MAX_PRIOR)
    assert r.status is Status.MOST_LIKELY and r.estimate == (0, 0, 0) and r.candidate_count == 3
    r = decode_row([0, 1], TERNARY, Policy.MAX_PRIOR)
    assert r.status is Status.MOST_LIKELY and r.candidate_count == 2 and r.estimate == (0, -1)
    r = decode_row([0, 5], TERNARY)
    assert r.status is Status.INCONSISTENT and r.estimate == () and r.candidate_count == 0


def test_max_zeros_needs_zero_symbol():
    with pytest.raises(ValueError):
        decode_row([0, 0], Alphabet.uniform((0.5, 1.5)), Policy.MAX_ZEROS)
    with pytest.raises(ValueError):
        decode_rows(np.zeros((2, 2)), Alphabet.uniform((0.5, 1.5)), Policy.MAX_ZEROS)


def test_max_zeros_prefers_sparse_candidate():
    r = decode_row([0, 0, 0], TERNARY, Policy.MAX_ZEROS)
    assert r.estimate == (0, 0, 0)
    r = decode_row([0, 1, 1], TERNARY, Policy.MAX_ZEROS)  # (1,0,0) has two zeros, (0,-1,-1) one
    assert r.estimate == (1, 0, 0)


def test_zero_prior_candidate_still_decodes():
    alpha = Alphabet((0.0, 1.0, 2.0), (0.0, 0.5, 0.5))
    r = decode_rows(np.array([[0.0, 2.0]]), alpha)
    assert r.index[0].tolist() == [2, 0]


@settings(max_examples=200)
@given(alphabets, st.integers(1, 5), st.sampled_from(list(Policy)), st.data())
def test_vectorised_decoder_matches_row_decoder(symbols, K, policy, data):
    if policy is Policy.MAX_ZEROS and 0 not in symbols:
        symbols = sorted({*symbols, 0})
    prior = data.draw(st.lists(st.integers(1, 5), min_size=len(symbols), max_size=len(symbols)))
    prior = [p / sum(prior) for p in prior]
    prior[-1] = 1 - sum(prior[:-1])
    alpha = Alphabet(tuple(symbols), tuple(prior))
    rows = []
    for _ in range(5):
        truth = data.draw(st.lists(st.sampled_from(symbols), min_size=K, max_size=K))
        row = [truth[0] - t for t in truth]
        if data.draw(st.booleans()) and K > 1:
            row[-1] += 7
        rows.append(row)
    dec = decode_rows(np.array(rows, dtype=float), alpha, policy)
    for i, row in enumerate(rows):
        assert dec.row(i) == decode_row(row, alpha, policy)


@given(alphabets, st.integers(1, 5), st.data())
def test_exact_rows_recover_truth(symbols, K, data):
    truth = data.draw(st.lists(st.sampled_from(symbols), min_size=K, max_size=K))
    r = decode_row([truth[0] - t for t in truth], Alphabet.uniform(symbols))
    assert r.status is not Status.INCONSISTENT
    if r.status is Status.EXACT:
        assert r.estimate == tuple(float(t) for t in truth)


# ------------------------------------------------------------ prior estimate


def test_prior_from_exact_rows_examples():
    exact = decode_row([0, -1, -1, 1], TERNARY)
    est = estimate_prior_from_exact_rows([exact], TERNARY)
    assert est.prior == pytest.approx((1 / 4, 1 / 4, 1 / 2))
    binary = Alphabet.uniform((0, 1))
    rows = [RowDecodeResult(Status.EXACT, (0.0, 0.0), 1), RowDecodeResult(Status.EXACT, (1.0, 1.0), 1),
            RowDecodeResult(Status.MOST_LIKELY, (1.0, 1.0), 2)]
    assert estimate_prior_from_exact_rows(rows, binary).prior == pytest.approx((0.5, 0.5))


def test_prior_estimate_without_exact_rows_fails():
    with pytest.raises(EstimationError):
        estimate_prior_from_exact_rows([decode_row([0, 0], TERNARY)], TERNARY)


def test_prior_estimate_concentrates():
    rng = np.random.default_rng(11)
    prior = np.array([1 / 6, 2 / 3, 1 / 6])
    f = rng.choice([-1.0, 0.0, 1.0], p=prior, size=(10_000, 4))
    # force every row to be exact by appending both extremes
    f = np.hstack([f, np.tile([-1.0, 1.0], (10_000, 1))])
    dec = decode_rows(f[:, :1] - f, TERNARY)
    assert dec.exact.all()
    est = estimate_prior_from_exact_rows(DecodedRows(dec.estimate[:, :4], dec.index[:, :4], dec.candidate_count),
                                         TERNARY)
    assert np.abs(np.array(est.prior) - prior).max() < 0.02


# -------------------------------------------- closed-form row error (small K)


@pytest.mark.parametrize("w, K", [(1, 1), (1, 2), (1, 3), (1, 4), (2, 2), (2, 3)])
def test_closed_form_row_error_matches_enumeration(w, K):
    expected = Fraction(2 * w, 2 * w + 1) ** K
    assert random_tiebreak_row_error(w, K) == expected
    assert uniform_symmetric_row_error(w, K) == pytest.approx(float(expected), rel=1e-14)


@pytest.mark.parametrize("w, K", [(1, 2), (1, 3), (2, 3)])
def test_decoder_error_equals_closed_form_exactly(w, K):
    """With the smallest-b_1 tie rule the decoder is wrong exactly when -w is absent."""
    from itertools import product

    symbols = tuple(float(x) for x in range(-w, w + 1))
    alpha = Alphabet.uniform(symbols)
    rows = np.array(list(product(symbols, repeat=K)))
    dec = decode_rows(rows[:, :1] - rows, alpha)
    wrong = (dec.estimate != rows).any(axis=1)
    assert Fraction(int(wrong.sum()), len(rows)) == Fraction(2 * w, 2 * w + 1) ** K
