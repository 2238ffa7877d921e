"""Finite-alphabet decoding: unique differences, consistent candidates, row decoder.

Rows are observations ``a = (0, f_1 - f_2, ..., f_1 - f_K)`` of a coalition's
symbols at one coordinate.  Any consistent symbol vector is fixed by its first
component, so the candidate set is found by trying each symbol as ``b_1``.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

MATCH_TOL = 1e-9


class EstimationError(ValueError):
    """The coalition observed nothing it could decode exactly."""


class Policy(str, enum.Enum):
    MAX_PRIOR = "max-prior"
    MAX_ZEROS = "max-zeros"


class Status(str, enum.Enum):
    EXACT = "exact"
    MOST_LIKELY = "most-likely"
    INCONSISTENT = "inconsistent"


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[float, ...]
    prior: tuple[float, ...]
    tol: float | None = None

    def __post_init__(self):
        symbols = tuple(float(x) for x in self.symbols)
        prior = tuple(float(x) for x in self.prior)
        if len(symbols) < 2:
            raise ValueError("alphabet needs at least two symbols")
        if len(prior) != len(symbols):
            raise ValueError("prior length must equal symbol count")
        if any(b <= a for a, b in zip(symbols, symbols[1:])):
            raise ValueError("symbols must be strictly increasing")
        if any(p < 0 for p in prior) or abs(sum(prior) - 1.0) > 1e-12:
            raise ValueError("prior must be non-negative and sum to 1")
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "prior", prior)
        if self.tol is None:
            object.__setattr__(self, "tol", MATCH_TOL * (symbols[-1] - symbols[0]))

    @classmethod
    def uniform(cls, symbols: Sequence[float], tol: float | None = None) -> "Alphabet":
        return cls(tuple(symbols), tuple([1.0 / len(symbols)] * len(symbols)), tol)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def span(self) -> float:
        return self.symbols[-1] - self.symbols[0]

    def scaled(self, factor: float) -> "Alphabet":
        """Alphabet with every symbol multiplied by ``factor`` (> 0)."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        tol = None if self.tol is None else self.tol * factor
        return Alphabet(tuple(s * factor for s in self.symbols), self.prior, tol)

    def with_prior(self, prior: Sequence[float]) -> "Alphabet":
        return Alphabet(self.symbols, tuple(prior), self.tol)

    def zero_index(self) -> int | None:
        for k, s in enumerate(self.symbols):
            if abs(s) <= self.tol:
                return k
        return None

    def index_of(self, values) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-symbol indices for ``values`` and a mask of those within tolerance."""
        sym = np.asarray(self.symbols)
        v = np.asarray(values, dtype=float)
        pos = np.clip(np.searchsorted(sym, v), 1, len(sym) - 1)
        left, right = sym[pos - 1], sym[pos]
        idx = np.where(np.abs(v - left) <= np.abs(right - v), pos - 1, pos)
        ok = np.abs(sym[idx] - v) <= self.tol
        return idx, ok


@dataclass(frozen=True)
class UniqueDifferenceSet:
    values: tuple[float, ...]
    source_alphabet: Alphabet

    def __contains__(self, u) -> bool:
        tol = self.source_alphabet.tol
        return any(abs(u - v) <= tol for v in self.values)


@dataclass(frozen=True)
class RowDecodeResult:
    status: Status
    estimate: tuple[float, ...]
    candidate_count: int


def build_unique_set(alphabet: Alphabet) -> UniqueDifferenceSet:
    """Differences ``xi_i - xi_j`` produced by exactly one ordered symbol pair."""
    tol = alphabet.tol
    groups: list[list[float]] = []  # [representative, count]
    for a, b in product(alphabet.symbols, repeat=2):
        d = a - b
        for g in groups:
            if abs(g[0] - d) <= tol:
                g[1] += 1
                break
        else:
            groups.append([d, 1])
    values = tuple(sorted(g[0] for g in groups if g[1] == 1))
    return UniqueDifferenceSet(values, alphabet)


def pairwise_differences(row: Sequence[float]) -> set[float]:
    a = list(row)
    return {x - y for x in a for y in a}


def _check_row(row) -> np.ndarray:
    a = np.asarray(row, dtype=float)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("observation row must be a non-empty vector")
    if a[0] != 0:
        raise ValueError("observation row must start with 0")
    return a


def enumerate_consistent(row: Sequence[float], alphabet: Alphabet) -> list[tuple[float, ...]]:
    """All symbol vectors ``b`` with ``b_1 - b_j = a_j`` for every j, by increasing ``b_1``."""
    a = _check_row(row)
    sym = np.asarray(alphabet.symbols)
    out = []
    for b1 in alphabet.symbols:
        idx, ok = alphabet.index_of(b1 - a)
        if ok.all():
            out.append(tuple(float(x) for x in sym[idx]))
    return out


def _scores(idx: np.ndarray, alphabet: Alphabet, policy: Policy) -> np.ndarray:
    """Score candidate index arrays (..., K); larger is better."""
    policy = Policy(policy)
    if policy is Policy.MAX_ZEROS:
        z = alphabet.zero_index()
        if z is None:
            raise ValueError("max-zeros policy needs 0 in the alphabet")
        return (idx == z).sum(axis=-1).astype(float)
    # floor keeps zero-prior candidates finite so they still beat invalid slots
    logp = np.log(np.maximum(np.asarray(alphabet.prior), 1e-300))
    return logp[idx].sum(axis=-1)


def decode_row(row: Sequence[float], alphabet: Alphabet, policy: Policy = Policy.MAX_PRIOR) -> RowDecodeResult:
    policy = Policy(policy)
    if policy is Policy.MAX_ZEROS and alphabet.zero_index() is None:
        raise ValueError("max-zeros policy needs 0 in the alphabet")
    cands = enumerate_consistent(row, alphabet)
    if not cands:
        return RowDecodeResult(Status.INCONSISTENT, (), 0)
    if len(cands) == 1:
        return RowDecodeResult(Status.EXACT, cands[0], 1)
    idx = np.array([alphabet.index_of(c)[0] for c in cands])
    scores = _scores(idx, alphabet, policy)
    # argmax returns the first maximum, i.e. the smallest b_1
    best = int(np.argmax(scores))
    return RowDecodeResult(Status.MOST_LIKELY, cands[best], len(cands))


@dataclass
class DecodedRows:
    """Vectorised decoder output for an N x K difference matrix."""

    estimate: np.ndarray  # N x K symbol values, NaN on inconsistent rows
    index: np.ndarray  # N x K symbol indices, -1 on inconsistent rows
    candidate_count: np.ndarray  # N

    @property
    def exact(self) -> np.ndarray:
        return self.candidate_count == 1

    @property
    def inconsistent(self) -> np.ndarray:
        return self.candidate_count == 0

    def statuses(self) -> list[Status]:
        return [
            Status.EXACT if c == 1 else Status.INCONSISTENT if c == 0 else Status.MOST_LIKELY
            for c in self.candidate_count
        ]

    def row(self, i: int) -> RowDecodeResult:
        c = int(self.candidate_count[i])
        if c == 0:
            return RowDecodeResult(Status.INCONSISTENT, (), 0)
        status = Status.EXACT if c == 1 else Status.MOST_LIKELY
        return RowDecodeResult(status, tuple(float(x) for x in self.estimate[i]), c)


def decode_rows(A, alphabet: Alphabet, policy: Policy = Policy.MAX_PRIOR) -> DecodedRows:
    """Decode every row of ``A`` at once; same result as :func:`decode_row` per row."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("difference matrix must be 2-D")
    sym = np.asarray(alphabet.symbols)
    N = A.shape[0]
    # candidates[n, c, k] = symbol index of b_k when b_1 = sym[c]
    idx, ok = alphabet.index_of(sym[None, :, None] - A[:, None, :])
    valid = ok.all(axis=2)
    count = valid.sum(axis=1)
    scores = np.where(valid, _scores(idx, alphabet, policy), -np.inf)
    best = np.argmax(scores, axis=1)
    chosen = idx[np.arange(N), best]
    bad = count == 0
    chosen[bad] = -1
    est = sym[chosen]
    est[bad] = np.nan
    return DecodedRows(est, chosen, count)


def estimate_prior_from_exact_rows(decoded, alphabet: Alphabet) -> Alphabet:
    """Empirical symbol frequencies over the uniquely decoded rows.

    ``decoded`` is a list of :class:`RowDecodeResult` or a :class:`DecodedRows`.
    """
    counts = np.zeros(alphabet.size)
    if isinstance(decoded, DecodedRows):
        rows = decoded.index[decoded.exact]
        counts += np.bincount(rows.ravel(), minlength=alphabet.size)
    else:
        c = Counter()
        for r in decoded:
            if r.status is Status.EXACT:
                idx, _ = alphabet.index_of(r.estimate)
                c.update(int(i) for i in idx)
        for k, v in c.items():
            counts[k] = v
    total = counts.sum()
    if total == 0:
        raise EstimationError("no exactly decoded rows; cannot estimate the prior")
    prior = counts / total
    prior[-1] = 1.0 - prior[:-1].sum()
    return alphabet.with_prior(np.clip(prior, 0.0, 1.0))
