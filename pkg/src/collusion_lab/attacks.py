"""Collusion strategies: the finite-alphabet difference attack, its variants, and baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .alphabet import (
    Alphabet,
    DecodedRows,
    EstimationError,
    Policy,
    decode_rows,
    estimate_prior_from_exact_rows,
)
from .codes import FingerprintMatrix, MarkedCopies, TardosCode

log = logging.getLogger(__name__)

# chosen so that choose_xi(1000) == 0.12
DEFAULT_XI_EPSILON = 5.0 / 72.0


@dataclass(frozen=True)
class Coalition:
    """Colluding users; ``members[0]`` is the pivot whose copy anchors the differences."""

    members: tuple[int, ...]

    def __init__(self, indices: Sequence[int], pivot: int | None = None):
        idx = [int(i) for i in indices]
        if not idx:
            raise ValueError("coalition needs at least one member")
        if len(set(idx)) != len(idx):
            raise ValueError("coalition indices must be distinct")
        if pivot is not None:
            if pivot not in idx:
                raise ValueError("pivot must belong to the coalition")
            idx.remove(pivot)
            idx.insert(0, pivot)
        object.__setattr__(self, "members", tuple(idx))

    @property
    def pivot(self) -> int:
        return self.members[0]

    @property
    def K(self) -> int:
        return len(self.members)

    @classmethod
    def random(cls, M: int, K: int, rng) -> "Coalition":
        if not 1 <= K <= M:
            raise ValueError(f"coalition size {K} outside 1..{M}")
        return cls(rng.choice(M, size=K, replace=False).tolist())


@dataclass
class DifferenceMatrix:
    entries: np.ndarray  # N x K, column i = q_pivot - q_i


@dataclass
class AttackResult:
    estimated_fingerprints: np.ndarray  # N x K, coalition order
    exact_rows: np.ndarray  # sorted row indices
    host_estimate: np.ndarray | None = None
    forgery: np.ndarray | None = None
    candidate_count: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def pivot_estimate(self) -> np.ndarray:
        return self.estimated_fingerprints[:, 0]

    @property
    def exact_fraction(self) -> float:
        return self.exact_rows.size / self.estimated_fingerprints.shape[0]


@dataclass(frozen=True)
class TardosForgeryParams:
    sigma0: float | None = None  # None -> 0.01 * ||s_hat|| / sqrt(N)
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if self.sigma0 is not None and self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if not self.c1 > 0:
            raise ValueError("c1 must be > 0")
        if self.c2 < 0:
            raise ValueError("c2 must be >= 0")


@dataclass(frozen=True)
class GaussianAttackParams:
    xi: float
    w: int = 2
    alpha: float = 1.0
    sigma0: float = 0.0

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError("xi must be > 0")
        if int(self.w) != self.w or self.w < 1:
            raise ValueError("w must be a positive integer")
        if not 0 < self.alpha <= 2:
            raise ValueError("alpha must lie in (0, 2]")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")

    @property
    def step(self) -> float:
        return self.xi / self.w


def _coalition_copies(copies: MarkedCopies, coalition: Coalition) -> np.ndarray:
    if max(coalition.members) >= copies.M or min(coalition.members) < 0:
        raise IndexError(f"coalition member outside 0..{copies.M - 1}")
    return copies.copies[:, list(coalition.members)]


def build_difference_matrix(copies: MarkedCopies, coalition: Coalition) -> DifferenceMatrix:
    Q = _coalition_copies(copies, coalition)
    return DifferenceMatrix(Q[:, :1] - Q)


def _result(Q: np.ndarray, decoded: DecodedRows, **extras) -> AttackResult:
    exact = np.flatnonzero(decoded.exact)
    n_bad = int(decoded.inconsistent.sum())
    if n_bad:
        log.warning("%d rows inconsistent with the alphabet; estimates left as NaN", n_bad)
    fhat = decoded.estimate
    return AttackResult(fhat, exact, Q[:, 0] - fhat[:, 0], None, decoded.candidate_count, dict(extras))


def finite_alphabet_attack(copies: MarkedCopies, coalition: Coalition, alphabet: Alphabet,
                           policy: Policy = Policy.MAX_PRIOR, estimate_prior: bool = False) -> AttackResult:
    """Decode every row of the difference matrix over ``alphabet`` (scaled symbols).

    With ``estimate_prior`` the colluders replace the prior by symbol frequencies
    over their exactly decoded rows before the final decoding pass.
    """
    Q = _coalition_copies(copies, coalition)
    A = Q[:, :1] - Q
    decoded = decode_rows(A, alphabet, policy)
    if estimate_prior:
        alphabet = estimate_prior_from_exact_rows(decoded, alphabet)
        decoded = decode_rows(A, alphabet, policy)
    return _result(Q, decoded, alphabet=alphabet)


def etf_attack(copies: MarkedCopies, coalition: Coalition, etf_code: FingerprintMatrix) -> AttackResult:
    """Finite-alphabet attack preferring the candidate with the most zeros (sparse codes)."""
    return finite_alphabet_attack(copies, coalition, etf_code.scaled_alphabet(), Policy.MAX_ZEROS)


_BINARY = Alphabet.uniform((0.0, 1.0))


def _binary_decode(copies: MarkedCopies, coalition: Coalition):
    Q = _coalition_copies(copies, coalition)
    decoded = decode_rows(Q[:, :1] - Q, _BINARY, Policy.MAX_PRIOR)
    if decoded.inconsistent.any():
        raise ValueError("copies are not binary fingerprints over a common host")
    return Q, decoded


def tardos_attack(copies: MarkedCopies, coalition: Coalition, code: TardosCode | None = None) -> AttackResult:
    """Rows with any difference are exact; all-equal rows are guessed as ones."""
    Q, decoded = _binary_decode(copies, coalition)
    exact = decoded.exact
    fhat = decoded.estimate.copy()
    fhat[~exact] = 1.0
    rho_hat = np.full(fhat.shape[0], np.nan)
    rho_hat[exact] = fhat[exact].mean(axis=1)
    return AttackResult(fhat, np.flatnonzero(exact), Q[:, 0] - fhat[:, 0], None,
                        decoded.candidate_count, {"rho_hat": rho_hat})


def tardos_forge(q_pivot, f_hat_pivot, exact_rows, params: TardosForgeryParams, K: int, seed=None) -> np.ndarray:
    """Spectral-noise forgery around the host estimate ``q_pivot - f_hat_pivot``.

    Magnitudes get Gaussian noise (clipped at 0) and phases get
    Uniform[0, pi/(2 K c1)] noise on the non-redundant real-FFT bins, which
    keeps the output real.  Rows outside ``exact_rows`` then receive
    ``c2 * w`` with ``w`` in {0, 1, -1} w.p. {1/2, 1/4, 1/4}.
    """
    rng = np.random.default_rng(seed)
    q = np.asarray(q_pivot, dtype=float)
    N = q.size
    s_hat = q - np.asarray(f_hat_pivot, dtype=float)
    w = rng.choice(np.array([0.0, 1.0, -1.0]), size=N, p=[0.5, 0.25, 0.25])
    w[np.asarray(exact_rows, dtype=int)] = 0.0
    sigma0 = params.sigma0
    if sigma0 is None:
        sigma0 = 0.01 * float(np.linalg.norm(s_hat)) / math.sqrt(N)
    X = np.fft.rfft(s_hat)
    mag = np.maximum(np.abs(X) + rng.normal(0.0, sigma0, size=X.size), 0.0)
    phase = np.angle(X) + rng.uniform(0.0, math.pi / (2 * K * params.c1), size=X.size)
    # DC and Nyquist bins are self-conjugate; a phase shift there breaks realness
    phase[0] = np.angle(X[0])
    if N % 2 == 0:
        phase[-1] = np.angle(X[-1])
    y = np.fft.irfft(mag * np.exp(1j * phase), n=N)
    return y + params.c2 * w


def cwc_fill_count(p_hat, n_exact: int, N: int) -> int:
    p_hat = np.asarray(p_hat, dtype=float)
    return int(math.floor((p_hat.min() + p_hat.max()) / 2 * (N - n_exact)))


def cwc_attack(copies: MarkedCopies, coalition: Coalition, tau: float = 0.05, seed=None) -> AttackResult:
    """Attack on column-wise random binary codes; ambiguous rows follow the estimated column bias."""
    if not 0 <= tau < 0.5:
        raise ValueError("tau must lie in [0, 1/2)")
    Q, decoded = _binary_decode(copies, coalition)
    exact = decoded.exact
    n_exact = int(exact.sum())
    if n_exact == 0:
        raise EstimationError("no exactly decoded rows; cannot estimate column probabilities")
    fhat = decoded.estimate.copy()
    p_hat = fhat[exact].sum(axis=0) / n_exact
    p_tot = float(p_hat.mean())
    rest = np.flatnonzero(~exact)
    n_star = None
    if p_tot > 0.5 + tau:
        fhat[rest] = 1.0
    elif p_tot < 0.5 - tau:
        fhat[rest] = 0.0
    else:
        n_star = cwc_fill_count(p_hat, n_exact, Q.shape[0])
        ones = np.random.default_rng(seed).choice(rest, size=n_star, replace=False)
        fhat[rest] = 0.0
        fhat[ones] = 1.0
    s_hat = Q[:, 0] - fhat[:, 0]
    return AttackResult(fhat, np.flatnonzero(exact), s_hat, s_hat.copy(), decoded.candidate_count,
                        {"p_hat": p_hat, "p_tot": p_tot, "n_star": n_star})


# ------------------------------------------------------------------ Gaussian


def choose_xi(N: int, epsilon: float = DEFAULT_XI_EPSILON) -> float:
    """Truncation bound with P(|f| >= xi) <= epsilon by Chebyshev, for f ~ N(0, 1/N)."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return math.sqrt(1.0 / N) * math.sqrt(1.0 / epsilon)


def gaussian_quantize(A, params: GaussianAttackParams) -> np.ndarray:
    """Map differences onto multiples of xi/w with a dead zone of half-width alpha*xi/(2w)."""
    a = np.asarray(getattr(A, "entries", A), dtype=float)
    d, w, xi = params.step, params.w, params.xi
    dead = params.alpha * d / 2
    top = (2 * w - 1) * d
    u = a / d
    neg = d * (np.floor(u) + 1)  # [d(m-1), dm) -> dm
    pos = d * (np.ceil(u) - 1)  # (dm, d(m+1)] -> dm
    return np.select(
        [a < -2 * xi, a < -d, a < -dead, a <= dead, a <= d, a <= 2 * xi],
        [-top, neg, -d, 0.0, d, pos],
        top,
    )


def gaussian_alphabet(params: GaussianAttackParams, N: int) -> Alphabet:
    """Bin centres ``-xi + (xi/2w)(2i-1)`` with N(0, 1/N) bin masses, tails folded in."""
    xi, w = params.xi, params.w
    levels = -xi + (xi / (2 * w)) * (2 * np.arange(1, 2 * w + 1) - 1)
    edges = -xi + params.step * np.arange(2 * w + 1)
    cdf = norm.cdf(edges, scale=1.0 / math.sqrt(N))
    cdf[0], cdf[-1] = 0.0, 1.0
    prior = np.diff(cdf)
    prior[-1] = 1.0 - prior[:-1].sum()
    return Alphabet(tuple(levels), tuple(prior), tol=xi / (2 * w))


def _relaxed_decode(A_hat: np.ndarray, alphabet: Alphabet) -> tuple[np.ndarray, np.ndarray]:
    """Per row: the b_1 whose implied symbols need the fewest out-of-alphabet snaps,
    then the highest prior, then the smallest b_1."""
    sym = np.asarray(alphabet.symbols)
    cand = sym[None, :, None] - A_hat[:, None, :]
    idx, ok = alphabet.index_of(cand)
    violations = (~ok).sum(axis=2)
    logp = np.log(np.maximum(np.asarray(alphabet.prior), 1e-300))[idx].sum(axis=2)
    best_v = violations.min(axis=1, keepdims=True)
    score = np.where(violations == best_v, logp, -np.inf)
    best = np.argmax(score, axis=1)
    rows = np.arange(A_hat.shape[0])
    return sym[idx[rows, best]], violations[rows, best]


def gaussian_attack(copies: MarkedCopies, coalition: Coalition, params: GaussianAttackParams,
                    seed=None) -> AttackResult:
    """Quantise the differences, decode over the binned alphabet, average the cleaned copies."""
    Q = _coalition_copies(copies, coalition)
    N, K = Q.shape
    A_hat = gaussian_quantize(Q[:, :1] - Q, params)
    alphabet = gaussian_alphabet(params, N)
    decoded = decode_rows(A_hat, alphabet, Policy.MAX_PRIOR)
    fhat = decoded.estimate
    bad = decoded.inconsistent
    if bad.any():
        fhat[bad], _ = _relaxed_decode(A_hat[bad], alphabet)
    noise = np.random.default_rng(seed).normal(0.0, params.sigma0, size=N) if params.sigma0 > 0 else 0.0
    y = (Q - fhat).mean(axis=1) + noise
    return AttackResult(fhat, np.flatnonzero(decoded.exact), Q[:, 0] - fhat[:, 0], y,
                        decoded.candidate_count, {"inconsistent_rows": int(bad.sum()), "alphabet": alphabet})


# ---------------------------------------------------------------- baselines


def baseline_average(copies: MarkedCopies, coalition: Coalition, noise_sigma: float = 0.0, seed=None) -> np.ndarray:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    Q = _coalition_copies(copies, coalition)
    y = Q.mean(axis=1)
    if noise_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, noise_sigma, size=y.size)
    return y


def _vote(copies: MarkedCopies, coalition: Coalition, minority: bool) -> np.ndarray:
    Q = np.sort(_coalition_copies(copies, coalition), axis=1)
    counts = (Q[:, :, None] == Q[:, None, :]).sum(axis=2)
    # rows are sorted, so the first extremum is the smallest symbol among ties
    pick = counts.argmin(axis=1) if minority else counts.argmax(axis=1)
    return Q[np.arange(Q.shape[0]), pick]


def baseline_minority(copies: MarkedCopies, coalition: Coalition) -> np.ndarray:
    """Per coordinate, the least frequent value among the coalition's copies."""
    return _vote(copies, coalition, minority=True)


def baseline_majority(copies: MarkedCopies, coalition: Coalition) -> np.ndarray:
    return _vote(copies, coalition, minority=False)
