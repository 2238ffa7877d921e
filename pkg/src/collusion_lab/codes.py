"""Fingerprint code families and marked-copy distribution."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .alphabet import Alphabet

log = logging.getLogger(__name__)

FAMILIES = ("symmetric", "rtf", "etf", "tardos", "cwc", "gaussian")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class HostSignal:
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("host signal must be a non-empty vector")
        if not np.all(np.isfinite(s)):
            raise ValueError("host signal has non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


@dataclass
class FingerprintMatrix:
    """N x M code; column m is user m's fingerprint.

    ``alphabet`` holds the unscaled symbols, entries equal ``symbol / scale``.
    """

    entries: np.ndarray
    family: str
    scale: float = 1.0
    alphabet: Alphabet | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    @property
    def M(self) -> int:
        return self.entries.shape[1]

    def scaled_alphabet(self) -> Alphabet | None:
        """Alphabet of the stored (scaled) entry values."""
        if self.alphabet is None:
            return None
        return self.alphabet.scaled(1.0 / self.scale)

    def columns(self, users: Sequence[int]) -> "FingerprintMatrix":
        users = list(users)
        meta = dict(self.meta, users=users)
        return FingerprintMatrix(self.entries[:, users], self.family, self.scale, self.alphabet, meta)

    def column_energy(self) -> np.ndarray:
        E = self.entries.astype(float)
        return np.einsum("ij,ij->j", E, E)


@dataclass
class MarkedCopies:
    host: HostSignal
    copies: np.ndarray

    @property
    def N(self) -> int:
        return self.copies.shape[0]

    @property
    def M(self) -> int:
        return self.copies.shape[1]


@dataclass(frozen=True)
class SteinerSystem:
    r: int
    h: int
    n: int
    blocks: tuple[tuple[int, ...], ...]  # 1-based points, sorted

    def __post_init__(self):
        validate_steiner(self.r, self.h, self.n, self.blocks)

    @property
    def replication(self) -> int:
        return math.comb(self.n - 1, self.r - 1) // math.comb(self.h - 1, self.r - 1)

    def incidence(self) -> np.ndarray:
        """Blocks x points 0/1 matrix."""
        X = np.zeros((len(self.blocks), self.n), dtype=np.int8)
        for b, block in enumerate(self.blocks):
            X[b, [p - 1 for p in block]] = 1
        return X


@dataclass(frozen=True)
class HadamardMatrix:
    order: int
    entries: np.ndarray


@dataclass
class TardosCode:
    code: FingerprintMatrix
    rho: np.ndarray
    K_design: int
    epsilon: float
    c: int
    t: float

    @property
    def threshold(self) -> float:
        return 20.0 * self.c * self.K_design


@dataclass
class CwcCode:
    code: FingerprintMatrix
    p: np.ndarray
    t: float


# ---------------------------------------------------------------- random codes


def gen_symmetric(N: int, M: int, w: int, p: Sequence[float], seed=None) -> FingerprintMatrix:
    """i.i.d. symbols ``k/z`` for ``k = -w..w`` with ``P(+-k/z) = p[k]``."""
    p = np.asarray(p, dtype=float)
    if w < 1:
        raise ValueError("w must be >= 1")
    if p.shape != (w + 1,):
        raise ValueError(f"probability vector needs {w + 1} entries")
    if np.any(p <= 0) or abs(p[0] + 2 * p[1:].sum() - 1.0) > 1e-12:
        raise ValueError("need p_k > 0 and p_0 + 2*sum(p_k) = 1")
    _check_dims(N, M)
    k = np.arange(1, w + 1)
    z = math.sqrt(2 * N * float(np.sum(p[1:] * k**2)))
    symbols = np.arange(-w, w + 1, dtype=float)
    prior = np.concatenate([p[:0:-1], p])
    prior[-1] = 1.0 - prior[:-1].sum()
    alphabet = Alphabet(tuple(symbols), tuple(prior))
    idx = _rng(seed).choice(symbols.size, size=(N, M), p=prior)
    entries = (symbols / z)[idx]
    return FingerprintMatrix(entries, "symmetric", z, alphabet, {"w": w, "p": p.tolist()})


def gen_rtf(N: int, M: int, p_scalar: float, seed=None) -> FingerprintMatrix:
    """Random ternary code: symmetric with w=1 and p=(1-2p, p)."""
    if not 0 < p_scalar < 0.5:
        raise ValueError("RTF parameter p must lie in (0, 1/2)")
    F = gen_symmetric(N, M, 1, (1 - 2 * p_scalar, p_scalar), seed)
    F.family = "rtf"
    F.meta["p_scalar"] = p_scalar
    return F


def gen_gaussian(N: int, M: int, seed=None) -> FingerprintMatrix:
    _check_dims(N, M)
    sigma = 1.0 / math.sqrt(N)
    entries = _rng(seed).normal(0.0, sigma, size=(N, M))
    return FingerprintMatrix(entries, "gaussian", 1.0, None, {"sigma": sigma})


def _sin2_angles(t: float, size: int, rng) -> np.ndarray:
    r = rng.uniform(t, math.pi / 2 - t, size=size)
    return np.sin(r) ** 2


def tardos_length(K_design: int, epsilon: float) -> tuple[int, int]:
    """(c, N) with c = ceil(ln(1/eps)) and N = 100 K^2 c."""
    if K_design < 2 or not 0 < epsilon < 1:
        raise ValueError("need K_design >= 2 and 0 < epsilon < 1")
    c = math.ceil(math.log(1.0 / epsilon))
    return c, 100 * K_design**2 * c


def tardos_cutoff(K_design: int) -> float:
    return math.asin(math.sqrt(1.0 / (300 * K_design)))


def gen_tardos(K_design: int, epsilon: float, M: int, seed=None) -> TardosCode:
    c, N = tardos_length(K_design, epsilon)
    _check_dims(N, M)
    rng = _rng(seed)
    t = tardos_cutoff(K_design)
    rho = _sin2_angles(t, N, rng)
    entries = (rng.random((N, M)) < rho[:, None]).astype(np.uint8)
    F = FingerprintMatrix(entries, "tardos", 1.0, Alphabet.uniform((0.0, 1.0)),
                          {"K_design": K_design, "epsilon": epsilon})
    return TardosCode(F, rho, K_design, epsilon, c, t)


def gen_cwc(N: int, M: int, t: float, seed=None) -> CwcCode:
    """Column-wise random binary code: column j is Bernoulli(sin^2 r_j)."""
    if not 0 < t < math.pi / 4:
        raise ValueError("t must lie in (0, pi/4)")
    _check_dims(N, M)
    rng = _rng(seed)
    p = _sin2_angles(t, M, rng)
    entries = (rng.random((N, M)) < p[None, :]).astype(np.uint8)
    F = FingerprintMatrix(entries, "cwc", 1.0, Alphabet.uniform((0.0, 1.0)), {"t": t})
    return CwcCode(F, p, t)


def _check_dims(N, M):
    if N < 1 or M < 1:
        raise ValueError("N and M must be positive")


# ------------------------------------------------------------- deterministic


def validate_steiner(r: int, h: int, n: int, blocks) -> None:
    if not 1 <= r <= h <= n:
        raise ValueError("need 1 <= r <= h <= n")
    expected = math.comb(n, r) // math.comb(h, r)
    if len(blocks) != expected:
        raise ValueError(f"S({r},{h},{n}) needs {expected} blocks, got {len(blocks)}")
    seen = set()
    for b in blocks:
        if len(b) != h or len(set(b)) != h:
            raise ValueError(f"block {b} does not have {h} distinct points")
        if min(b) < 1 or max(b) > n:
            raise ValueError(f"block {b} has points outside 1..{n}")
        for sub in combinations(sorted(b), r):
            if sub in seen:
                raise ValueError(f"{r}-subset {sub} is covered more than once")
            seen.add(sub)
    # block count times C(h, r) equals C(n, r), so no repeats means full cover


def _bose(n: int) -> list[tuple[int, ...]]:
    """Bose triple system for n = 6k + 3 on Z_{2k+1} x Z_3."""
    v = n // 3
    half = (v + 1) // 2  # inverse of 2 mod v

    def pt(x, i):
        return 3 * x + i + 1

    blocks = [(pt(x, 0), pt(x, 1), pt(x, 2)) for x in range(v)]
    for x, y in combinations(range(v), 2):
        m = ((x + y) * half) % v
        for i in range(3):
            blocks.append((pt(x, i), pt(y, i), pt(m, (i + 1) % 3)))
    return blocks


def _skolem(n: int) -> list[tuple[int, ...]]:
    """Skolem triple system for n = 6k + 1 on {inf} + Z_{2k} x Z_3."""
    k = (n - 1) // 6
    v = 2 * k

    def op(x, y):
        s = (x + y) % v
        return s // 2 if s % 2 == 0 else (s - 1) // 2 + k

    def pt(x, i):
        return 3 * x + i + 1

    inf = n
    blocks = [(pt(x, 0), pt(x, 1), pt(x, 2)) for x in range(k)]
    for x in range(k):
        for i in range(3):
            blocks.append((inf, pt(x + k, i), pt(x, (i + 1) % 3)))
    for x, y in combinations(range(v), 2):
        for i in range(3):
            blocks.append((pt(x, i), pt(y, i), pt(op(x, y), (i + 1) % 3)))
    return blocks


def steiner_system(r: int, h: int, n: int) -> SteinerSystem:
    if r == 2 and h == 2 and n >= 2:
        blocks = list(combinations(range(1, n + 1), 2))
    elif r == 2 and h == 3 and n % 6 == 3:
        blocks = _bose(n)
    elif r == 2 and h == 3 and n % 6 == 1 and n > 1:
        blocks = _skolem(n)
    else:
        raise ValueError(f"no built-in construction for S({r},{h},{n}); provide a block file")
    return SteinerSystem(r, h, n, tuple(sorted(tuple(sorted(b)) for b in blocks)))


def load_steiner(path, r: int = 2) -> SteinerSystem:
    """Read one block per line of whitespace-separated 1-based points."""
    blocks = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            blocks.append(tuple(sorted(int(x) for x in line.split())))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad block line {line!r}") from exc
    if not blocks:
        raise ValueError(f"{path}: no blocks")
    h = len(blocks[0])
    n = max(max(b) for b in blocks)
    return SteinerSystem(r, h, n, tuple(sorted(blocks)))


def hadamard(m0: int) -> HadamardMatrix:
    """Sylvester Hadamard matrix; first row and column all ones."""
    if m0 < 1 or m0 & (m0 - 1):
        raise ValueError(f"Hadamard order {m0} is not a power of 2")
    H = np.ones((1, 1), dtype=np.int8)
    while H.shape[0] < m0:
        H = np.block([[H, H], [H, -H]])
    return HadamardMatrix(m0, H)


def gen_etf(r: int, h: int, n: int, m0: int, *, steiner: SteinerSystem | None = None,
            users: Sequence[int] | None = None) -> FingerprintMatrix:
    """Steiner ETF: every 1 in a point's incidence column becomes a Hadamard entry.

    Point ``j`` owns users ``j*m0 .. j*m0 + m0 - 1`` (0-based).  User ``(j, k)``
    takes column ``k`` of H with its all-ones first row dropped, placed on the
    blocks through ``j`` in increasing block order.  ``users`` restricts the
    output to those columns.
    """
    S = steiner if steiner is not None else steiner_system(r, h, n)
    if (S.r, S.h, S.n) != (r, h, n):
        raise ValueError("Steiner system parameters do not match")
    R = S.replication
    if m0 < R + 1:
        raise ValueError(f"need m0 >= {R + 1} (replication + 1), got {m0}")
    H = hadamard(m0).entries
    if m0 > R + 1:
        warnings.warn(f"m0={m0} exceeds replication+1={R + 1}; columns are not equiangular", stacklevel=2)
    if n <= 8 * h:
        warnings.warn(f"n={n} <= 8h={8 * h}; the ETF error bound assumes n > 8h", stacklevel=2)
    M = m0 * n
    users = list(range(M)) if users is None else [int(u) for u in users]
    if any(not 0 <= u < M for u in users):
        raise ValueError(f"user index out of range 0..{M - 1}")
    nb = len(S.blocks)
    through = [[] for _ in range(n)]
    for b, block in enumerate(S.blocks):
        for p in block:
            through[p - 1].append(b)
    entries = np.zeros((nb, len(users)), dtype=float)
    z = math.sqrt(R)
    for col, u in enumerate(users):
        j, k = divmod(u, m0)
        entries[through[j], col] = H[1:R + 1, k] / z
    alphabet = Alphabet.uniform((-1.0, 0.0, 1.0))
    meta = {"r": r, "h": h, "n": n, "m0": m0, "replication": R, "M_total": M}
    if len(users) != M:
        meta["users"] = users
    return FingerprintMatrix(entries, "etf", z, alphabet, meta)


# -------------------------------------------------------------- distribution


def distribute(F: FingerprintMatrix, s: HostSignal) -> MarkedCopies:
    if F.N != len(s):
        raise ValueError(f"code has {F.N} rows but host has {len(s)} samples")
    return MarkedCopies(s, F.entries + s.samples[:, None])


def save_matrix_csv(path, X) -> None:
    np.savetxt(path, np.atleast_2d(np.asarray(X, dtype=float)), delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
