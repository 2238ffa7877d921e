"""Closed-form attack bounds.  Logarithms are natural throughout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy.special import gammaln

LOWER_K = "lower-bound-on-K"
UPPER_ERROR = "upper-bound-on-error"
UPPER_COUNT = "upper-bound-on-count"


@dataclass(frozen=True)
class BoundReport:
    name: str
    value: float
    side: str
    confidence: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.name}: non-finite bound")
        if self.confidence is not None and not 0 <= self.confidence <= 1:
            raise ValueError(f"{self.name}: confidence outside [0, 1]")

    def csv_row(self) -> list[str]:
        conf = "" if self.confidence is None else repr(self.confidence)
        value = str(int(self.value)) if float(self.value).is_integer() else repr(self.value)
        params = ";".join(f"{k}={v}" for k, v in self.params.items())
        return [self.name, value, self.side, conf, params]


CSV_HEADER = ["name", "value", "side", "confidence", "params"]


def _check_delta(delta):
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


def _check_N(N):
    if N < 1:
        raise ValueError("N must be >= 1")


def thm1_min_coalition(N: int, delta: float) -> int:
    """Coalition size that recovers the host from an ETF code w.p. > 1 - delta."""
    _check_N(N)
    _check_delta(delta)
    return math.ceil(2 * math.log(4 * N / delta))


def lemma1_min_coalition(N: int, delta: float, w: int) -> int:
    _check_N(N)
    _check_delta(delta)
    if w < 1:
        raise ValueError("w must be >= 1")
    return math.ceil(math.log(N / delta) / math.log(1 + 1 / (2 * w)))


def uniform_symmetric_row_error(w: int, K: int) -> float:
    """Per-row error of the attack on a uniformly symmetric code: (2w/(2w+1))^K."""
    if w < 1 or K < 0:
        raise ValueError("need w >= 1 and K >= 0")
    return (1 - 1 / (2 * w + 1)) ** K


def lemma2_min_coalition(N: int, delta: float) -> int:
    _check_N(N)
    _check_delta(delta)
    return math.ceil(math.log(2 * N / delta) / math.log(4 / 3))


def rtf_row_error_bound(K: int) -> float:
    if K < 0:
        raise ValueError("K must be >= 0")
    return 2 * 0.75**K


def _log_comb(n: float, k: float) -> float:
    if k < 0 or k > n or n < 0:
        return -math.inf
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def etf_row_error_bound(M: int, h: int, m0: int, K: int) -> float:
    """Per-row error bound for the max-zeros attack on a Steiner ETF."""
    hm0 = h * m0
    if M <= hm0 or K < 2 or hm0 % 2:
        raise ValueError("need M > h*m0, even h*m0 and K >= 2")
    denom = _log_comb(M, K)
    total = 0.0
    for i in range(K // 2 + 1):
        lt = _log_comb(M - hm0, i) + _log_comb(hm0 // 2, K - i)
        if lt > -math.inf:
            total += math.exp(lt - denom)
    return 2 * total


def etf_chain_bound(M: int, h: int, m0: int, K: int) -> float:
    """Closed-form relaxation 4 (e h m0 (M - h m0) / (M (M - K/2)))^(K/2)."""
    hm0 = h * m0
    return 4 * (math.e * hm0 * (M - hm0) / (M * (M - K / 2))) ** (K / 2)


def thm2_constant(t: float) -> float:
    if not 0 < t < math.pi / 4:
        raise ValueError("t must lie in (0, pi/4)")
    return 2 / (math.sqrt(300) * (math.pi / 2 - 2 * t)) + 2 / math.sqrt(math.pi)


def thm2_bound(N: int, K: int, t: float) -> tuple[float, float]:
    """(bound on N - |I| for a Tardos code, probability it holds)."""
    if K < 4:
        raise ValueError("the Tardos count bound needs K >= 4")
    _check_N(N)
    C = thm2_constant(t)
    return 2 * C * N / math.sqrt(K), 1 - (math.sqrt(K) - C) / (N * C)


def thm3_bounds(N: int, K: int) -> dict:
    """Column-wise code bounds: failed-row count, expected error, column-bias accuracy."""
    _check_N(N)
    if K < 1:
        raise ValueError("K must be >= 1")
    return {
        "fail_count_bound": N / K,
        "fail_prob": 1 - 12 * K**2 * (3 / 8) ** K - 8 * K**2 / (N * 2**K),
        "expected_error": N / 2 ** (K - 1),
        "phat_dev": math.sqrt(math.log(N) / N),
        "phat_prob": 1 - 2 * K / N ** (2 - 1 / 2 ** (K - 2)),
        "valid": K > 6,
    }


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 60) -> float:
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6 * (fa + 4 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1)

    fa, fb, fm = f(a), f(b), f((a + b) / 2)
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def tardos_exact_fraction_analytic(K: int, t: float) -> float:
    """Expected |I|/N for a Tardos code: 1 - E[rho^K + (1 - rho)^K]."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 <= t < math.pi / 4:
        raise ValueError("t must lie in [0, pi/4)")

    def g(x):
        return math.sin(x) ** (2 * K) + math.cos(x) ** (2 * K)

    lo, hi, mid = t, math.pi / 2 - t, math.pi / 4
    integral = adaptive_simpson(g, lo, mid) + adaptive_simpson(g, mid, hi)
    return 1 - integral / (hi - lo)


def gaussian_error_bound(N: int, xi: float, w: int) -> float:
    """Bound on E||f_1 - f_hat_1|| for the quantised attack on N(0, 1/N) fingerprints."""
    _check_N(N)
    if not xi > 0 or w < 1:
        raise ValueError("need xi > 0 and w >= 1")
    return math.sqrt(N / 2) * (1 / math.sqrt(N) + (2 * w - 1) * xi / (2 * w))


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def report(name: str, **params) -> list[BoundReport]:
    """BoundReport rows for the named bound (CLI entry)."""
    if name == "thm1":
        N, delta = int(params["N"]), float(params["delta"])
        return [BoundReport("thm1_min_coalition", thm1_min_coalition(N, delta), LOWER_K, 1 - delta,
                            {"N": N, "delta": delta})]
    if name == "lemma1":
        N, delta, w = int(params["N"]), float(params["delta"]), int(params["w"])
        rows = [BoundReport("lemma1_min_coalition", lemma1_min_coalition(N, delta, w), LOWER_K, 1 - delta,
                            {"N": N, "delta": delta, "w": w})]
        if params.get("K") is not None:
            K = int(params["K"])
            rows.append(BoundReport("uniform_symmetric_row_error", uniform_symmetric_row_error(w, K),
                                    UPPER_ERROR, None, {"w": w, "K": K}))
        return rows
    if name == "lemma2":
        N, delta = int(params["N"]), float(params["delta"])
        rows = [BoundReport("lemma2_min_coalition", lemma2_min_coalition(N, delta), LOWER_K, 1 - delta,
                            {"N": N, "delta": delta})]
        if params.get("K") is not None:
            K = int(params["K"])
            rows.append(BoundReport("rtf_row_error_bound", rtf_row_error_bound(K), UPPER_ERROR, None, {"K": K}))
        return rows
    if name == "etf":
        M, h, m0, K = (int(params[k]) for k in ("M", "h", "m0", "K"))
        return [BoundReport("etf_row_error_bound", etf_row_error_bound(M, h, m0, K), UPPER_ERROR, None,
                            {"M": M, "h": h, "m0": m0, "K": K})]
    if name == "thm2":
        N, K, t = int(params["N"]), int(params["K"]), float(params["t"])
        count, prob = thm2_bound(N, K, t)
        return [BoundReport("thm2_count_bound", count, UPPER_COUNT, prob, {"N": N, "K": K, "t": t})]
    if name == "thm3":
        N, K = int(params["N"]), int(params["K"])
        b = thm3_bounds(N, K)
        p = {"N": N, "K": K}
        return [
            BoundReport("thm3_fail_count_bound", b["fail_count_bound"], UPPER_COUNT,
                        min(1.0, max(0.0, b["fail_prob"])), p),
            BoundReport("thm3_expected_error", b["expected_error"], UPPER_ERROR, None, p),
            BoundReport("thm3_phat_dev", b["phat_dev"], UPPER_ERROR, min(1.0, max(0.0, b["phat_prob"])), p),
        ]
    if name == "tardos-fraction":
        K, t = int(params["K"]), float(params["t"])
        return [BoundReport("tardos_exact_fraction", tardos_exact_fraction_analytic(K, t), UPPER_COUNT, None,
                            {"K": K, "t": t})]
    if name == "gaussian":
        N, xi, w = int(params["N"]), float(params["xi"]), int(params["w"])
        return [BoundReport("gaussian_error_bound", gaussian_error_bound(N, xi, w), UPPER_ERROR, None,
                            {"N": N, "xi": xi, "w": w})]
    raise ValueError(f"unknown bound {name!r}")


BOUND_NAMES = ("thm1", "lemma1", "lemma2", "etf", "thm2", "thm3", "tardos-fraction", "gaussian")
