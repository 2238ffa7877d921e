"""Accusation mechanisms: the focused correlation detector and the Tardos score."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .codes import FingerprintMatrix, HostSignal, TardosCode

log = logging.getLogger(__name__)


@dataclass
class AccusationResult:
    accused: frozenset[int]
    scores: np.ndarray
    threshold: float

    @classmethod
    def from_scores(cls, scores, threshold: float) -> "AccusationResult":
        scores = np.asarray(scores, dtype=float)
        return cls(frozenset(np.flatnonzero(scores > threshold).tolist()), scores, float(threshold))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["user", "score", "accused"])
            for j, sc in enumerate(self.scores):
                out.writerow([j, repr(float(sc)), int(j in self.accused)])


def _samples(s) -> np.ndarray:
    return s.samples if isinstance(s, HostSignal) else np.asarray(s, dtype=float)


def _entries(F) -> np.ndarray:
    return np.asarray(F.entries if isinstance(F, FingerprintMatrix) else F, dtype=float)


def _column_norms(E: np.ndarray, zero_norm: str) -> np.ndarray:
    norms = np.linalg.norm(E, axis=0)
    if np.any(norms == 0):
        if zero_norm == "raise":
            raise ValueError("code has a zero-norm fingerprint")
        if zero_norm != "skip":
            raise ValueError("zero_norm must be 'raise' or 'skip'")
        norms = np.where(norms == 0, np.nan, norms)
    return norms


def focused_scores(y, s, F, zero_norm: str = "raise") -> np.ndarray:
    """``<y - s, f_j>/||f_j||``.  With ``zero_norm='skip'`` all-zero columns score NaN."""
    E = _entries(F)
    d = np.asarray(y, dtype=float) - _samples(s)
    if d.shape[0] != E.shape[0]:
        raise ValueError(f"forgery length {d.shape[0]} does not match code length {E.shape[0]}")
    return d @ E / _column_norms(E, zero_norm)


def focused_detect(y, s, F, threshold: float, zero_norm: str = "raise") -> AccusationResult:
    """Per-user correlation test: accuse j when <y - s, f_j>/||f_j|| exceeds the threshold."""
    return AccusationResult.from_scores(focused_scores(y, s, F, zero_norm), threshold)


def calibrate_focused_threshold(F, s, target_fa_per_user: float, trials: int,
                                noise_model: float | Callable = 1.0, seed=None,
                                zero_norm: str = "raise") -> float:
    """Empirical (1 - target) quantile of innocent scores under ``noise_model``.

    ``noise_model`` is a per-sample standard deviation for Gaussian noise, or a
    callable ``(rng, N) -> vector`` returning the forged distortion ``y - s``.
    """
    if not 0 < target_fa_per_user < 1:
        raise ValueError("target false-alarm rate must lie in (0, 1)")
    if trials < 100:
        raise ValueError("calibration needs at least 100 trials")
    E = _entries(F)
    rng = np.random.default_rng(seed)
    N = E.shape[0]
    if callable(noise_model):
        D = np.stack([np.asarray(noise_model(rng, N), dtype=float) for _ in range(trials)])
    else:
        D = rng.normal(0.0, float(noise_model), size=(trials, N))
    scores = (D @ E) / _column_norms(E, zero_norm)
    return float(np.nanquantile(scores.ravel(), 1.0 - target_fa_per_user))


def tardos_score_matrix(code: TardosCode) -> np.ndarray:
    rho = code.rho[:, None]
    F = code.code.entries.astype(bool)
    return np.where(F, np.sqrt((1 - rho) / rho), -np.sqrt(rho / (1 - rho)))


def binarize(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.all((y == 0) | (y == 1)):
        return y
    log.info("non-binary forgery hard-thresholded at 1/2")
    return (y > 0.5).astype(float)


def tardos_accuse(y, code: TardosCode) -> AccusationResult:
    """Accuse user j when (y^T U)_j > 20 c K_design."""
    y = binarize(y)
    if y.shape[0] != code.code.N:
        raise ValueError(f"forgery length {y.shape[0]} does not match code length {code.code.N}")
    return AccusationResult.from_scores(y @ tardos_score_matrix(code), code.threshold)
