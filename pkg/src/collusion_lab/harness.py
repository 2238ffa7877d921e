"""Monte Carlo experiment runner: seeded trials, per-K aggregation, CSV output."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import os
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import analysis
from .attacks import (
    Coalition,
    EstimationError,
    GaussianAttackParams,
    TardosForgeryParams,
    baseline_average,
    baseline_majority,
    baseline_minority,
    choose_xi,
    cwc_attack,
    etf_attack,
    finite_alphabet_attack,
    gaussian_attack,
    tardos_attack,
    tardos_forge,
)
from .alphabet import Policy
from .codes import (
    FingerprintMatrix,
    HostSignal,
    distribute,
    gen_cwc,
    gen_etf,
    gen_gaussian,
    gen_rtf,
    gen_symmetric,
    gen_tardos,
    load_steiner,
    tardos_cutoff,
    tardos_length,
)
from .detectors import calibrate_focused_threshold, focused_detect, tardos_accuse

log = logging.getLogger(__name__)

PROTOCOLS = ("failure_curve", "estimation_error", "detection_curve", "fp_vs_fnpr",
             "tardos_exact_fraction", "cwc_error")

# stage tags keep generation, host, coalition, attack and noise draws on disjoint streams
STAGES = {"trial": 0, "code": 1, "host": 2, "coalition": 3, "attack": 4, "forgery": 5, "noise": 6,
          "calibrate": 7}

TRIAL_COLUMNS = ["experiment_id", "K", "trial", "seed", "failure", "err_norm", "exact_fraction",
                 "caught_any", "innocents_accused", "fnpr_db", "attack", "noise_sigma",
                 "wrong_fraction", "worst_err", "phat_dev"]
SUMMARY_COLUMNS = ["K", "p_fail", "p_fail_lo", "p_fail_hi", "p_c", "fp", "mean_err", "max_err",
                   "analytic_ref", "attack", "trials", "mean_exact_fraction"]
BIN_COLUMNS = ["attack", "fnpr_bin_db", "trials", "fp", "fp_lo", "fp_hi"]
MIN_BIN_TRIALS = 30

SPEC_KEYS = {
    "experiment": {"id", "protocol", "trials", "seed", "output", "failure", "host", "materialize", "compare"},
    "code": {"family", "N", "M", "w", "p", "r", "h", "n", "m0", "K_design", "epsilon", "t", "steiner_file"},
    "attack": {"name", "policy", "prior", "xi", "xi_epsilon", "w", "alpha", "sigma0", "tau", "c1", "c2",
               "match_fnpr"},
    "detector": {"name", "threshold", "target_fa", "calib_sigma", "calib_trials", "center"},
    "sweep": {"K", "noise"},
}
REQUIRED_KEYS = {"experiment": {"id", "protocol"}, "code": {"family"}, "sweep": {"K"}}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    experiment_id: str
    protocol: str
    code: dict
    attack: dict
    coalition_sizes: list[int]
    trials: int = 100
    base_seed: int | None = None
    failure_criterion: str = "any"
    output: str | None = None
    detector: dict = field(default_factory=lambda: {"name": "none"})
    host: str = "gaussian"
    materialize: str = "auto"
    compare: list[str] = field(default_factory=list)
    noise_levels: list[float] = field(default_factory=lambda: [0.0])

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise SpecError(f"unknown protocol {self.protocol!r}")
        if self.trials < 1:
            raise SpecError("trials must be >= 1")
        if not self.coalition_sizes or min(self.coalition_sizes) < 1:
            raise SpecError("coalition sizes must be positive")
        M = code_users(self.code)
        if max(self.coalition_sizes) > M:
            raise SpecError(f"coalition size {max(self.coalition_sizes)} exceeds M={M}")
        parse_failure(self.failure_criterion)
        if self.host not in ("gaussian", "zero"):
            raise SpecError("host must be 'gaussian' or 'zero'")
        if self.materialize not in ("auto", "full", "coalition"):
            raise SpecError("materialize must be auto, full or coalition")

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)


def parse_failure(text: str) -> float | None:
    """'any' -> None (any wrong coordinate); 'fraction:θ' -> θ."""
    if text == "any":
        return None
    m = re.fullmatch(r"fraction:([0-9.eE+-]+)", text)
    if not m:
        raise SpecError(f"bad failure criterion {text!r}; use 'any' or 'fraction:<theta>'")
    theta = float(m.group(1))
    if not 0 < theta <= 1:
        raise SpecError("failure fraction must lie in (0, 1]")
    return theta


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    if re.fullmatch(r"[0-9.]+/[0-9.]+", text):
        num, den = text.split("/", 1)
        return float(_number(num.strip())) / float(_number(den.strip()))
    if text.startswith("pi"):
        return math.pi / float(text[3:]) if text.startswith("pi/") else math.pi
    try:
        return float(text)
    except ValueError:
        return text


def _list(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\.\.(\d+)(?::(\d+))?", part)
        if m:
            lo, hi, step = int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)
            out.extend(range(lo, hi + 1, step))
        else:
            out.append(_number(part))
    return out


def _line_of(text: str, section: str, key: str) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            current = s.strip("[]").strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return 0


def load_spec(path) -> ExperimentSpec:
    """Parse an INI spec: sections experiment/code/attack/detector/sweep, unknown keys rejected."""
    path = Path(path)
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise SpecError(f"{path}: {exc}") from exc
    for section in cp.sections():
        if section not in SPEC_KEYS:
            raise SpecError(f"{path}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SPEC_KEYS[section]:
                raise SpecError(f"{path}:{_line_of(text, section, key)}: unknown key {section}.{key}")
    for section, keys in REQUIRED_KEYS.items():
        for key in keys:
            if not cp.has_option(section, key):
                raise SpecError(f"{path}: missing required key {section}.{key}")
    ex = cp["experiment"]
    code = {k: _number(v) for k, v in cp["code"].items()}
    attack = {k: _number(v) for k, v in cp["attack"].items()} if cp.has_section("attack") else {}
    detector = {k: _number(v) for k, v in cp["detector"].items()} if cp.has_section("detector") else {}
    detector.setdefault("name", "none")
    sweep = cp["sweep"]
    try:
        return ExperimentSpec(
            experiment_id=ex["id"],
            protocol=ex["protocol"],
            code=code,
            attack=attack,
            detector=detector,
            coalition_sizes=[int(k) for k in _list(sweep["K"])],
            trials=int(ex.get("trials", "100")),
            base_seed=int(ex["seed"]) if "seed" in ex else None,
            failure_criterion=ex.get("failure", "any"),
            output=ex.get("output"),
            host=ex.get("host", "gaussian"),
            materialize=ex.get("materialize", "auto"),
            compare=[c.strip() for c in ex.get("compare", "").split(",") if c.strip()],
            noise_levels=[float(x) for x in _list(sweep.get("noise", "0"))],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------- records


@dataclass
class TrialRecord:
    experiment_id: str
    K: int
    trial: int
    seed: int
    failure: bool
    err_norm: float
    exact_fraction: float
    caught_any: bool | None = None
    innocents_accused: int | None = None
    fnpr_db: float | None = None
    attack: str = ""
    noise_sigma: float = 0.0
    wrong_fraction: float | None = None
    worst_err: float | None = None
    phat_dev: float | None = None


@dataclass
class SummaryRow:
    K: int
    attack: str
    trials: int
    failures: int
    p_fail_lo: float
    p_fail_hi: float
    caught: int | None
    innocent_trials: int | None
    mean_err: float
    max_err: float
    analytic_ref: float | None
    mean_exact_fraction: float

    @property
    def p_fail(self) -> float:
        return self.failures / self.trials

    @property
    def p_c(self) -> float | None:
        return None if self.caught is None else self.caught / self.trials

    @property
    def fp(self) -> float | None:
        return None if self.innocent_trials is None else self.innocent_trials / self.trials


@dataclass
class MetricsSummary:
    spec: ExperimentSpec
    records: list[TrialRecord]
    rows: list[SummaryRow]
    fnpr_bins: list[dict] = field(default_factory=list)
    thresholds: dict[int, float] = field(default_factory=dict)

    def row(self, K: int, attack: str | None = None) -> SummaryRow:
        for r in self.rows:
            if r.K == K and (attack is None or r.attack == attack):
                return r
        raise KeyError((K, attack))


def fnpr_db(f1_norm: float, distortion_norm: float) -> float:
    """20 log10(||f_1|| / ||y - s||); +inf when the forgery equals the host, -inf for an all-zero f_1."""
    if distortion_norm == 0:
        return math.inf
    if f1_norm == 0:
        return -math.inf
    return 20 * math.log10(f1_norm / distortion_norm)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(records: list[TrialRecord], path) -> None:
    """Trial CSV with the fixed column set; an empty list gives a header-only file."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TRIAL_COLUMNS)
        for r in records:
            out.writerow([_fmt(getattr(r, c)) for c in TRIAL_COLUMNS])


_TYPES = {"K": int, "trial": int, "seed": int, "failure": lambda s: bool(int(s)), "err_norm": float,
          "exact_fraction": float, "caught_any": lambda s: bool(int(s)), "innocents_accused": int,
          "fnpr_db": float, "noise_sigma": float, "wrong_fraction": float, "worst_err": float,
          "phat_dev": float}


def read_csv(path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        kw = {}
        for c in TRIAL_COLUMNS:
            v = row[c]
            conv = _TYPES.get(c)
            kw[c] = (None if v == "" else conv(v)) if conv else v
        if kw["attack"] is None:
            kw["attack"] = ""
        out.append(TrialRecord(**kw))
    return out


def write_summary(summary: MetricsSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SUMMARY_COLUMNS)
        for r in summary.rows:
            out.writerow([_fmt(x) for x in (r.K, r.p_fail, r.p_fail_lo, r.p_fail_hi, r.p_c, r.fp, r.mean_err,
                                            r.max_err, r.analytic_ref, r.attack, r.trials,
                                            r.mean_exact_fraction)])


def write_bins(summary: MetricsSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(BIN_COLUMNS)
        for b in summary.fnpr_bins:
            out.writerow([_fmt(b[c]) for c in BIN_COLUMNS])


# --------------------------------------------------------------------- seeds


def stage_seed(base_seed: int, K: int, trial: int, stage: str) -> int:
    """64-bit seed mixed from (base seed, K, trial, stage)."""
    ss = np.random.SeedSequence([base_seed, K, trial, STAGES[stage]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stage_rng(base_seed: int, K: int, trial: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(base_seed, K, trial, stage))


# --------------------------------------------------------------------- codes


def code_users(code: dict) -> int:
    fam = code["family"]
    if fam == "etf":
        return int(code["m0"]) * int(code["n"])
    if "M" not in code:
        raise SpecError("code.M is required for random families")
    return int(code["M"])


def code_length(code: dict) -> int:
    fam = code["family"]
    if fam == "tardos":
        return tardos_length(int(code["K_design"]), float(code["epsilon"]))[1]
    if fam == "etf":
        return len(_steiner_for(code).blocks)
    return int(code["N"])


def _steiner_for(code: dict):
    from .codes import steiner_system
    if code.get("steiner_file"):
        return load_steiner(code["steiner_file"])
    return steiner_system(int(code["r"]), int(code["h"]), int(code["n"]))


@lru_cache(maxsize=4)
def _cached_steiner(r, h, n, steiner_file):
    return _steiner_for({"r": r, "h": h, "n": n, "steiner_file": steiner_file})


def _etf(code: dict, users=None):
    import warnings
    S = _cached_steiner(int(code["r"]), int(code["h"]), int(code["n"]), code.get("steiner_file"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return gen_etf(int(code["r"]), int(code["h"]), int(code["n"]), int(code["m0"]), steiner=S, users=users)


def _probs(value) -> list[float]:
    """'1/6;1/6' or 0.25 -> list of floats."""
    if isinstance(value, str):
        return [float(_number(x.strip())) for x in value.split(";")]
    return [float(value)]


def make_code(code: dict, M: int, rng, users=None):
    """Generate a code with M users.  Returns (FingerprintMatrix, side info)."""
    fam = code["family"]
    if fam == "symmetric":
        return gen_symmetric(int(code["N"]), M, int(code["w"]), _probs(code["p"]), rng), None
    if fam == "rtf":
        return gen_rtf(int(code["N"]), M, _probs(code["p"])[0], rng), None
    if fam == "gaussian":
        return gen_gaussian(int(code["N"]), M, rng), None
    if fam == "tardos":
        tc = gen_tardos(int(code["K_design"]), float(code["epsilon"]), M, rng)
        return tc.code, tc
    if fam == "cwc":
        cc = gen_cwc(int(code["N"]), M, float(code["t"]), rng)
        return cc.code, cc
    if fam == "etf":
        return _etf(code, users), None
    raise SpecError(f"unknown code family {fam!r}")


def _host(spec: ExperimentSpec, N: int, rng) -> HostSignal:
    if spec.host == "zero":
        return HostSignal(np.zeros(N))
    return HostSignal(rng.standard_normal(N))


def _needs_full_code(spec: ExperimentSpec) -> bool:
    if spec.materialize != "auto":
        return spec.materialize == "full"
    return spec.detector.get("name", "none") != "none"


# -------------------------------------------------------------------- trials


@dataclass
class _Context:
    spec: ExperimentSpec
    thresholds: dict[int, float] = field(default_factory=dict)


def _draw(spec: ExperimentSpec, K: int, trial: int):
    """Code, host, marked copies and coalition for one trial."""
    M = code_users(spec.code)
    coalition_rng = stage_rng(spec.base_seed, K, trial, "coalition")
    members = Coalition.random(M, K, coalition_rng).members
    code_rng = stage_rng(spec.base_seed, K, trial, "code")
    if _needs_full_code(spec):
        F, side = make_code(spec.code, M, code_rng)
        coalition = Coalition(members)
    elif spec.code["family"] == "etf":
        F, side = make_code(spec.code, M, code_rng, users=members)
        coalition = Coalition(range(K))
    else:
        # i.i.d. columns: the coalition's columns alone have the same law
        F, side = make_code(spec.code, K, code_rng)
        coalition = Coalition(range(K))
    host = _host(spec, F.N, stage_rng(spec.base_seed, K, trial, "host"))
    return F, side, host, distribute(F, host), coalition


def _finite_alphabet_attack(spec, F, copies, coalition):
    name = spec.attack.get("name", "finite")
    if name == "etf":
        return etf_attack(copies, coalition, F)
    if name == "finite":
        policy = Policy(spec.attack.get("policy", "max-prior"))
        estimate = spec.attack.get("prior", "known") == "estimated"
        return finite_alphabet_attack(copies, coalition, F.scaled_alphabet(), policy, estimate_prior=estimate)
    if name == "tardos":
        return tardos_attack(copies, coalition)
    raise SpecError(f"attack {name!r} does not estimate the host for a failure curve")


def _gaussian_params(spec: ExperimentSpec, N: int, sigma0: float | None = None) -> GaussianAttackParams:
    a = spec.attack
    xi = a.get("xi")
    if xi is None:
        xi = choose_xi(N, float(a.get("xi_epsilon", 5 / 72)))
    s0 = float(a.get("sigma0", 0.0)) if sigma0 is None else sigma0
    return GaussianAttackParams(float(xi), int(a.get("w", 2)), float(a.get("alpha", 1.0)), s0)


def _trial_failure_curve(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    res = _finite_alphabet_attack(spec, F, copies, coalition)
    f1 = F.entries[:, coalition.pivot].astype(float)
    diff = f1 - res.pivot_estimate
    wrong = ~(diff == 0)
    wrong_fraction = float(wrong.mean())
    theta = parse_failure(spec.failure_criterion)
    failure = bool(wrong.any()) if theta is None else wrong_fraction >= theta
    return [TrialRecord(spec.experiment_id, K, trial, seed, failure, float(np.linalg.norm(diff)),
                        res.exact_fraction, attack=spec.attack.get("name", "finite"),
                        wrong_fraction=wrong_fraction)]


def _trial_estimation_error(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    params = _gaussian_params(spec, F.N)
    res = gaussian_attack(copies, coalition, params, stage_seed(spec.base_seed, K, trial, "forgery"))
    Fc = F.entries[:, list(coalition.members)]
    errs = np.linalg.norm(Fc - res.estimated_fingerprints, axis=0)
    bound = analysis.gaussian_error_bound(F.N, params.xi, params.w)
    return [TrialRecord(spec.experiment_id, K, trial, seed, bool(errs[0] > bound), float(errs[0]),
                        res.exact_fraction, attack="gaussian", worst_err=float(errs.max()))]


def _trial_tardos_fraction(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    res = tardos_attack(copies, coalition)
    N = F.N
    missed = N - res.exact_rows.size
    failure = False
    if K >= 4:
        failure = missed > analysis.thm2_bound(N, K, tardos_cutoff(int(spec.code["K_design"])))[0]
    diff = F.entries[:, coalition.pivot].astype(float) - res.pivot_estimate
    return [TrialRecord(spec.experiment_id, K, trial, seed, bool(failure), float(np.linalg.norm(diff)),
                        res.exact_fraction, attack="tardos", wrong_fraction=float((diff != 0).mean()))]


def _trial_cwc_error(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    N = F.N
    tau = float(spec.attack.get("tau", 0.05))
    try:
        res = cwc_attack(copies, coalition, tau, stage_seed(spec.base_seed, K, trial, "attack"))
    except EstimationError:
        return [TrialRecord(spec.experiment_id, K, trial, seed, True, math.nan, 0.0, attack="cwc")]
    Fc = F.entries[:, list(coalition.members)].astype(float)
    sq = ((Fc - res.estimated_fingerprints) ** 2).sum(axis=0)
    p_true = side.p[list(coalition.members)]
    phat_dev = float(np.max(np.abs(p_true - res.extras["p_hat"])))
    failure = (N - res.exact_rows.size) > N / K
    return [TrialRecord(spec.experiment_id, K, trial, seed, bool(failure), float(math.sqrt(sq[0])),
                        res.exact_fraction, attack="cwc", worst_err=float(sq.max() / N), phat_dev=phat_dev)]


def _detector_code(spec: ExperimentSpec, F: FingerprintMatrix) -> np.ndarray:
    """Code matrix seen by the focused detector; ``detector.center`` removes each fingerprint's own mean."""
    E = F.entries.astype(float)
    if int(spec.detector.get("center", 0)):
        E = E - E.mean(axis=0, keepdims=True)
    return E


def _distortion_scale(spec: ExperimentSpec, d: np.ndarray) -> float:
    """Norm of the part of ``d`` the focused detector can see (mean-free when centering)."""
    if int(spec.detector.get("center", 0)):
        d = d - d.mean()
    return float(np.linalg.norm(d))


def _detect(ctx: _Context, y, host: HostSignal, F: FingerprintMatrix, side, coalition: Coalition):
    name = ctx.spec.detector.get("name", "none")
    if name == "focused":
        tau = ctx.thresholds[len(coalition.members)]
        if ctx.spec.detector.get("threshold") is None:
            # calibrated thresholds are per unit distortion
            tau *= _distortion_scale(ctx.spec, np.asarray(y) - host.samples)
        acc = focused_detect(y, host, _detector_code(ctx.spec, F), tau, zero_norm="skip")
    elif name == "tardos":
        acc = tardos_accuse(np.asarray(y) - host.samples, side)
    else:
        raise SpecError(f"unknown detector {name!r}")
    members = set(coalition.members)
    caught = bool(acc.accused & members)
    innocents = len(acc.accused - members)
    return caught, innocents


def _proposed_forgery(ctx: _Context, F, side, copies, coalition, K, trial, unpadded=False):
    """Forgery and pivot-estimate error for the family's proposed attack."""
    spec = ctx.spec
    fam = spec.code["family"]
    f1 = F.entries[:, coalition.pivot].astype(float)
    fseed = stage_seed(spec.base_seed, K, trial, "forgery")
    if fam in ("gaussian", "cwc"):
        if fam == "gaussian":
            sigma0 = 0.0 if unpadded else None
            res = gaussian_attack(copies, coalition, _gaussian_params(spec, F.N, sigma0), fseed)
        else:
            res = cwc_attack(copies, coalition, float(spec.attack.get("tau", 0.05)),
                             stage_seed(spec.base_seed, K, trial, "attack"))
        return res.forgery, float(np.linalg.norm(f1 - res.pivot_estimate))
    if fam == "tardos":
        res = tardos_attack(copies, coalition)
        a = spec.attack
        params = TardosForgeryParams(a.get("sigma0"), float(a.get("c1", 1.0)), float(a.get("c2", 1.0)))
        y = tardos_forge(copies.copies[:, coalition.pivot], res.pivot_estimate, res.exact_rows, params, K, fseed)
        return y, float(np.linalg.norm(f1 - res.pivot_estimate))
    raise SpecError(f"no proposed attack for family {fam!r}")


def _baseline(name: str, copies, coalition, sigma: float, seed: int):
    if name == "average":
        return baseline_average(copies, coalition, sigma, seed)
    if name == "majority":
        return baseline_majority(copies, coalition)
    if name == "minority":
        return baseline_minority(copies, coalition)
    raise SpecError(f"unknown baseline attack {name!r}")


def _match_distortion(forgeries: dict, host: HostSignal, rng) -> dict:
    """Pad every forgery with white noise so all share the largest ||y - s|| (equal FNPR)."""
    norms = {k: float(np.linalg.norm(y - host.samples)) for k, (y, _) in forgeries.items()}
    target = max(norms.values())
    out = {}
    for name, (y, err) in forgeries.items():
        z = rng.standard_normal(y.size)
        gap = target**2 - norms[name] ** 2
        if gap > 0:
            # solve ||d + a z|| = target for a >= 0
            d = y - host.samples
            b = float(d @ z)
            zz = float(z @ z)
            a = (-b + math.sqrt(b * b + zz * gap)) / zz
            y = y + a * z
        out[name] = (y, err)
    return out


def _trial_detection(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    f1_norm = float(np.linalg.norm(F.entries[:, coalition.pivot]))
    sigma = float(spec.attack.get("sigma0", 0.0))
    nseed = stage_seed(spec.base_seed, K, trial, "noise")
    match = bool(int(spec.attack.get("match_fnpr", 0)))
    forgeries = {"proposed": _proposed_forgery(ctx, F, side, copies, coalition, K, trial, unpadded=match)}
    for name in spec.compare:
        forgeries[name] = (_baseline(name, copies, coalition, sigma, nseed), math.nan)
    if match:
        forgeries = _match_distortion(forgeries, host, stage_rng(spec.base_seed, K, trial, "noise"))
    out = []
    for name, (y, err) in forgeries.items():
        caught, innocents = _detect(ctx, y, host, F, side, coalition)
        dist = float(np.linalg.norm(y - host.samples))
        out.append(TrialRecord(spec.experiment_id, K, trial, seed, False, err, math.nan, caught, innocents,
                               fnpr_db(f1_norm, dist), attack=name, noise_sigma=sigma))
    return out


def _trial_fp_vs_fnpr(ctx: _Context, K: int, trial: int, seed: int) -> list[TrialRecord]:
    spec = ctx.spec
    F, side, host, copies, coalition = _draw(spec, K, trial)
    f1_norm = float(np.linalg.norm(F.entries[:, coalition.pivot].astype(float)))
    base = {"proposed": _proposed_forgery(ctx, F, side, copies, coalition, K, trial)}
    for name in spec.compare:
        base[name] = (_baseline(name, copies, coalition, 0.0, 0), math.nan)
    noise_rng = stage_rng(spec.base_seed, K, trial, "noise")
    unit = noise_rng.standard_normal((len(spec.noise_levels), F.N))
    out = []
    for name, (y0, err) in base.items():
        for level, z in zip(spec.noise_levels, unit):
            y = y0 + level * z
            caught, innocents = _detect(ctx, y, host, F, side, coalition)
            dist = float(np.linalg.norm(y - host.samples))
            out.append(TrialRecord(spec.experiment_id, K, trial, seed, False, err, math.nan, caught, innocents,
                                   fnpr_db(f1_norm, dist), attack=name, noise_sigma=level))
    return out


_TRIAL_FUNCS = {
    "failure_curve": _trial_failure_curve,
    "estimation_error": _trial_estimation_error,
    "detection_curve": _trial_detection,
    "fp_vs_fnpr": _trial_fp_vs_fnpr,
    "tardos_exact_fraction": _trial_tardos_fraction,
    "cwc_error": _trial_cwc_error,
}


def _run_one(args) -> list[TrialRecord]:
    ctx, K, trial = args
    seed = stage_seed(ctx.spec.base_seed, K, trial, "trial")
    return _TRIAL_FUNCS[ctx.spec.protocol](ctx, K, trial, seed)


def _calibrate(spec: ExperimentSpec) -> dict[int, float]:
    """Focused-detector threshold per K, per unit of distortion.

    Innocent scores scale with ||y - s||, so the trial threshold is
    ``tau_K * ||y - s||``.  ``tau_K`` is calibrated on the direction of the
    averaging forgery's distortion (the mean of K fresh fingerprints plus
    white noise of std ``attack.sigma0``).  An explicit ``detector.threshold``
    is used as-is.
    """
    det = spec.detector
    if det.get("name") != "focused":
        return {}
    if det.get("threshold") is not None:
        return {K: float(det["threshold"]) for K in spec.coalition_sizes}
    sigma = float(det.get("calib_sigma", spec.attack.get("sigma0", 0.0)))
    target = float(det.get("target_fa", 1e-3))
    trials = int(det.get("calib_trials", 1000))
    out = {}
    for K in spec.coalition_sizes:
        rng = stage_rng(spec.base_seed, K, 0, "calibrate")
        F, _ = make_code(spec.code, code_users(spec.code), rng)

        def distortion(r, N, K=K):
            cols, _ = make_code(spec.code, K, r)
            d = cols.entries.astype(float).mean(axis=1)
            if sigma > 0:
                d = d + r.normal(0.0, sigma, size=N)
            return d / _distortion_scale(spec, d)

        out[K] = calibrate_focused_threshold(_detector_code(spec, F), np.zeros(F.N), target, trials, distortion, rng,
                                             zero_norm="skip")
        log.info("%s K=%d: focused threshold %.6g (target FA %g)", spec.experiment_id, K, out[K], target)
    return out


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_trials(spec: ExperimentSpec, workers: int | None = None) -> tuple[list[TrialRecord], dict[int, float]]:
    if spec.base_seed is None:
        raise SpecError("a base seed is required")
    ctx = _Context(spec, _calibrate(spec))
    tasks = [(ctx, K, t) for K in spec.coalition_sizes for t in range(spec.trials)]
    workers = workers or default_workers()
    if workers <= 1:
        chunks = [_run_one(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (spec.coalition_sizes.index(r.K), r.trial))
    return records, ctx.thresholds


# ---------------------------------------------------------------- summaries


def _analytic_ref(spec: ExperimentSpec, K: int) -> float | None:
    code = spec.code
    fam = code["family"]
    if spec.protocol == "tardos_exact_fraction":
        return analysis.tardos_exact_fraction_analytic(K, tardos_cutoff(int(code["K_design"])))
    if spec.protocol == "cwc_error":
        return analysis.thm3_bounds(int(code["N"]), K)["expected_error"] / int(code["N"])
    if spec.protocol == "estimation_error":
        N = int(code["N"])
        p = _gaussian_params(spec, N)
        return analysis.gaussian_error_bound(N, p.xi, p.w)
    if spec.protocol == "failure_curve":
        if fam == "rtf":
            return min(1.0, code_length(code) * analysis.rtf_row_error_bound(K))
        if fam == "symmetric" and int(code["w"]) >= 1:
            probs = _probs(code["p"])
            if all(abs(x - probs[0]) < 1e-12 for x in probs):
                return min(1.0, code_length(code) * analysis.uniform_symmetric_row_error(int(code["w"]), K))
        if fam == "etf" and K >= 2:
            h, m0 = int(code["h"]), int(code["m0"])
            return min(1.0, code_length(code) * analysis.etf_row_error_bound(code_users(code), h, m0, K))
    return None


def summarize(spec: ExperimentSpec, records: list[TrialRecord], thresholds: dict | None = None) -> MetricsSummary:
    groups: dict[tuple[int, str], list[TrialRecord]] = defaultdict(list)
    for r in records:
        groups[(r.K, r.attack)].append(r)
    rows = []
    for K in spec.coalition_sizes:
        for (k, attack), recs in groups.items():
            if k != K:
                continue
            recs = [r for r in recs if r.noise_sigma == recs[0].noise_sigma] if spec.protocol != "fp_vs_fnpr" else recs
            n = len(recs)
            fails = sum(r.failure for r in recs)
            lo, hi = analysis.wilson_interval(fails, n)
            has_det = recs[0].caught_any is not None
            caught = sum(bool(r.caught_any) for r in recs) if has_det else None
            innocent = sum((r.innocents_accused or 0) > 0 for r in recs) if has_det else None
            stat = [r.worst_err if spec.protocol == "cwc_error" else r.err_norm for r in recs]
            stat = [s for s in stat if s is not None and not math.isnan(s)]
            exact = [r.exact_fraction for r in recs if not math.isnan(r.exact_fraction)]
            rows.append(SummaryRow(
                K, attack, n, fails, lo, hi, caught, innocent,
                float(np.mean(stat)) if stat else math.nan,
                float(np.max(stat)) if stat else math.nan,
                _analytic_ref(spec, K),
                float(np.mean(exact)) if exact else math.nan,
            ))
    bins = fnpr_bins(records) if spec.protocol == "fp_vs_fnpr" else []
    return MetricsSummary(spec, records, rows, bins, thresholds or {})


def fnpr_bins(records: list[TrialRecord], min_trials: int = MIN_BIN_TRIALS) -> list[dict]:
    """FP per attack per 1 dB FNPR bin; bins with fewer than ``min_trials`` trials are dropped."""
    groups: dict[tuple[str, float], list[TrialRecord]] = defaultdict(list)
    for r in records:
        b = math.inf if math.isinf(r.fnpr_db) else float(math.floor(r.fnpr_db))
        groups[(r.attack, b)].append(r)
    out = []
    for (attack, b), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if len(recs) < min_trials:
            continue
        fp = sum((r.innocents_accused or 0) > 0 for r in recs)
        lo, hi = analysis.wilson_interval(fp, len(recs))
        out.append({"attack": attack, "fnpr_bin_db": b, "trials": len(recs), "fp": fp / len(recs),
                    "fp_lo": lo, "fp_hi": hi})
    return out


def run_experiment(spec: ExperimentSpec, workers: int | None = None, out_dir=None) -> MetricsSummary:
    """Run every (K, trial), aggregate, and write CSVs when an output directory is set."""
    records, thresholds = run_trials(spec, workers)
    summary = summarize(spec, records, thresholds)
    for row in summary.rows:
        log.info("%s K=%d %s: p_fail=%.4f mean_err=%.4g", spec.experiment_id, row.K, row.attack or "-",
                 row.p_fail, row.mean_err)
    out_dir = out_dir if out_dir is not None else spec.output
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(records, out / f"{spec.experiment_id}_trials.csv")
        write_summary(summary, out / f"{spec.experiment_id}_summary.csv")
        if summary.fnpr_bins:
            write_bins(summary, out / f"{spec.experiment_id}_fnpr_bins.csv")
    return summary


# protocol aliases named after what each run measures
def run_failure_curve(spec, workers=None, out_dir=None):
    return run_experiment(spec.replace(protocol="failure_curve"), workers, out_dir)


def run_detection_curve(spec, workers=None, out_dir=None):
    return run_experiment(spec.replace(protocol="detection_curve"), workers, out_dir)


def run_fp_vs_fnpr(spec, workers=None, out_dir=None):
    return run_experiment(spec.replace(protocol="fp_vs_fnpr"), workers, out_dir)


def run_tardos_exact_fraction(spec, workers=None, out_dir=None):
    return run_experiment(spec.replace(protocol="tardos_exact_fraction"), workers, out_dir)


def run_cwc_error(spec, workers=None, out_dir=None):
    return run_experiment(spec.replace(protocol="cwc_error"), workers, out_dir)


# ------------------------------------------------------------- bundled specs

SPEC_DIR = Path(__file__).parent / "specs"

REPRODUCE = {
    "fig2": ["fig2_p1_729.ini", "fig2_p2_729.ini", "fig2_p1_2187.ini", "fig2_p2_2187.ini"],
    "fig3": ["fig3_etf_2_3_31.ini", "fig3_etf_2_2_128.ini"],
    "fig4": ["fig4_gaussian_error.ini"],
    "fig5": ["fig5_gaussian_1000.ini"],
    "fig6": ["fig6_gaussian_100.ini"],
    "fig7": ["fig7_cwc_detection.ini"],
    "fig8": ["fig8_tardos_fraction.ini"],
    "fig9": ["fig9_fp_vs_fnpr.ini"],
    "cwc1": ["cwc1_cwc_error.ini"],
}


def bundled_specs(target: str) -> list[ExperimentSpec]:
    if target not in REPRODUCE:
        raise SpecError(f"unknown reproduce target {target!r}; choose from {', '.join(REPRODUCE)}")
    return [load_spec(SPEC_DIR / name) for name in REPRODUCE[target]]
