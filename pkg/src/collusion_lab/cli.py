"""Command-line entry point: gen, attack, detect, bounds, experiment, reproduce."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, harness
from .alphabet import Alphabet, Policy
from .attacks import (
    Coalition,
    GaussianAttackParams,
    TardosForgeryParams,
    baseline_average,
    baseline_majority,
    baseline_minority,
    choose_xi,
    cwc_attack,
    finite_alphabet_attack,
    gaussian_attack,
    tardos_attack,
    tardos_forge,
)
from .codes import (
    FAMILIES,
    FingerprintMatrix,
    HostSignal,
    MarkedCopies,
    TardosCode,
    distribute,
    load_matrix_csv,
    save_matrix_csv,
    tardos_cutoff,
    tardos_length,
)
from .detectors import focused_detect, tardos_accuse

log = logging.getLogger("collusion_lab")

ATTACKS = ("finite", "etf", "tardos", "cwc", "gaussian", "average", "majority", "minority")


class UsageError(Exception):
    """Validation failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(harness._number(x.strip())) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _angle(text: str) -> float:
    return float(harness._number(text))


def _add_code_flags(p):
    g = p.add_argument_group("code parameters")
    g.add_argument("--family", choices=sorted(FAMILIES), help="code family")
    g.add_argument("--N", type=int, help="code length")
    g.add_argument("--M", type=int, help="number of users")
    g.add_argument("--w", type=int, help="symmetric alphabet half-size")
    g.add_argument("--p", type=str, help="symmetric probabilities p_1;...;p_w, or the RTF scalar")
    g.add_argument("--r", type=int, default=2, help="Steiner strength")
    g.add_argument("--h", type=int, help="Steiner block size")
    g.add_argument("--n", type=int, help="Steiner point count")
    g.add_argument("--m0", type=int, help="Hadamard order")
    g.add_argument("--steiner-file", help="block file for the Steiner system")
    g.add_argument("--K-design", dest="K_design", type=int, help="Tardos design coalition size")
    g.add_argument("--epsilon", type=float, help="Tardos error parameter")
    g.add_argument("--t", type=_angle, help="cutoff angle, e.g. pi/1000")


def _add_run_flags(p, trials=True):
    p.add_argument("--seed", type=int, help="base seed (required)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default: available CPUs)")
    if trials:
        p.add_argument("--trials", type=int, help="override the trial count per K")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collusion-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a code, a host and the marked copies")
    _add_code_flags(g)
    g.add_argument("--host", choices=("gaussian", "zero"), default="gaussian", help="host signal model")
    g.add_argument("--seed", type=int, help="seed (required except for etf)")
    g.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("attack", help="run an attack on marked copies")
    a.add_argument("--copies", required=True, help="N x M CSV of marked copies")
    a.add_argument("--coalition", required=True, type=_ints, help="comma-separated user indices, pivot first")
    a.add_argument("--attack", required=True, choices=ATTACKS)
    a.add_argument("--symbols", type=_floats, help="unscaled alphabet for finite/etf attacks")
    a.add_argument("--scale", type=float, default=1.0, help="normalisation z; symbols are divided by it")
    a.add_argument("--prior", type=_floats, help="symbol prior for the finite attack")
    a.add_argument("--policy", choices=[p.value for p in Policy], default="max-prior")
    a.add_argument("--estimate-prior", action="store_true", help="re-estimate the prior from exact rows")
    a.add_argument("--xi", type=float, help="Gaussian truncation bound (default from N)")
    a.add_argument("--w", type=int, default=2, help="Gaussian quantiser levels per side")
    a.add_argument("--alpha", type=float, default=1.0, help="Gaussian dead-zone factor")
    a.add_argument("--sigma0", type=float, help="forgery noise std (Gaussian, Tardos, average)")
    a.add_argument("--c1", type=float, default=1.0, help="Tardos forgery phase-noise divisor")
    a.add_argument("--c2", type=float, default=1.0, help="Tardos forgery ambiguous-row noise scale")
    a.add_argument("--tau", type=float, default=0.05, help="CWC bias margin")
    a.add_argument("--seed", type=int, help="seed (required for stochastic attacks)")
    a.add_argument("--out", required=True, help="output directory")

    d = sub.add_parser("detect", help="score a forgery against a code")
    d.add_argument("--forgery", required=True, help="forgery CSV (one column)")
    d.add_argument("--code", required=True, help="N x M fingerprint CSV")
    d.add_argument("--detector", required=True, choices=("focused", "tardos"))
    d.add_argument("--host", help="host CSV (default: zero host)")
    d.add_argument("--threshold", type=float, help="focused detector threshold")
    d.add_argument("--rho", help="Tardos column biases CSV")
    d.add_argument("--K-design", dest="K_design", type=int, help="Tardos design coalition size")
    d.add_argument("--epsilon", type=float, help="Tardos error parameter")
    d.add_argument("--out", required=True, help="output directory")

    b = sub.add_parser("bounds", help="print a closed-form bound as CSV")
    b.add_argument("bound", choices=analysis.BOUND_NAMES)
    b.add_argument("--N", type=int)
    b.add_argument("--M", type=int)
    b.add_argument("--K", type=int)
    b.add_argument("--delta", type=float)
    b.add_argument("--w", type=int)
    b.add_argument("--h", type=int)
    b.add_argument("--m0", type=int)
    b.add_argument("--t", type=_angle)
    b.add_argument("--xi", type=float)

    e = sub.add_parser("experiment", help="run an experiment spec file")
    e.add_argument("--spec", required=True, help="INI experiment spec")
    _add_run_flags(e)

    r = sub.add_parser("reproduce", help="run a bundled desk-scale experiment")
    r.add_argument("target", choices=[*harness.REPRODUCE, "all"])
    _add_run_flags(r)
    return parser


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _code_dict(args) -> dict:
    _require(args, "family")
    code = {"family": args.family}
    for key in ("N", "M", "w", "p", "r", "h", "n", "m0", "K_design", "epsilon", "t", "steiner_file"):
        v = getattr(args, key, None)
        if v is not None:
            code[key] = v
    return code


def _write_vector(path: Path, v) -> None:
    save_matrix_csv(path, np.asarray(v, dtype=float).reshape(-1, 1))


def _cmd_gen(args) -> None:
    code = _code_dict(args)
    if args.family != "etf":
        _require(args, "seed")
    M = harness.code_users(code)
    rng = np.random.default_rng(args.seed)
    F, side = harness.make_code(code, M, rng)
    host = HostSignal(np.zeros(F.N) if args.host == "zero" else rng.standard_normal(F.N))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix_csv(out / "fingerprints.csv", F.entries)
    _write_vector(out / "host.csv", host.samples)
    save_matrix_csv(out / "copies.csv", distribute(F, host).copies)
    if isinstance(side, TardosCode):
        _write_vector(out / "rho.csv", side.rho)
    elif side is not None:
        _write_vector(out / "p.csv", side.p)
    print(f"wrote {F.family} code N={F.N} M={F.M} scale={F.scale:.6g} to {out}")


def _cmd_attack(args) -> None:
    Q = load_matrix_csv(args.copies)
    if Q.ndim != 2:
        raise UsageError("copies must be an N x M matrix")
    copies = MarkedCopies(HostSignal(np.zeros(Q.shape[0])), Q)
    coalition = Coalition(args.coalition)
    name = args.attack
    if name in ("tardos", "cwc", "gaussian") or (name == "average" and args.sigma0):
        _require(args, "seed")
    res, y = None, None
    if name in ("finite", "etf"):
        _require(args, "symbols")
        if args.scale <= 0:
            raise UsageError("--scale must be positive")
        symbols = tuple(x / args.scale for x in args.symbols)
        alphabet = Alphabet(symbols, tuple(args.prior)) if args.prior else Alphabet.uniform(symbols)
        policy = Policy.MAX_ZEROS if name == "etf" else Policy(args.policy)
        res = finite_alphabet_attack(copies, coalition, alphabet, policy, estimate_prior=args.estimate_prior)
        y = res.host_estimate
    elif name == "tardos":
        res = tardos_attack(copies, coalition)
        params = TardosForgeryParams(args.sigma0, args.c1, args.c2)
        y = tardos_forge(Q[:, coalition.pivot], res.pivot_estimate, res.exact_rows, params, coalition.K, args.seed)
    elif name == "cwc":
        res = cwc_attack(copies, coalition, args.tau, args.seed)
        y = res.forgery
    elif name == "gaussian":
        xi = args.xi if args.xi is not None else choose_xi(Q.shape[0])
        res = gaussian_attack(copies, coalition, GaussianAttackParams(xi, args.w, args.alpha, args.sigma0 or 0.0),
                              args.seed)
        y = res.forgery
    elif name == "average":
        y = baseline_average(copies, coalition, args.sigma0 or 0.0, args.seed)
    elif name == "majority":
        y = baseline_majority(copies, coalition)
    else:
        y = baseline_minority(copies, coalition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_vector(out / "forgery.csv", y)
    if res is not None:
        save_matrix_csv(out / "estimated_fingerprints.csv", res.estimated_fingerprints)
        _write_vector(out / "host_estimate.csv", res.host_estimate)
        print(f"{name}: exact rows {res.exact_rows.size}/{Q.shape[0]}")
    else:
        print(f"{name}: forgery written")


def _cmd_detect(args) -> None:
    E = load_matrix_csv(args.code)
    y = load_matrix_csv(args.forgery).reshape(-1)
    s = load_matrix_csv(args.host).reshape(-1) if args.host else np.zeros(E.shape[0])
    if args.detector == "focused":
        _require(args, "threshold")
        acc = focused_detect(y, s, E, args.threshold)
    else:
        _require(args, "rho", "K_design", "epsilon")
        rho = load_matrix_csv(args.rho).reshape(-1)
        c, _ = tardos_length(args.K_design, args.epsilon)
        code = TardosCode(FingerprintMatrix(E.astype(np.uint8), "tardos", 1.0, None, {}), rho,
                          args.K_design, args.epsilon, c, tardos_cutoff(args.K_design))
        acc = tardos_accuse(y - s, code)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    acc.to_csv(out / "accusation.csv")
    print(f"accused {sorted(acc.accused)} at threshold {acc.threshold:.6g}")


def _cmd_bounds(args) -> None:
    params = {k: getattr(args, k) for k in ("N", "M", "K", "delta", "w", "h", "m0", "t", "xi")}
    try:
        rows = analysis.report(args.bound, **params)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bound {args.bound} needs more parameters ({exc})") from exc
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(analysis.CSV_HEADER)
    for row in rows:
        out.writerow(row.csv_row())


def _run_specs(specs, args) -> None:
    _require(args, "seed")
    if args.trials is not None and args.trials < 1:
        raise UsageError("--trials must be >= 1")
    for spec in specs:
        changes = {"base_seed": args.seed}
        if args.trials is not None:
            changes["trials"] = args.trials
        spec = spec.replace(**changes)
        out = args.out or spec.output or "."
        harness.run_experiment(spec, args.workers, out)
        print(f"{spec.experiment_id}: wrote {Path(out) / (spec.experiment_id + '_summary.csv')}")


def _cmd_experiment(args) -> None:
    _require(args, "seed")
    _run_specs([harness.load_spec(args.spec)], args)


def _cmd_reproduce(args) -> None:
    _require(args, "seed")
    targets = list(harness.REPRODUCE) if args.target == "all" else [args.target]
    _run_specs([s for t in targets for s in harness.bundled_specs(t)], args)


COMMANDS = {"gen": _cmd_gen, "attack": _cmd_attack, "detect": _cmd_detect, "bounds": _cmd_bounds,
            "experiment": _cmd_experiment, "reproduce": _cmd_reproduce}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
