"""Command-line entry points: ``esm simulate``, ``esm fit``, ``esm predict``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from esmci import __version__
from esmci import config as cfgmod
from esmci.ensemble import fit_ensemble, resolve_r
from esmci.errors import ConfigError, DataValidationError, DesignError, DomainError, ESMError, FormatError
from esmci.expfam import psi_prime
from esmci.infer import confidence_intervals
from esmci.io import load_ensemble, save_ensemble
from esmci.sim import SimDesign, run_experiment, write_report

log = logging.getLogger("esmci")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

PREDICT_COLUMNS = ("row_id", "fhat_canonical", "mean_estimate", "se_uncorrected", "se_corrected",
                   "clamped", "mean_ci_lower", "mean_ci_upper")


class UsageError(Exception):
    """Bad invocation or input; maps to exit code 2."""


# -- CSV ---------------------------------------------------------------------

def read_table(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    """Header and data rows.  Accepts LF and CRLF line endings."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row]
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {os.fspath(path)!r}: {exc}") from None
    if not rows:
        raise UsageError(f"{os.fspath(path)!r} is empty; a header row is required")
    header = [h.strip() for h in rows[0]]
    return header, rows[1:]


def numeric_matrix(rows: list[list[str]], columns: list[int], names: list[str]) -> np.ndarray:
    """Parse the chosen columns as floats; errors cite the 1-based data row."""
    out = np.empty((len(rows), len(columns)))
    for i, row in enumerate(rows):
        for k, c in enumerate(columns):
            cell = row[c].strip() if c < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise UsageError(f"row {i + 1}: column {names[k]!r} has non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise UsageError(f"row {i + 1}: column {names[k]!r} is not finite")
            out[i, k] = v
    return out


def split_columns(header: list[str], response: str | None, features) -> tuple[int | None, list[int]]:
    idx = {name: i for i, name in enumerate(header)}
    r_col = None
    if response is not None:
        if response not in idx:
            raise UsageError(f"response column {response!r} not found in CSV header")
        r_col = idx[response]
    if features:
        missing = [f for f in features if f not in idx]
        if missing:
            raise UsageError(f"feature column(s) {', '.join(map(repr, missing))} not found in CSV header")
        f_cols = [idx[f] for f in features]
    else:
        f_cols = [i for i in range(len(header)) if i != r_col]
    return r_col, f_cols


def write_csv(path: str | os.PathLike, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def write_manifest(path: Path, command: str, cfg: dict, seed: int, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "seed": seed,
           "config": cfgmod.effective(cfg), **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def _threads(args, cfg) -> int | None:
    if args.threads is not None:
        return args.threads
    return cfg.get("threads")


def cmd_simulate(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    spec = cfgmod.family_spec(cfg)
    p = cfg.get("p", 10)
    r, gamma = cfg.get("r"), cfg.get("gamma")
    if r is None and gamma is None:
        raise ConfigError("give either 'r' or 'gamma'", "r")
    if r is not None and gamma is not None:
        raise ConfigError("give only one of 'r' and 'gamma'", "gamma")
    kwargs = {k: cfg[k] for k in ("reps", "n_test", "alpha", "seed", "signal") if k in cfg}
    design = SimDesign(family=spec, n=cfgmod.require(cfg, "n"), B=cfgmod.require(cfg, "B"), p=p,
                       r=r, gamma=gamma, net=cfgmod.net_config(cfg, p), threads=_threads(args, cfg),
                       **kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(design)
    write_report(report, out)
    write_manifest(out / "provenance.json", "simulate", cfg, design.seed,
                   {"design": design.to_dict(), "mean_train_loss": report.mean_train_loss})
    print(f"wrote {out / 'metrics.csv'} and {out / 'per_point.csv'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    spec = cfgmod.family_spec(cfg)
    response = cfgmod.require(cfg, "data.response")
    header, rows = read_table(args.data)
    r_col, f_cols = split_columns(header, response, cfg.get("data.features"))
    names = [header[c] for c in f_cols]
    X = numeric_matrix(rows, f_cols, names)
    y = numeric_matrix(rows, [r_col], [response])[:, 0]
    n, p = X.shape
    if n < 2:
        raise UsageError("need at least two data rows")
    try:
        r = resolve_r(n, cfg.get("r"), cfg.get("gamma"))
    except DesignError as exc:
        raise ConfigError(str(exc), "r") from None
    seed = cfg.get("seed", 0)
    B = cfgmod.require(cfg, "B")
    model = fit_ensemble(X, y, spec, cfgmod.net_config(cfg, p), r, B, seed,
                         threads=_threads(args, cfg), standardize=cfg.get("data.standardize", False),
                         coerce=args.coerce)
    model.feature_names = names
    save_ensemble(model, args.model_out)
    write_manifest(Path(f"{args.model_out}.manifest.json"), "fit", cfg, seed,
                   {"data": os.fspath(args.data), "n": n, "p": p, "r": r, "B": model.B})
    print(f"n={n} p={p} r={r} B={model.B} mean_final_train_loss={model.mean_train_loss():.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise UsageError(f"--alpha must lie in (0, 1), got {args.alpha}")
    try:
        model = load_ensemble(args.model)
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model!r}: {exc.strerror}") from None
    header, rows = read_table(args.data)
    p = model.n_features
    names = model.feature_names
    if names and all(nm in header for nm in names):
        _, cols = split_columns(header, None, names)
    else:
        if len(header) != p:
            raise UsageError(f"dimension mismatch: the model expects p={p} feature columns, "
                             f"the CSV has {len(header)}")
        cols, names = list(range(p)), header
    X = numeric_matrix(rows, cols, names)
    results = confidence_intervals(model, X, args.alpha) if len(rows) else []
    out_rows = []
    for i, res in enumerate(results):
        out_rows.append([i + 1, repr(res.fhatB), repr(float(psi_prime(model.spec, res.fhatB))),
                         repr(res.se_uncorrected), repr(res.se_corrected),
                         "true" if res.clamped_negative else "false",
                         repr(res.ci_lower_mean), repr(res.ci_upper_mean)])
    write_csv(args.out, PREDICT_COLUMNS, out_rows)
    print(f"wrote {len(out_rows)} row(s) to {args.out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esm", description="Ensemble subsampling inference for neural regression")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: $ESM_THREADS or the CPU count)")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a coverage simulation")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit an ensemble to a CSV file")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--model-out", required=True)
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    f.add_argument("--coerce", action="store_true",
                   help="round responses within 1e-9 of an integer for discrete families")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="point estimates and intervals for CSV rows")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--alpha", type=float, default=0.05)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"esm: config error{key}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DataValidationError, DomainError, DesignError, FormatError) as exc:
        print(f"esm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ESMError, OSError, ArithmeticError) as exc:
        print(f"esm: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
