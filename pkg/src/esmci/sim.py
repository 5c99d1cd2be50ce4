"""Simulation designs, data generators, and the repeated-experiment driver."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from esmci import rng as rng_mod
from esmci.ensemble import fit_ensemble, predict_members, resolve_r
from esmci.errors import ConfigError, DomainError
from esmci.expfam import FamilySpec, psi_prime
from esmci.infer import ij_variance, interval
from esmci.net import NetworkConfig

log = logging.getLogger(__name__)

SIGNALS = ("baseline_g", "tanh_g")
# Bump when training, sampling, or inference arithmetic changes.
RESULTS_VERSION = 1

METRICS = ("Bias_f", "MAE_f", "Bias_psi", "MAE_psi", "EmpSD", "SE", "SE_c", "CP", "AIL")


@dataclass(frozen=True)
class SimDesign:
    family: FamilySpec
    n: int
    B: int
    reps: int = 300
    n_test: int = 80
    p: int = 10
    r: int | None = None
    gamma: float | None = None
    alpha: float = 0.05
    net: NetworkConfig | None = None
    seed: int = 0
    signal: str = "baseline_g"
    threads: int | None = None

    def __post_init__(self):
        if self.net is None:
            object.__setattr__(self, "net", NetworkConfig(widths=(self.p, 128, 64, 1)))
        if self.net.widths[0] != self.p:
            raise ConfigError(f"net.widths[0] must equal p={self.p}", "net.widths")
        if self.signal not in SIGNALS:
            raise ConfigError(f"signal must be one of {SIGNALS}", "signal")
        if self.p < (3 if self.signal == "baseline_g" else 5):
            raise ConfigError(f"signal {self.signal} needs more covariates than p={self.p}", "p")
        if self.reps < 2:
            raise ConfigError("reps must be at least 2", "reps")
        if self.n_test < 1:
            raise ConfigError("n_test must be at least 1", "n_test")
        if self.B < 2:
            raise ConfigError("B must be at least 2", "B")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)", "alpha")
        resolve_r(self.n, self.r, self.gamma)

    @property
    def r_eff(self) -> int:
        return resolve_r(self.n, self.r, self.gamma)

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(), "n": self.n, "p": self.p, "r": self.r_eff,
            "gamma": self.gamma, "B": self.B, "reps": self.reps, "n_test": self.n_test,
            "alpha": self.alpha, "seed": self.seed, "signal": self.signal, "net": self.net.to_dict(),
        }

    def fingerprint(self) -> str:
        """Key for per-repetition checkpoints.

        ``reps`` is left out because repetition s does not depend on how many
        repetitions are planned; RESULTS_VERSION changes whenever the numbers
        a repetition produces would change.
        """
        d = self.to_dict()
        del d["reps"]
        d["results_version"] = RESULTS_VERSION
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def signal_g(variant: str, x) -> np.ndarray | float:
    """Canonical-scale signal at a feature vector (or at each row of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    X = x[None] if x.ndim == 1 else x
    if variant == "baseline_g":
        if X.shape[1] < 3:
            raise DomainError("baseline_g needs at least 3 covariates")
        g = X[:, 0] + 0.25 * X[:, 1] ** 2 + 0.1 * np.arctan(0.5 * X[:, 2] - 0.3)
    elif variant == "tanh_g":
        if X.shape[1] < 5:
            raise DomainError("tanh_g needs at least 5 covariates")
        inner = (1.5 * X[:, 0] + 0.6 * (X[:, 1] ** 2 - 1) + 0.4 * X[:, 2] * np.tanh(X[:, 3])
                 + 0.15 * np.sin(X[:, 4]))
        g = 2.0 * np.tanh(inner / 2.5)
    else:
        raise DomainError(f"unknown signal {variant!r}")
    return float(g[0]) if x.ndim == 1 else g


def true_f0(spec: FamilySpec, g):
    """Canonical parameter implied by the signal: log(softplus(g)) for Poisson, g otherwise."""
    g = np.asarray(g, dtype=np.float64)
    if spec.family_id == "poisson":
        lam = np.log1p(np.exp(-np.abs(g))) + np.maximum(g, 0.0)
        return np.log(lam)
    return g


def sample_response(spec: FamilySpec, f0: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """One draw of y at each canonical parameter in f0."""
    f0 = np.asarray(f0, dtype=np.float64)
    mean = psi_prime(spec, f0)
    fid = spec.family_id
    if fid == "gaussian":
        return f0 + rng_mod.standard_normal(gen, f0.size).reshape(f0.shape)
    if fid == "bernoulli":
        return (gen.random(f0.shape) < mean).astype(np.float64)
    if fid == "binomial":
        prob = mean / spec.n_trial
        u = gen.random(f0.shape + (spec.n_trial,))
        return (u < prob[..., None]).sum(axis=-1).astype(np.float64)
    # Poisson by sequential search of the CDF; the means here stay small
    u = gen.random(f0.shape)
    k = np.zeros(f0.shape)
    term = np.exp(-mean)
    cdf = term.copy()
    active = u > cdf
    while np.any(active):
        k = np.where(active, k + 1, k)
        term = np.where(active, term * mean / np.maximum(k, 1), term)
        cdf = np.where(active, cdf + term, cdf)
        active &= (u > cdf) & (term > 0)
    return k


def normal_rows(gen: np.random.Generator, m: int, p: int) -> np.ndarray:
    return rng_mod.standard_normal(gen, m * p).reshape(m, p)


def generate_dataset(design: SimDesign, gen: np.random.Generator):
    """(X, y, f0 at X) for one training sample."""
    X = normal_rows(gen, design.n, design.p)
    f0 = true_f0(design.family, signal_g(design.signal, X))
    y = sample_response(design.family, f0, gen)
    return X, y, f0


def test_points(design: SimDesign) -> np.ndarray:
    """Fixed evaluation points, identical for every repetition."""
    return normal_rows(rng_mod.stream(design.seed, rng_mod.TEST_POINTS), design.n_test, design.p)


# -- the experiment ----------------------------------------------------------

_REP_FIELDS = ("fhat", "se", "se_c", "lo", "hi", "clamped", "train_loss")


def run_replicate(design: SimDesign, s: int, X_test: np.ndarray, data_index: int | None = None) -> dict:
    """Fit one ensemble on fresh data and evaluate every test point."""
    s_data = s if data_index is None else data_index
    X, y, _ = generate_dataset(design, rng_mod.stream(design.seed, rng_mod.REP_DATA, s_data))
    master = rng_mod.derive_seed(design.seed, rng_mod.REP_FIT, s_data)
    model = fit_ensemble(X, y, design.family, design.net, design.r_eff, design.B, master,
                         threads=design.threads)
    per = predict_members(model, X_test)
    fhat = per.mean(axis=0)
    J = model.membership
    out = {k: np.empty(X_test.shape[0]) for k in _REP_FIELDS[:-1]}
    for i in range(X_test.shape[0]):
        res = interval(design.family, float(fhat[i]),
                       ij_variance(per[:, i], J, design.n, design.r_eff), design.alpha)
        out["fhat"][i] = res.fhatB
        out["se"][i] = res.se_uncorrected
        out["se_c"][i] = res.se_corrected
        out["lo"][i] = res.ci_lower_mean
        out["hi"][i] = res.ci_upper_mean
        out["clamped"][i] = float(res.clamped_negative)
    out["train_loss"] = np.array([model.mean_train_loss()])
    return out


@dataclass
class ExperimentReport:
    design: dict
    per_point: list[dict]
    aggregate: dict[str, tuple[float, float]]
    mean_train_loss: float = float("nan")
    raw: dict = field(default_factory=dict, repr=False)

    def value(self, metric: str) -> float:
        return self.aggregate[metric][0]


def summarize(design: SimDesign, X_test: np.ndarray, reps: dict[str, np.ndarray]) -> ExperimentReport:
    """Per-point and aggregate metrics from (reps, n_test) arrays."""
    spec = design.family
    f0 = true_f0(spec, signal_g(design.signal, X_test))
    mu0 = psi_prime(spec, f0)
    fhat = reps["fhat"]
    err = fhat - f0
    err_psi = psi_prime(spec, fhat) - mu0
    covered = (reps["lo"] <= mu0) & (mu0 <= reps["hi"])
    width = reps["hi"] - reps["lo"]
    cols = {
        "true_f0": f0,
        "true_mean": mu0,
        "mean_fhat": fhat.mean(axis=0),
        "bias_f": err.mean(axis=0),
        "mae_f": np.abs(err).mean(axis=0),
        "abs_mean_bias_f": np.abs(err.mean(axis=0)),
        "bias_psi": err_psi.mean(axis=0),
        "mae_psi": np.abs(err_psi).mean(axis=0),
        "empsd": fhat.std(axis=0, ddof=1),
        "mean_se": reps["se"].mean(axis=0),
        "mean_se_c": reps["se_c"].mean(axis=0),
        "coverage": covered.mean(axis=0),
        "mean_ail": width.mean(axis=0),
        "clamped_frac": reps["clamped"].mean(axis=0),
    }
    per_point = [{"point": i + 1, **{k: float(v[i]) for k, v in cols.items()}}
                 for i in range(X_test.shape[0])]
    source = dict(Bias_f="bias_f", MAE_f="mae_f", Bias_psi="bias_psi", MAE_psi="mae_psi",
                  EmpSD="empsd", SE="mean_se", SE_c="mean_se_c", CP="coverage", AIL="mean_ail")
    agg = {}
    for metric, key in source.items():
        v = cols[key]
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        agg[metric] = (float(v.mean()), sd)
    return ExperimentReport(design.to_dict(), per_point, agg,
                            float(np.mean(reps["train_loss"])), raw=reps)


def run_experiment(design: SimDesign, checkpoint_dir: str | os.PathLike | None = None,
                   same_data: bool = False) -> ExperimentReport:
    """Repeat fit-and-evaluate ``design.reps`` times on fresh training data.

    With ``checkpoint_dir``, each finished repetition is saved and reused on
    a later call with the same design.  ``same_data`` reuses the first
    repetition's streams for every repetition (a test hook).
    """
    X_test = test_points(design)
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = Path(checkpoint_dir) / design.fingerprint()
        ckpt.mkdir(parents=True, exist_ok=True)
    rows = {k: [] for k in _REP_FIELDS}
    for s in range(design.reps):
        path = ckpt / f"rep{s:05d}.npz" if ckpt is not None else None
        if path is not None and path.exists():
            with np.load(path) as z:
                rec = {k: z[k] for k in _REP_FIELDS}
        else:
            rec = run_replicate(design, s, X_test, data_index=0 if same_data else None)
            if path is not None:
                tmp = path.with_suffix(".tmp.npz")
                np.savez(tmp, **rec)
                os.replace(tmp, path)
        for k in _REP_FIELDS:
            rows[k].append(rec[k])
        log.info("rep %d/%d done", s + 1, design.reps)
    reps = {k: np.vstack(v) for k, v in rows.items()}
    return summarize(design, X_test, reps)


# -- tables ------------------------------------------------------------------

def format_cp(v: float) -> str:
    return f"{100.0 * v:.1f}%"


def _cell(metric: str, mean: float, sd: float) -> str:
    if metric == "CP":
        return f"{format_cp(mean)}({format_cp(sd)})"
    return f"{mean:.2f}({sd:.2f})"


def metric_table(report: ExperimentReport) -> list[list[str]]:
    """Header plus one row: each aggregate metric as "mean(sd)"."""
    return [list(METRICS), [_cell(m, *report.aggregate[m]) for m in METRICS]]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return buf.getvalue()


def per_point_rows(report: ExperimentReport) -> list[list[str]]:
    keys = list(report.per_point[0].keys())
    return [keys] + [[repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]) for k in keys]
                     for rec in report.per_point]


def write_report(report: ExperimentReport, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_csv_text(metric_table(report)), newline="")
    (out / "per_point.csv").write_text(_csv_text(per_point_rows(report)), newline="")
