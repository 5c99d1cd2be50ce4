"""One-parameter exponential families in canonical form.

The density is h(y) exp{y*theta - psi(theta)}; h(y) never matters for
estimation and is dropped from every loss below.  All functions accept
scalars or numpy arrays and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from esmci.errors import DataValidationError, DomainError

FAMILIES = ("gaussian", "bernoulli", "poisson", "binomial")

# Beyond this |theta| the logistic kernels return their asymptotic forms.
_CUTOFF = 35.0


@dataclass(frozen=True)
class FamilySpec:
    family_id: str
    n_trial: int | None = None

    def __post_init__(self):
        if self.family_id not in FAMILIES:
            raise DomainError(f"unsupported family {self.family_id!r}; expected one of {FAMILIES}")
        if self.family_id == "binomial":
            if self.n_trial is None or int(self.n_trial) != self.n_trial or self.n_trial < 1:
                raise DomainError(f"binomial family needs an integer n_trial >= 1, got {self.n_trial!r}")
            object.__setattr__(self, "n_trial", int(self.n_trial))
        else:
            object.__setattr__(self, "n_trial", None)

    @property
    def name(self) -> str:
        if self.family_id == "binomial":
            return f"binomial({self.n_trial})"
        return self.family_id

    @classmethod
    def from_name(cls, family: str, n_trial: int | None = None) -> "FamilySpec":
        return cls(family, n_trial)

    def mean_range(self) -> tuple[float, float]:
        """Open interval containing every attainable conditional mean."""
        if self.family_id == "gaussian":
            return (-np.inf, np.inf)
        if self.family_id == "bernoulli":
            return (0.0, 1.0)
        if self.family_id == "poisson":
            return (0.0, np.inf)
        return (0.0, float(self.n_trial))

    def to_dict(self) -> dict:
        d = {"family": self.family_id}
        if self.n_trial is not None:
            d["n_trial"] = self.n_trial
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        return cls(d["family"], d.get("n_trial"))


def _check_finite(theta):
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise DomainError("canonical parameter must be finite")
    return theta


def _out(value, like):
    return float(value) if np.ndim(like) == 0 else value


def _softplus(t: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.log1p(np.exp(-np.abs(t))) + np.maximum(t, 0.0)
    big = np.abs(t) > _CUTOFF
    if np.any(big):
        out = np.where(t > _CUTOFF, t, out)
        out = np.where(t < -_CUTOFF, np.exp(np.minimum(t, 0.0)), out)
    return out


def _sigmoid(t: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_slope(t: np.ndarray) -> np.ndarray:
    # s(1-s) written without the cancellation in 1-s
    e = np.exp(-np.abs(t))
    return e / (1.0 + e) ** 2


def psi(spec: FamilySpec, theta):
    """Log-partition function."""
    t = _check_finite(theta)
    fid = spec.family_id
    if fid == "gaussian":
        v = 0.5 * t * t
    elif fid == "poisson":
        v = np.exp(t)
    elif fid == "bernoulli":
        v = _softplus(t)
    else:
        v = spec.n_trial * _softplus(t)
    return _out(v, theta)


def psi_prime(spec: FamilySpec, theta):
    """Conditional mean E(y | theta)."""
    t = _check_finite(theta)
    fid = spec.family_id
    if fid == "gaussian":
        v = t.copy()
    elif fid == "poisson":
        v = np.exp(t)
    elif fid == "bernoulli":
        v = _sigmoid(t)
    else:
        v = spec.n_trial * _sigmoid(t)
    return _out(v, theta)


def psi_second(spec: FamilySpec, theta):
    """Conditional variance Var(y | theta); strictly positive."""
    t = _check_finite(theta)
    fid = spec.family_id
    if fid == "gaussian":
        v = np.ones_like(t)
    elif fid == "poisson":
        v = np.exp(t)
    elif fid == "bernoulli":
        v = _sigmoid_slope(t)
    else:
        v = spec.n_trial * _sigmoid_slope(t)
    return _out(v, theta)


def validate_response(spec: FamilySpec, y, coerce: bool = False) -> np.ndarray:
    """Check that every y lies in the family's support.

    With ``coerce``, values within 1e-9 of an integer are rounded for the
    discrete families.  Raises DataValidationError naming the 1-based row.
    """
    y = np.array(y, dtype=float, ndmin=1)
    bad = ~np.isfinite(y)
    fid = spec.family_id
    if fid != "gaussian":
        nearest = np.round(y)
        if coerce:
            close = np.abs(y - nearest) <= 1e-9
            y = np.where(close, nearest, y)
        bad |= y != np.round(y)
        bad |= y < 0
        if fid == "bernoulli":
            bad |= y > 1
        elif fid == "binomial":
            bad |= y > spec.n_trial
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DataValidationError(
            f"row {i + 1}: response {y[i]!r} outside the {spec.name} support", row=i + 1
        )
    return y


def nll_loss(spec: FamilySpec, y, f):
    """Per-observation loss -y*f + psi(f), with h(y) dropped."""
    yy = validate_response(spec, y).reshape(np.shape(y))
    ff = np.asarray(f, dtype=float)
    v = np.asarray(-yy * ff + psi(spec, ff))
    return _out(v, v)


def nll_grad(spec: FamilySpec, y, f):
    """Derivative of nll_loss in f: psi'(f) - y."""
    yy = validate_response(spec, y).reshape(np.shape(y))
    v = np.asarray(psi_prime(spec, np.asarray(f, dtype=float)) - yy)
    return _out(v, v)


def bregman_loss(spec: FamilySpec, f, f0):
    """Bregman divergence of psi between f and f0; zero iff f == f0."""
    f = _check_finite(f)
    f0 = _check_finite(f0)
    v = -psi_prime(spec, f0) * (f - f0) + psi(spec, f) - psi(spec, f0)
    v = np.maximum(v, 0.0)
    return _out(v, v)


def batch_loss_terms(fid: str, n_trial: int | None, y: np.ndarray, f: np.ndarray):
    """Per-element loss and d(loss)/df for the training loop, no validation."""
    if fid == "gaussian":
        return 0.5 * f * f - y * f, f - y
    if fid == "poisson":
        e = np.exp(f)
        return e - y * f, e - y
    k = 1.0 if fid == "bernoulli" else float(n_trial)
    e = np.exp(-np.abs(f))
    sp = np.log1p(e) + np.maximum(f, 0.0)
    sig = np.where(f >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return k * sp - y * f, k * sig - y
