"""Infinitesimal-jackknife variance with Monte Carlo bias correction, and intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from esmci.errors import InferenceError
from esmci.expfam import FamilySpec, psi_prime


class IJVariance(NamedTuple):
    uncorrected: float
    corrected_raw: float
    corrected: float
    correction: float


def ij_variance(per_model, membership, n: int, r: int) -> IJVariance:
    """Variance of the ensemble prediction at one point.

    ``per_model`` holds the B member predictions, ``membership`` the B x n
    inclusion matrix.  The uncorrected term is
    n(n-1)/(n-r)^2 * sum_i V_i^2 with V_i the mean over members of
    Z_ji = (J_ji - mean_j J_ji)(f_j - mean f); the correction subtracts
    n(n-1)/(n-r)^2 / (B(B-1)) * sum_ij (Z_ji - V_i)^2.  Sums over i are
    compensated.  The corrected value is floored at zero.
    """
    f = np.asarray(per_model, dtype=np.float64)
    J = np.asarray(membership, dtype=np.float64)
    B = f.shape[0]
    if B < 2:
        raise InferenceError("variance needs at least two ensemble members")
    if J.shape != (B, n):
        raise InferenceError(f"membership shape {J.shape} != ({B}, {n})")
    if not 0 < r < n:
        raise InferenceError(f"need 0 < r < n, got r={r}, n={n}")
    d = f - math.fsum(f) / B
    Z = (J - J.mean(axis=0)) * d[:, None]
    V = Z.sum(axis=0) / B
    factor = n * (n - 1) / (n - r) ** 2
    unc = factor * math.fsum(V * V)
    corr = factor / (B * (B - 1)) * math.fsum(((Z - V) ** 2).sum(axis=0))
    raw = unc - corr
    return IJVariance(unc, raw, max(raw, 0.0), corr)


# Acklam's rational approximation to the inverse normal CDF.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, refined by one Newton step."""
    if not 0.0 < p < 1.0:
        raise InferenceError(f"quantile level must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        t = q * q
        x = (((((_A[0] * t + _A[1]) * t + _A[2]) * t + _A[3]) * t + _A[4]) * t + _A[5]) * q / \
            (((((_B[0] * t + _B[1]) * t + _B[2]) * t + _B[3]) * t + _B[4]) * t + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # Newton step on Phi(x) - p; work in the tail that keeps precision
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        if p > 0.5:
            err = (1.0 - p) - _normal_cdf(-x)
            x -= err / pdf
        else:
            x -= (_normal_cdf(x) - p) / pdf
    return x


@dataclass(frozen=True)
class InferenceResult:
    fhatB: float
    se_uncorrected: float
    se_corrected: float
    clamped_negative: bool
    ci_lower_mean: float
    ci_upper_mean: float
    alpha: float
    z_value: float

    @property
    def canonical_interval(self) -> tuple[float, float]:
        h = self.z_value * self.se_corrected
        return self.fhatB - h, self.fhatB + h


def interval(spec: FamilySpec, fhat: float, var: IJVariance, alpha: float) -> InferenceResult:
    """Back-transformed interval psi'(fhat -/+ z * se_corrected)."""
    if not 0.0 < alpha < 1.0:
        raise InferenceError(f"alpha must lie in (0, 1), got {alpha}")
    z = normal_quantile(1.0 - alpha / 2.0)
    se_c = math.sqrt(var.corrected)
    lo, hi = psi_prime(spec, np.array([fhat - z * se_c, fhat + z * se_c]))
    return InferenceResult(
        fhatB=float(fhat),
        se_uncorrected=math.sqrt(max(var.uncorrected, 0.0)),
        se_corrected=se_c,
        clamped_negative=var.corrected_raw < 0.0,
        ci_lower_mean=float(lo),
        ci_upper_mean=float(hi),
        alpha=alpha,
        z_value=z,
    )


def confidence_interval(model, x, alpha: float = 0.05) -> InferenceResult:
    """Point estimate, standard errors, and mean-scale interval at one feature vector."""
    return confidence_intervals(model, np.asarray(x, dtype=np.float64)[None], alpha)[0]


def confidence_intervals(model, X, alpha: float = 0.05) -> list[InferenceResult]:
    from esmci.ensemble import ensemble_predict

    if not 0.0 < alpha < 1.0:
        raise InferenceError(f"alpha must lie in (0, 1), got {alpha}")
    fhat, per = ensemble_predict(model, np.asarray(X, dtype=np.float64))
    J = model.membership
    n, r = model.design.n, model.design.r
    return [interval(model.spec, float(fhat[i]), ij_variance(per[:, i], J, n, r), alpha)
            for i in range(per.shape[1])]
