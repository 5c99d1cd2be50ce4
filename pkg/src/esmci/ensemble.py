"""Subsample designs, ensemble fitting, and ensemble prediction."""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from esmci import rng as rng_mod
from esmci.errors import ConfigError, DesignError, DomainError
from esmci.expfam import FamilySpec, psi_prime, validate_response
from esmci.net import Network, NetworkConfig, _forward_stack, stack_params, train_many

log = logging.getLogger(__name__)

_ROW_CHUNK = 256


@dataclass(frozen=True)
class SubsampleDesign:
    n: int
    r: int
    B: int
    indices: np.ndarray  # (B, r) sorted rows
    complete: bool = False

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.shape != (self.B, self.r):
            raise DesignError(f"indices shape {idx.shape} != ({self.B}, {self.r})")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise DesignError("subsample index out of range")
        if self.r > 1 and np.any(np.diff(idx, axis=1) <= 0):
            raise DesignError("each subsample must hold sorted, distinct indices")

    def membership(self) -> np.ndarray:
        J = np.zeros((self.B, self.n), dtype=np.uint8)
        J[np.arange(self.B)[:, None], self.indices] = 1
        return J

    def __eq__(self, other):
        if not isinstance(other, SubsampleDesign):
            return NotImplemented
        return ((self.n, self.r, self.B, self.complete) == (other.n, other.r, other.B, other.complete)
                and np.array_equal(self.indices, other.indices))


def resolve_r(n: int, r: int | None = None, gamma: float | None = None) -> int:
    """Subsample size from an explicit r or from r = round(n**gamma), at least 2."""
    if (r is None) == (gamma is None):
        raise ConfigError("give exactly one of r or gamma", "r")
    if r is None:
        if not 0 < gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)", "gamma")
        r = max(2, int(round(n ** gamma)))
    r = int(r)
    if not 1 <= r < n:
        raise DesignError(f"subsample size r={r} must satisfy 1 <= r < n={n}")
    return r


def draw_subsamples(n: int, r: int, B: int, gen: np.random.Generator | None = None,
                    enumerate_complete: bool = False) -> SubsampleDesign:
    """B independent uniform r-subsets of range(n), duplicates across draws allowed.

    With ``enumerate_complete`` every one of the C(n, r) subsets is listed
    once in lexicographic order and B is ignored.
    """
    if not 1 <= r < n:
        raise DesignError(f"subsample size r={r} must satisfy 1 <= r < n={n}")
    if enumerate_complete:
        rows = list(itertools.combinations(range(n), r))
        return SubsampleDesign(n, r, len(rows), np.array(rows, dtype=np.int64), complete=True)
    if B < 1:
        raise DesignError("B must be at least 1")
    if gen is None:
        raise DesignError("a random stream is required for random designs")
    out = np.empty((B, r), dtype=np.int64)
    pool = np.arange(n)
    for b in range(B):
        # partial Fisher-Yates: only the first r slots are settled
        perm = pool.copy()
        js = gen.integers(np.arange(r), n)
        for i, j in enumerate(js):
            perm[i], perm[j] = perm[j], perm[i]
        out[b] = np.sort(perm[:r])
    return SubsampleDesign(n, r, B, out, complete=False)


@dataclass
class EnsembleModel:
    spec: FamilySpec
    design: SubsampleDesign
    networks: list[Network]
    master_seed: int
    config: NetworkConfig
    center: np.ndarray | None = None  # optional z-score of features
    scale: np.ndarray | None = None
    feature_names: list[str] | None = None
    _stack: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def membership(self) -> np.ndarray:
        return self.design.membership()

    @property
    def B(self) -> int:
        return self.design.B

    @property
    def n_features(self) -> int:
        return self.config.widths[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.center is None:
            return X
        return (X - self.center) / self.scale

    def mean_train_loss(self) -> float:
        return float(np.mean([net.final_train_loss for net in self.networks]))


def _thread_count(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("ESM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def fit_ensemble(X, y, spec: FamilySpec, config: NetworkConfig, r: int, B: int,
                 master_seed: int, threads: int | None = None, standardize: bool = False,
                 enumerate_complete: bool = False, coerce: bool = False) -> EnsembleModel:
    """Train one network per random subsample and collect them.

    The design comes from stream (master_seed, 0) and network j is trained
    with stream (master_seed, j + 1), so the result does not depend on
    ``threads``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = validate_response(spec, y, coerce=coerce)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DomainError("X must be (n, p) with one response per row")
    n, p = X.shape
    if config.widths[0] != p:
        raise ConfigError(f"net.widths[0]={config.widths[0]} but the data has {p} features", "net.widths")
    center = scale = None
    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        X = (X - center) / scale
    design = draw_subsamples(n, r, B, rng_mod.stream(master_seed, 0), enumerate_complete)
    B = design.B
    T = min(_thread_count(threads), B)
    size = math.ceil(B / T)
    chunks = [(s, min(s + size, B)) for s in range(0, B, size)]

    def job(bounds):
        s, e = bounds
        idx = design.indices[s:e]
        gens = [rng_mod.stream(master_seed, j + 1) for j in range(s, e)]
        return train_many(X[idx], y[idx], spec, config, gens, first_index=s)

    log.debug("fitting %d networks on n=%d, r=%d with %d thread(s)", B, n, r, T)
    if T == 1:
        results = [job(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=T) as pool:
            results = list(pool.map(job, chunks))
    networks = [net for chunk in results for net in chunk]
    return EnsembleModel(spec, design, networks, master_seed, config, center, scale)


def _stacked(model: EnsembleModel):
    if model._stack is None:
        model._stack = stack_params(model.networks)
    return model._stack


def predict_members(model: EnsembleModel, X) -> np.ndarray:
    """Every network's eval-mode output at each row of X, shape (B, m)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DomainError(f"expected rows with {model.n_features} features")
    Ws, bs = _stacked(model)
    Xt = model.transform(X)
    out = np.empty((model.B, X.shape[0]))
    for s in range(0, X.shape[0], _ROW_CHUNK):
        out[:, s:s + _ROW_CHUNK] = _forward_stack(Ws, bs, Xt[None, s:s + _ROW_CHUNK], model.config.clamp_F)
    return out


def ensemble_predict(model: EnsembleModel, x):
    """(fhatB, per_model) at a feature vector; for an (m, p) matrix both gain an m axis."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    per = predict_members(model, x[None] if single else x)
    fhat = per.mean(axis=0)
    if single:
        return float(fhat[0]), per[:, 0]
    return fhat, per


def mean_estimate(model: EnsembleModel, x):
    """Estimated conditional mean psi'(fhatB) at x."""
    fhat, _ = ensemble_predict(model, x)
    return psi_prime(model.spec, fhat)
