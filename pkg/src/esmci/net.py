"""Small ReLU perceptrons trained by plain mini-batch SGD.

Training handles a stack of K independent networks at once: parameters live
in arrays of shape (K, fan_in, fan_out) and every network only touches its
own slice and its own random stream.  A single network is the K = 1 case of
the same code, so results are bit-identical however the work is split.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from numba.typed import List

from esmci import _kernels as K
from esmci import rng as rng_mod
from esmci.errors import ConfigError, DomainError, TrainingError
from esmci.expfam import FamilySpec, batch_loss_terms, validate_response

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple[int, ...] = (10, 128, 64, 1)
    learning_rate: float = 0.1
    epochs: int = 500
    batch_size: int = 32
    dropout_rate: float = 0.1
    weight_decay: float = 0.02
    clamp_F: float = 3.0
    init_scheme: str = "he_uniform"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        self.validate()

    def validate(self) -> None:
        w = self.widths
        if len(w) < 3:
            raise ConfigError("net.widths needs at least one hidden layer", "net.widths")
        if any(v < 1 for v in w) or w[-1] != 1:
            raise ConfigError("net.widths must be positive with a final width of 1", "net.widths")
        if not self.learning_rate > 0:
            raise ConfigError("net.learning_rate must be positive", "net.learning_rate")
        if self.epochs < 1:
            raise ConfigError("net.epochs must be positive", "net.epochs")
        if self.batch_size < 1:
            raise ConfigError("net.batch_size must be positive", "net.batch_size")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("net.dropout_rate must lie in [0, 1)", "net.dropout_rate")
        if self.weight_decay < 0:
            raise ConfigError("net.weight_decay must be nonnegative", "net.weight_decay")
        if not self.clamp_F > 0:
            raise ConfigError("net.clamp_F must be positive", "net.clamp_F")
        if self.init_scheme != "he_uniform":
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}", "net.init_scheme")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("net.seed must be a 64-bit unsigned integer", "net.seed")
        if self.dtype not in DTYPES:
            raise ConfigError(f"net.dtype must be one of {sorted(DTYPES)}", "net.dtype")

    @property
    def n_features(self) -> int:
        return self.widths[0]

    def with_input_dim(self, p: int) -> "NetworkConfig":
        return replace(self, widths=(p,) + self.widths[1:])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class Network:
    """Weights are stored as (fan_out, fan_in) matrices, biases as vectors."""

    config: NetworkConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    final_train_loss: float = float("nan")

    def __post_init__(self):
        w = self.config.widths
        if len(self.weights) != len(w) - 1 or len(self.biases) != len(w) - 1:
            raise ConfigError("layer count does not match config.widths", "net.widths")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[l + 1], w[l]) or b.shape != (w[l + 1],):
                raise ConfigError(f"layer {l} shape mismatch with config.widths", "net.widths")

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.config == other.config
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
            and (self.final_train_loss == other.final_train_loss
                 or (math.isnan(self.final_train_loss) and math.isnan(other.final_train_loss)))
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_network(config: NetworkConfig, gen: np.random.Generator) -> Network:
    """He-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(config.widths[:-1], config.widths[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(config, weights, biases)


# -- stacked kernels -------------------------------------------------------

def stack_params(nets: list[Network], dtype=np.float64):
    """(K, fan_in, fan_out) weight stacks and (K, 1, fan_out) bias stacks for eval."""
    Ws = [np.ascontiguousarray(np.stack([n.weights[l].T for n in nets]), dtype=dtype)
          for l in range(nets[0].n_layers)]
    bs = [np.stack([n.biases[l] for n in nets])[:, None, :].astype(dtype) for l in range(nets[0].n_layers)]
    return Ws, bs


def _forward_stack(Ws, bs, X, clamp_F, masks=None):
    """Clamped outputs (K, m) of a stack; ``masks`` are scaled keep factors or None."""
    a = X
    last = len(Ws) - 1
    for l in range(last):
        z = a @ Ws[l]
        z += bs[l]
        a = np.maximum(z, 0.0)
        if masks is not None:
            a *= masks[l]
    raw = a @ Ws[last]
    raw += bs[last]
    return np.clip(raw[..., 0], -clamp_F, clamp_F)


def predict_many(nets: list[Network], X: np.ndarray) -> np.ndarray:
    """Eval-mode outputs of every network at every row of X, shape (K, m)."""
    X = np.asarray(X, dtype=np.float64)
    Ws, bs = stack_params(nets)
    F = nets[0].config.clamp_F
    out = _forward_stack(Ws, bs, X[None, :, :], F)
    return out


def forward(net: Network, x, mask: list[np.ndarray] | None = None):
    """Network output at x (a vector, or an (m, p) matrix of rows).

    Without ``mask`` this is eval mode.  With ``mask`` (one keep array per
    hidden layer) kept units are scaled by 1/(1 - dropout_rate).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != net.config.widths[0]:
        raise DomainError(f"expected {net.config.widths[0]} features, got {X.shape[1]}")
    Ws, bs = stack_params([net])
    scaled = None
    if mask is not None:
        keep = 1.0 / (1.0 - net.config.dropout_rate)
        scaled = [(np.broadcast_to(np.asarray(m, dtype=np.float64), (X.shape[0], w)) * keep)[None]
                  for m, w in zip(mask, net.config.widths[1:-1])]
    out = _forward_stack(Ws, bs, X[None], net.config.clamp_F, scaled)
    return float(out[0, 0]) if single else out[0]


def _typed(arrays):
    out = List()
    for a in arrays:
        out.append(a)
    return out


def loss_and_grads(net: Network, X, y, spec: FamilySpec, mask: list[np.ndarray] | None = None):
    """Mean batch loss and its gradient with respect to every parameter.

    This calls the same compiled routine the training loop uses.  ``mask``
    is one 0/1 keep array per hidden layer, shaped (m, width).  Gradients come
    back in the Network layout: (fan_out, fan_in) per weight.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = validate_response(spec, y)
    cfg = net.config
    ws = _typed([np.ascontiguousarray(W.T) for W in net.weights])
    bs = _typed([b.copy() for b in net.biases])
    gws = _typed([np.empty_like(w) for w in ws])
    gbs = _typed([np.empty_like(b) for b in bs])
    m = X.shape[0]
    acts, gates, deltas, mults = K.scratch(ws, m, X)
    if mask is not None:
        keep = 1.0 / (1.0 - cfg.dropout_rate)
        for buf, mk in zip(mults, mask):
            buf[:, :] = np.asarray(mk, dtype=np.float64) * keep
    total = K.batch_grad(ws, bs, X, y, m, mults, mask is not None, float(cfg.clamp_F),
                         K.FAMILY_CODES[spec.family_id], spec.n_trial or 0,
                         acts, gates, deltas, gws, gbs)
    return total / m, [g.T.copy() for g in gws], [g.copy() for g in gbs]


# -- training --------------------------------------------------------------

def _effective_batch(config: NetworkConfig, r: int) -> int:
    return min(config.batch_size, r)


def train_many(Xs: np.ndarray, ys: np.ndarray, spec: FamilySpec, config: NetworkConfig,
               gens: list[np.random.Generator], first_index: int = 0) -> list[Network]:
    """Train K networks, network k on (Xs[k], ys[k]) with its own stream gens[k].

    Each stream is consumed in a fixed order (initial weights, a 64-bit
    dropout key, then one permutation per epoch), so network k depends only
    on its own data, config, and stream, never on its neighbours in the stack.
    """
    nK, r, p = Xs.shape
    if p != config.widths[0]:
        raise DomainError(f"expected {config.widths[0]} features, got {p}")
    dt = DTYPES[config.dtype]
    nets0 = [init_network(config, g) for g in gens]
    keys = np.array([g.bit_generator.random_raw() for g in gens], dtype=np.uint64)
    Ws = _typed([np.ascontiguousarray(np.stack([n.weights[l].T for n in nets0]), dtype=dt)
                 for l in range(len(config.widths) - 1)])
    Bs = _typed([np.ascontiguousarray(np.stack([n.biases[l] for n in nets0]), dtype=dt)
                 for l in range(len(config.widths) - 1)])
    Xc = np.ascontiguousarray(Xs, dtype=dt)
    yc = np.ascontiguousarray(ys, dtype=dt)
    bsz = _effective_batch(config, r)
    threshold = np.uint64(min(round(config.dropout_rate * 2.0**32), 2**32 - 1))
    keep_scale = dt(1.0 / (1.0 - config.dropout_rate))
    use_dropout = config.dropout_rate > 0
    fam = K.FAMILY_CODES[spec.family_id]
    n_trial = spec.n_trial or 0

    for epoch in range(config.epochs):
        perm = np.stack([g.permutation(r) for g in gens])
        epoch_loss = np.zeros(nK)
        with np.errstate(over="ignore", invalid="ignore"):
            K.train_epoch(Ws, Bs, Xc, yc, perm, keys, epoch, threshold, keep_scale, bsz,
                          config.learning_rate, config.weight_decay, float(config.clamp_F),
                          fam, n_trial, use_dropout, epoch_loss)
        bad = ~np.isfinite(epoch_loss)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise TrainingError(
                f"network {first_index + k} diverged at epoch {epoch + 1}",
                epoch=epoch + 1, index=first_index + k,
            )

    nets = [
        Network(config,
                [np.ascontiguousarray(W[k].T, dtype=np.float64) for W in Ws],
                [np.array(b[k], dtype=np.float64) for b in Bs])
        for k in range(nK)
    ]
    # final loss on the full training subsample, eval mode, float64
    with np.errstate(over="ignore", invalid="ignore"):
        out = _forward_stack(*stack_params(nets), Xs.astype(np.float64), config.clamp_F)
        loss, _ = batch_loss_terms(spec.family_id, spec.n_trial, ys.astype(np.float64), out)
    final = loss.mean(axis=1)
    for k, net in enumerate(nets):
        if not (np.isfinite(final[k]) and all(np.all(np.isfinite(W)) for W in net.weights)):
            raise TrainingError(f"network {first_index + k} has non-finite parameters",
                                epoch=config.epochs, index=first_index + k)
        net.final_train_loss = float(final[k])
    return nets


def train_network(X, y, spec: FamilySpec, config: NetworkConfig,
                  gen: np.random.Generator | None = None) -> Network:
    """Fit one network to (X, y) by minimising the mean family loss."""
    X = np.asarray(X, dtype=np.float64)
    y = validate_response(spec, y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DomainError("X must be (n, p) with one response per row")
    if gen is None:
        gen = rng_mod.stream(config.seed)
    return train_many(X[None], y[None], spec, config, [gen])[0]
