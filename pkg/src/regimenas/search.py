"""Architecture search over the blended model's design space.

Candidates are described by :class:`ArchSpec` and flattened to a fixed-length
numeric vector (per-layer cell one-hots and widths, depth, dropout,
activation, block flags, kernel set, range lookback, gate width, volume
skip).  A Matérn-5/2 Gaussian process fitted to (encoding, score) pairs
ranks new proposals through expected improvement or an upper confidence
bound whose exploration weight widens with the regime detector's
disagreement on the most recent candidate.

Scores are standardized inside the surrogate, kernel hyperparameters come
from multi-start bounded maximization of the log marginal likelihood, and a
failed candidate enters the model at one standard deviation below the worst
observed score: the search learns to avoid the region without the failure
ever stopping the loop.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

from .blocks import ACTIVATIONS, CELL_TYPES, KERNEL_SETS, BlockConfig
from .losses import LossWeights
from .tensor import NumericError
from .training import (TrainConfig, TrainReport, WindowDataset,
                       attach_regime_outputs, build_windows, evaluate,
                       pretrain_detector, train_candidate)

MAX_LAYERS = 3

# sampling grids; decode accepts anything on the /256 (resp. /32) lattice,
# these are just where random draws and mutations land
HIDDEN_CHOICES = (64, 128, 192, 256)
DROPOUT_CHOICES = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
RANGE_LAG_CHOICES = (2, 4, 8, 16, 24, 32)
GATE_WIDTH_CHOICES = (4, 8, 16, 24, 32)


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    """One point of the search space; immutable and hashable."""

    cell_types: tuple = ("GRU",)
    hidden_sizes: tuple = (64,)
    dropout: float = 0.0
    activation: str = "relu"
    use_volatility: bool = True
    use_trend: bool = True
    use_range: bool = True
    kernel_set: int = 2          # index into KERNEL_SETS
    range_lags: int = 16
    gate_width: int = 16
    volume_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cell_types", tuple(self.cell_types))
        object.__setattr__(self, "hidden_sizes",
                           tuple(int(h) for h in self.hidden_sizes))
        if not 1 <= len(self.cell_types) <= MAX_LAYERS:
            raise ValueError(f"between 1 and {MAX_LAYERS} layers")
        if len(self.hidden_sizes) != len(self.cell_types):
            raise ValueError("need one hidden size per layer")
        if any(c not in CELL_TYPES for c in self.cell_types):
            raise ValueError(f"cell types must be one of {CELL_TYPES}")
        if any(not 64 <= h <= 256 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must lie in [64, 256]")
        if not 0.0 <= self.dropout <= 0.3:
            raise ValueError("dropout must lie in [0, 0.3]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not (self.use_volatility or self.use_trend or self.use_range):
            raise ValueError("at least one block must be enabled")
        if not 0 <= self.kernel_set < len(KERNEL_SETS):
            raise ValueError("kernel_set out of range")
        if not 1 <= self.range_lags <= 32:
            raise ValueError("range_lags must lie in [1, 32]")
        if not 1 <= self.gate_width <= 32:
            raise ValueError("gate_width must lie in [1, 32]")

    @property
    def n_layers(self) -> int:
        return len(self.cell_types)

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            cell_type=self.cell_types,
            hidden_sizes=self.hidden_sizes,
            dropout=self.dropout,
            activation=self.activation,
            use_volatility=self.use_volatility,
            use_trend=self.use_trend,
            use_range=self.use_range,
            kernel_sizes=KERNEL_SETS[self.kernel_set],
            range_lags=self.range_lags,
            gate_width=self.gate_width,
            volume_skip=self.volume_skip,
        )


def arch_from_dict(d: dict) -> ArchSpec:
    """Rebuild an :class:`ArchSpec` from its ``asdict`` form (JSON round trip
    turns the tuples into lists)."""
    clean = dict(d)
    for key in ("cell_types", "hidden_sizes"):
        if key in clean:
            clean[key] = tuple(clean[key])
    return ArchSpec(**clean)


# encoding layout (cell one-hots first so layer slots stay contiguous)
_N_CELL = len(CELL_TYPES)
_CELL0 = 0
_HID0 = _CELL0 + MAX_LAYERS * _N_CELL
_NLAY = _HID0 + MAX_LAYERS
_DROP = _NLAY + 1
_ACT0 = _DROP + 1
_FLAG0 = _ACT0 + len(ACTIVATIONS)
_KSET = _FLAG0 + 3
_LAGS = _KSET + 1
_GATEW = _LAGS + 1
_SKIP = _GATEW + 1
ENC_DIM = _SKIP + 1

_DECODE_TOL = 1e-6


def encode(arch: ArchSpec) -> np.ndarray:
    """Flatten to the fixed ``ENC_DIM``-vector; unused layer slots are zero."""
    v = np.zeros(ENC_DIM)
    for s, (cell, hid) in enumerate(zip(arch.cell_types, arch.hidden_sizes)):
        v[_CELL0 + s * _N_CELL + CELL_TYPES.index(cell)] = 1.0
        v[_HID0 + s] = hid / 256.0
    v[_NLAY] = arch.n_layers / MAX_LAYERS
    v[_DROP] = arch.dropout
    v[_ACT0 + ACTIVATIONS.index(arch.activation)] = 1.0
    v[_FLAG0 + 0] = float(arch.use_volatility)
    v[_FLAG0 + 1] = float(arch.use_trend)
    v[_FLAG0 + 2] = float(arch.use_range)
    v[_KSET] = arch.kernel_set / (len(KERNEL_SETS) - 1)
    v[_LAGS] = arch.range_lags / 32.0
    v[_GATEW] = arch.gate_width / 32.0
    v[_SKIP] = float(arch.volume_skip)
    return v


def _read_onehot(seg: np.ndarray, names: tuple, what: str) -> str:
    k = int(np.argmax(seg))
    want = np.zeros(seg.size)
    want[k] = 1.0
    if np.max(np.abs(seg - want)) > _DECODE_TOL:
        raise ValueError(f"{what} is not a one-hot segment: {seg}")
    return names[k]


def _read_scaled_int(v: float, scale: float, lo: int, hi: int,
                     what: str) -> int:
    raw = v * scale
    val = int(round(raw))
    if abs(raw - val) > _DECODE_TOL * scale or not lo <= val <= hi:
        raise ValueError(f"{what} out of range: {v!r}")
    return val


def _read_flag(v: float, what: str) -> bool:
    if abs(v) <= _DECODE_TOL:
        return False
    if abs(v - 1.0) <= _DECODE_TOL:
        return True
    raise ValueError(f"{what} must be 0 or 1, got {v!r}")


def decode(vec) -> ArchSpec:
    """Inverse of :func:`encode`; rejects anything off the lattice."""
    v = np.asarray(vec, dtype=np.float64).ravel()
    if v.size != ENC_DIM:
        raise ValueError(f"expected {ENC_DIM} components, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("encoding has non-finite components")
    n = _read_scaled_int(v[_NLAY], MAX_LAYERS, 1, MAX_LAYERS, "n_layers")
    cells, hidden = [], []
    for s in range(MAX_LAYERS):
        seg = v[_CELL0 + s * _N_CELL:_CELL0 + (s + 1) * _N_CELL]
        hid = v[_HID0 + s]
        if s < n:
            cells.append(_read_onehot(seg, CELL_TYPES, f"cell slot {s}"))
            hidden.append(_read_scaled_int(hid, 256, 64, 256,
                                           f"hidden slot {s}"))
        elif np.max(np.abs(seg)) > _DECODE_TOL or abs(hid) > _DECODE_TOL:
            raise ValueError(f"unused layer slot {s} must be zero")
    return ArchSpec(
        cell_types=tuple(cells),
        hidden_sizes=tuple(hidden),
        dropout=float(v[_DROP]),
        activation=_read_onehot(v[_ACT0:_ACT0 + len(ACTIVATIONS)],
                                ACTIVATIONS, "activation"),
        use_volatility=_read_flag(v[_FLAG0 + 0], "volatility flag"),
        use_trend=_read_flag(v[_FLAG0 + 1], "trend flag"),
        use_range=_read_flag(v[_FLAG0 + 2], "range flag"),
        kernel_set=_read_scaled_int(v[_KSET], len(KERNEL_SETS) - 1, 0,
                                    len(KERNEL_SETS) - 1, "kernel set"),
        range_lags=_read_scaled_int(v[_LAGS], 32, 1, 32, "range_lags"),
        gate_width=_read_scaled_int(v[_GATEW], 32, 1, 32, "gate_width"),
        volume_skip=_read_flag(v[_SKIP], "volume skip flag"),
    )


def sample_arch(rng: np.random.Generator) -> ArchSpec:
    """Uniform draw from the sampling grids."""
    n = int(rng.integers(1, MAX_LAYERS + 1))
    flags = [bool(rng.integers(0, 2)) for _ in range(3)]
    if not any(flags):
        flags[int(rng.integers(0, 3))] = True
    return ArchSpec(
        cell_types=tuple(str(rng.choice(CELL_TYPES)) for _ in range(n)),
        hidden_sizes=tuple(int(rng.choice(HIDDEN_CHOICES)) for _ in range(n)),
        dropout=float(rng.choice(DROPOUT_CHOICES)),
        activation=str(rng.choice(ACTIVATIONS)),
        use_volatility=flags[0],
        use_trend=flags[1],
        use_range=flags[2],
        kernel_set=int(rng.integers(0, len(KERNEL_SETS))),
        range_lags=int(rng.choice(RANGE_LAG_CHOICES)),
        gate_width=int(rng.choice(GATE_WIDTH_CHOICES)),
        volume_skip=bool(rng.integers(0, 2)),
    )


def _grid_step(rng, choices, current):
    """A different grid value, biased to the neighbors of ``current``."""
    if current in choices:
        i = choices.index(current)
        near = [j for j in (i - 1, i + 1) if 0 <= j < len(choices)]
        if near and rng.random() < 0.7:
            return choices[near[int(rng.integers(0, len(near)))]]
    others = [c for c in choices if c != current]
    return others[int(rng.integers(0, len(others)))]


def mutate_arch(arch: ArchSpec, rng: np.random.Generator) -> ArchSpec:
    """Change one coordinate; falls back to a fresh sample if boxed in."""
    for _ in range(20):
        move = int(rng.integers(0, 10))
        try:
            if move == 0:
                i = int(rng.integers(0, arch.n_layers))
                cells = list(arch.cell_types)
                cells[i] = str(rng.choice([c for c in CELL_TYPES
                                           if c != cells[i]]))
                return replace(arch, cell_types=tuple(cells))
            if move == 1:
                i = int(rng.integers(0, arch.n_layers))
                hs = list(arch.hidden_sizes)
                hs[i] = _grid_step(rng, list(HIDDEN_CHOICES), hs[i])
                return replace(arch, hidden_sizes=tuple(hs))
            if move == 2:   # grow or shrink the stack by one layer
                if arch.n_layers == 1 or (arch.n_layers < MAX_LAYERS
                                          and rng.random() < 0.5):
                    return replace(
                        arch,
                        cell_types=arch.cell_types + (arch.cell_types[-1],),
                        hidden_sizes=(arch.hidden_sizes
                                      + (arch.hidden_sizes[-1],)))
                return replace(arch, cell_types=arch.cell_types[:-1],
                               hidden_sizes=arch.hidden_sizes[:-1])
            if move == 3:
                return replace(arch, dropout=float(_grid_step(
                    rng, list(DROPOUT_CHOICES), arch.dropout)))
            if move == 4:
                return replace(arch, activation=str(rng.choice(
                    [a for a in ACTIVATIONS if a != arch.activation])))
            if move == 5:
                which = ("use_volatility", "use_trend",
                         "use_range")[int(rng.integers(0, 3))]
                return replace(arch, **{which: not getattr(arch, which)})
            if move == 6:
                return replace(arch, kernel_set=int(_grid_step(
                    rng, list(range(len(KERNEL_SETS))), arch.kernel_set)))
            if move == 7:
                return replace(arch, range_lags=int(_grid_step(
                    rng, list(RANGE_LAG_CHOICES), arch.range_lags)))
            if move == 8:
                return replace(arch, gate_width=int(_grid_step(
                    rng, list(GATE_WIDTH_CHOICES), arch.gate_width)))
            return replace(arch, volume_skip=not arch.volume_skip)
        except ValueError:
            continue    # e.g. switched off the only enabled block
    return sample_arch(rng)


# ---------------------------------------------------------------------------
# Matérn-5/2 Gaussian process
# ---------------------------------------------------------------------------

_SQRT5 = math.sqrt(5.0)
_LOG2PI = math.log(2.0 * math.pi)
_JITTER_MAX = 1e-4


def matern52(x, x2, lengthscales, variance) -> float:
    """k(x,x') = variance * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r)."""
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(x2, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64),
                         a.shape)
    if variance <= 0 or np.any(ls <= 0):
        raise ValueError("hyperparameters must be positive")
    t = _SQRT5 * math.sqrt(float(np.sum(((a - b) / ls) ** 2)))
    return float(variance * (1.0 + t + t * t / 3.0) * math.exp(-t))


def _scaled_dist(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    a = A / ls
    b = B / ls
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _matern_of_r(r: np.ndarray, variance: float) -> np.ndarray:
    t = _SQRT5 * r
    return variance * (1.0 + t + t * t / 3.0) * np.exp(-t)


@dataclass
class GpSurrogate:
    """Fitted surrogate: raw observations plus a cached factorization."""

    x_obs: np.ndarray
    y_obs: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    y_mean: float
    y_scale: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray


def _chol_with_jitter(K: np.ndarray, noise: float):
    """Cholesky of K + (noise + jitter) I, doubling jitter up to 1e-4."""
    n = K.shape[0]
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(K + (noise + jitter) * np.eye(n))
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else 2.0 * jitter
            if jitter > _JITTER_MAX:
                raise NumericError(
                    "kernel factorization failed even with jitter 1e-4")


def _neg_lml(theta: np.ndarray, X: np.ndarray, yt: np.ndarray):
    """Negative log marginal likelihood and its gradient in log-params."""
    n, d = X.shape
    ls = np.exp(theta[:d])
    sv = float(np.exp(theta[d]))
    nv = float(np.exp(theta[d + 1]))
    r = _scaled_dist(X, X, ls)
    t = _SQRT5 * r
    expt = np.exp(-t)
    K = sv * (1.0 + t + t * t / 3.0) * expt
    try:
        L = np.linalg.cholesky(K + (nv + 1e-10) * np.eye(n))
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), yt, check_finite=False)
    lml = (-0.5 * float(yt @ alpha) - float(np.sum(np.log(np.diag(L))))
           - 0.5 * n * _LOG2PI)
    # dLML/dtheta_i = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta_i)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n),
                                           check_finite=False)
    grad = np.empty_like(theta)
    dk_dr_over = sv * (5.0 / 3.0) * (1.0 + t) * expt   # shared radial factor
    for j in range(d):
        Dj = (X[:, j, None] - X[None, :, j]) ** 2
        grad[j] = 0.5 * np.sum(W * (dk_dr_over * Dj / ls[j] ** 2))
    grad[d] = 0.5 * np.sum(W * K)
    grad[d + 1] = 0.5 * nv * float(np.trace(W))
    return -lml, -grad


def gp_fit(x_obs, y_obs) -> GpSurrogate:
    """Fit kernel hyperparameters by multi-start bounded LML maximization.

    Scores are standardized internally; predictions are mapped back to the
    raw scale, so callers never see the transform.
    """
    X = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    y = np.asarray(y_obs, dtype=np.float64).ravel()
    if y.size < 1:
        raise ValueError("need at least one observation")
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} rows of X for {y.size} scores")
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    if y_scale < 1e-12:
        y_scale = 1.0           # flat objective; keep the transform invertible
    yt = (y - y_mean) / y_scale

    d = X.shape[1]
    # the lengthscale ceiling must be high enough that an irrelevant
    # coordinate can flatten out completely, otherwise re-samples of the
    # incumbent that differ only in dead coordinates keep a little
    # posterior spread and expected improvement dithers on them forever
    bounds = ([(math.log(0.05), math.log(1e3))] * d
              + [(math.log(1e-3), math.log(1e3)),
                 (math.log(1e-8), math.log(1.0))])
    starts = [
        np.r_[np.zeros(d), 0.0, math.log(1e-2)],
        np.r_[np.full(d, math.log(0.3)), 0.0, math.log(1e-4)],
        np.r_[np.full(d, math.log(3.0)), math.log(0.5), math.log(1e-1)],
        np.r_[np.zeros(d), math.log(2.0), math.log(1e-6)],
    ]
    best_theta, best_val = starts[0], math.inf
    for s in starts:
        res = minimize(_neg_lml, s, args=(X, yt), method="L-BFGS-B",
                       jac=True, bounds=bounds, options={"maxiter": 200})
        if res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x

    ls = np.exp(best_theta[:d])
    sv = float(np.exp(best_theta[d]))
    nv = float(np.exp(best_theta[d + 1]))
    K = _matern_of_r(_scaled_dist(X, X, ls), sv)
    L, jitter = _chol_with_jitter(K, nv)
    alpha = cho_solve((L, True), yt, check_finite=False)
    return GpSurrogate(x_obs=X, y_obs=y, lengthscales=ls, signal_var=sv,
                       noise_var=nv, y_mean=y_mean, y_scale=y_scale,
                       jitter=jitter, chol=L, alpha=alpha)


def gp_predict(gp: GpSurrogate, x):
    """Posterior mean and standard deviation on the raw score scale.

    A single encoding gives floats; a matrix of encodings gives arrays.
    """
    if not isinstance(gp, GpSurrogate) or gp.chol is None:
        raise ValueError("surrogate is not fitted")
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != gp.x_obs.shape[1]:
        raise ValueError(f"expected {gp.x_obs.shape[1]}-dim encodings")
    ks = _matern_of_r(_scaled_dist(X, gp.x_obs, gp.lengthscales),
                      gp.signal_var)
    mu_t = ks @ gp.alpha
    v = solve_triangular(gp.chol, ks.T, lower=True, check_finite=False)
    var_t = np.maximum(gp.signal_var - np.sum(v * v, axis=0), 0.0)
    mu = gp.y_mean + gp.y_scale * mu_t
    sd = gp.y_scale * np.sqrt(var_t)
    if single:
        return float(mu[0]), float(sd[0])
    return mu, sd


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

def acquisition_ei(gp: GpSurrogate, x, best: float, xi: float = 0.01):
    """Expected improvement over ``best`` with exploration offset ``xi``."""
    mu, sd = gp_predict(gp, x)
    scalar = np.ndim(mu) == 0
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sd = np.atleast_1d(np.asarray(sd, dtype=np.float64))
    imp = mu - best - xi
    z = np.divide(imp, sd, out=np.zeros_like(imp), where=sd > 0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = np.where(sd > 0, imp * ndtr(z) + sd * pdf, np.maximum(imp, 0.0))
    return float(ei[0]) if scalar else ei


def acquisition_ucb(gp: GpSurrogate, x, beta_t: float):
    """mu + beta_t * sigma; beta_t controls the exploration appetite."""
    if beta_t < 0:
        raise ValueError("beta_t must be non-negative")
    mu, sd = gp_predict(gp, x)
    return mu + beta_t * sd


def adaptive_beta(beta_base: float, gamma: float,
                  uncertainty_t: float) -> float:
    """beta_t = beta_base * (1 + gamma * uncertainty_t)."""
    if beta_base < 0 or gamma < 0:
        raise ValueError("beta_base and gamma must be non-negative")
    if not 0.0 <= uncertainty_t <= 1.0:
        raise ValueError("uncertainty_t must lie in [0, 1]")
    return beta_base * (1.0 + gamma * uncertainty_t)


# ---------------------------------------------------------------------------
# proposal
# ---------------------------------------------------------------------------

def _enc_key(v: np.ndarray) -> bytes:
    return np.asarray(v, dtype=np.float64).tobytes()


def propose_next(gp: GpSurrogate, config, rng: np.random.Generator,
                 uncertainty_t: float = 0.0,
                 evaluated: Optional[set] = None) -> ArchSpec:
    """Argmax of the acquisition over random samples plus local mutations.

    Anything already evaluated (byte-identical encoding) is dropped from the
    candidate pool, so a verbatim re-proposal is impossible.
    """
    n_rand = getattr(config, "n_candidates", 2048)
    n_mut = getattr(config, "n_mutations", 8)
    if evaluated is None:
        evaluated = {_enc_key(row) for row in gp.x_obs}

    pool: dict[bytes, ArchSpec] = {}

    def admit(arch):
        key = _enc_key(encode(arch))
        if key not in evaluated and key not in pool:
            pool[key] = arch

    for _ in range(n_rand):
        admit(sample_arch(rng))
    top = np.argsort(gp.y_obs)[::-1][:5]
    for i in top:
        seed_arch = decode(gp.x_obs[int(i)])
        for _ in range(n_mut):
            admit(mutate_arch(seed_arch, rng))
    tries = 0
    while not pool:                     # only possible in a toy space
        admit(mutate_arch(decode(gp.x_obs[int(top[0])]), rng))
        tries += 1
        if tries > 10_000:
            raise RuntimeError("search space exhausted")

    archs = list(pool.values())
    X = np.stack([encode(a) for a in archs])
    mode = getattr(config, "acquisition", "EI")
    if mode == "UCB":
        beta_t = adaptive_beta(getattr(config, "beta_base", 2.0),
                               getattr(config, "gamma", 1.0), uncertainty_t)
        vals = acquisition_ucb(gp, X, beta_t)
    else:
        vals = acquisition_ei(gp, X, best=float(np.max(gp.y_obs)))
    return archs[int(np.argmax(vals))]


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------

@dataclass
class SearchConfig:
    generations: int = 10
    evals_per_gen: int = 10
    n_initial: int = 10
    budget: int = 100        # hard cap; the last generation truncates to fit
    acquisition: str = "EI"
    beta_base: float = 2.0
    gamma: float = 1.0
    n_candidates: int = 2048
    n_mutations: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.generations < 1 or self.evals_per_gen < 1:
            raise ValueError("need at least one generation and evaluation")
        if self.n_initial < 1:
            raise ValueError("need at least one initial sample")
        if self.budget < self.n_initial + 1:
            raise ValueError("budget must cover the initial design plus one")
        if self.acquisition not in ("EI", "UCB"):
            raise ValueError("acquisition must be 'EI' or 'UCB'")
        if self.beta_base < 0 or self.gamma < 0:
            raise ValueError("beta_base and gamma must be non-negative")


@dataclass
class EvalRecord:
    """One candidate evaluation; generation 0 is the initial random design."""

    index: int
    generation: int
    arch: ArchSpec
    score: float                 # NaN when failed
    failed: bool = False
    fail_reason: str = ""
    report_id: str = ""
    acq_value: float = math.nan  # NaN for the initial design
    uncertainty_t: float = 0.0
    wall_time: float = 0.0
    report: Optional[TrainReport] = None   # not serialized

    def to_json_dict(self) -> dict:
        """Stable serialization: wall time stays out so that two identically
        seeded runs emit byte-identical lines."""
        def clean(x):
            return None if (isinstance(x, float) and not math.isfinite(x)) \
                else x
        return {
            "index": self.index,
            "generation": self.generation,
            "arch": asdict(self.arch),
            "score": clean(self.score),
            "failed": self.failed,
            "fail_reason": self.fail_reason,
            "report_id": self.report_id,
            "acq_value": clean(self.acq_value),
            "uncertainty_t": self.uncertainty_t,
        }


@dataclass
class SearchTrace:
    config: SearchConfig
    records: list = field(default_factory=list)
    gen_summary: list = field(default_factory=list)
    best_index: int = -1
    final_arch: Optional[ArchSpec] = None
    final_metrics: Optional[dict] = None
    final_report: Optional[TrainReport] = None   # not serialized
    wall_time: float = 0.0

    @property
    def best_record(self) -> Optional[EvalRecord]:
        return self.records[self.best_index] if self.best_index >= 0 else None

    def jsonl_lines(self) -> list:
        return [json.dumps(r.to_json_dict(), sort_keys=True)
                for r in self.records]

    def summary_dict(self) -> dict:
        best = self.best_record
        return {
            "config": asdict(self.config),
            "n_evaluations": len(self.records),
            "generations": self.gen_summary,
            "best": best.to_json_dict() if best else None,
            "final_arch": asdict(self.final_arch) if self.final_arch else None,
            "final_metrics": _jsonable(self.final_metrics),
            "wall_time": round(self.wall_time, 3),
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.jsonl").write_text(
            "\n".join(self.jsonl_lines()) + "\n")
        (out / "summary.json").write_text(
            json.dumps(self.summary_dict(), indent=2, sort_keys=True))
        return out


def _jsonable(obj):
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return str(obj)


def _sentinel(valid_scores: list) -> float:
    """Stand-in score for failed candidates: worst minus one std."""
    if not valid_scores:
        return -1.0
    spread = float(np.std(valid_scores))
    return float(np.min(valid_scores)) - (spread if spread > 0 else 1.0)


def _gen_row(records: list, gen: int) -> dict:
    scores = [r.score for r in records
              if r.generation == gen and math.isfinite(r.score)]
    rows = [r for r in records if r.generation == gen]
    best_idx = -1
    if scores:
        best = max(scores)
        best_idx = next(r.index for r in rows if r.score == best)
    return {
        "generation": gen,
        "n_evals": len(rows),
        "n_failed": sum(r.failed for r in rows),
        "best_score": max(scores) if scores else None,
        "mean_score": float(np.mean(scores)) if scores else None,
        "std_score": float(np.std(scores)) if scores else None,
        "best_index": best_idx,
    }


def _merged_dataset(source, train_cfg: TrainConfig):
    """Train+val folded together for the final fit: 90% train, 10% val tail.

    The test rows are untouched.  Accepts a panel (windows are built here)
    or an existing WindowDataset (its split labels are rewritten on a copy).
    """
    if isinstance(source, WindowDataset):
        ds = replace(source, split=source.split.copy())
    else:
        ds = build_windows(source, train_cfg.t_window, train_cfg.stride)
    keep = np.where(ds.split != "test")[0]
    if keep.size < 4:
        raise ValueError("not enough non-test windows for a final fit")
    cut = min(int(round(keep.size * 0.9)), keep.size - 2)
    ds.split[keep[:cut]] = "train"
    ds.split[keep[cut:]] = "val"
    if ds.p is None:
        detector = pretrain_detector(ds, seed=train_cfg.seed)
        attach_regime_outputs(ds, detector)
    return ds


def train_final(arch, source, train_cfg: TrainConfig, ds=None):
    """Refit on train+val and report test metrics.

    Returns ``(report, metrics)``; metrics is None when training failed.
    """
    if ds is None:
        ds = _merged_dataset(source, train_cfg)
    report = train_candidate(arch, ds, train_cfg)
    if report.failed or report.model is None:
        return report, None
    metrics = evaluate(report.model, ds, "test",
                       weights=train_cfg.loss_weights,
                       static_gate=train_cfg.static_gate,
                       l_target=train_cfg.l_target,
                       batch_size=train_cfg.batch_size)
    return report, metrics


def run_search(panel, search_cfg: SearchConfig, train_cfg: TrainConfig,
               objective: Optional[Callable[[ArchSpec], float]] = None,
               out_dir=None, reuse: Optional[dict] = None) -> SearchTrace:
    """Initial random design, then generations of propose-train-update.

    ``panel`` may be a FeaturePanel or a prebuilt WindowDataset.  When
    ``objective`` is given it replaces candidate training entirely (useful
    for synthetic benchmarks); otherwise each candidate is trained and
    scored by negative best validation loss.  The surrogate is refit once
    per generation; failures are recorded and never abort the loop.

    ``reuse`` resumes an interrupted run: it maps encoding keys (see
    :func:`_enc_key`) of already-evaluated candidates to dicts with keys
    ``score``, ``failed``, ``fail_reason`` and ``unc_after`` (the trained
    candidate's mean validation uncertainty, or None).  Proposals replay
    identically because every random draw still happens; only the training
    of a remembered candidate is skipped.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng([search_cfg.seed, 701])
    ds = None
    if objective is None:
        if isinstance(panel, WindowDataset):
            ds = panel
        else:
            ds = build_windows(panel, train_cfg.t_window, train_cfg.stride)
        if ds.p is None:
            detector = pretrain_detector(ds, seed=train_cfg.seed)
            attach_regime_outputs(ds, detector)

    trace = SearchTrace(config=search_cfg)
    evaluated: set = set()
    last_unc = 0.0

    def run_one(arch: ArchSpec, gen: int, acq: float) -> EvalRecord:
        nonlocal last_unc
        idx = len(trace.records)
        t1 = time.perf_counter()
        rec = EvalRecord(index=idx, generation=gen, arch=arch,
                         score=math.nan, report_id=f"eval-{idx:03d}",
                         acq_value=acq, uncertainty_t=last_unc)
        prior = reuse.pop(_enc_key(encode(arch)), None) if reuse else None
        if prior is not None:
            rec.score = prior["score"]
            rec.failed = prior["failed"]
            rec.fail_reason = prior["fail_reason"]
            if prior.get("unc_after") is not None:
                last_unc = min(max(prior["unc_after"], 0.0), 1.0)
        elif objective is not None:
            try:
                rec.score = float(objective(arch))
            except Exception as exc:       # scored functions may reject archs
                rec.failed, rec.fail_reason = True, str(exc)
        else:
            rep = train_candidate(arch, ds, train_cfg)
            rec.report = rep
            if rep.failed:
                rec.failed, rec.fail_reason = True, rep.fail_reason
            else:
                rec.score = rep.score
                last_unc = min(max(rep.mean_val_uncertainty, 0.0), 1.0)
        rec.wall_time = time.perf_counter() - t1
        trace.records.append(rec)
        evaluated.add(_enc_key(encode(arch)))
        return rec

    # generation 0: random design
    n_init = min(search_cfg.n_initial, search_cfg.budget)
    while len(trace.records) < n_init:
        arch = sample_arch(rng)
        if _enc_key(encode(arch)) in evaluated:
            continue
        run_one(arch, 0, math.nan)
    trace.gen_summary.append(_gen_row(trace.records, 0))

    remaining = search_cfg.budget - len(trace.records)
    for gen in range(1, search_cfg.generations + 1):
        n_this = min(search_cfg.evals_per_gen, remaining)
        if n_this <= 0:
            break
        valid = [r.score for r in trace.records if math.isfinite(r.score)]
        fill = _sentinel(valid)
        X = np.stack([encode(r.arch) for r in trace.records])
        y = np.array([r.score if math.isfinite(r.score) else fill
                      for r in trace.records])
        gp = gp_fit(X, y)
        for _ in range(n_this):
            arch = propose_next(gp, search_cfg, rng,
                                uncertainty_t=last_unc, evaluated=evaluated)
            enc = encode(arch)
            if search_cfg.acquisition == "UCB":
                acq = float(acquisition_ucb(
                    gp, enc, adaptive_beta(search_cfg.beta_base,
                                           search_cfg.gamma, last_unc)))
            else:
                acq = float(acquisition_ei(gp, enc,
                                           best=float(np.max(gp.y_obs))))
            run_one(arch, gen, acq)
        remaining -= n_this
        trace.gen_summary.append(_gen_row(trace.records, gen))

    finite = [(r.score, r.index) for r in trace.records
              if math.isfinite(r.score)]
    if finite:
        trace.best_index = max(finite)[1]
        trace.final_arch = trace.records[trace.best_index].arch
        if objective is None:
            report, metrics = train_final(trace.final_arch, ds, train_cfg)
            if metrics is not None:
                trace.final_metrics = {
                    "mae": metrics["mae"], "rmse": metrics["rmse"],
                    "r2": metrics["r2"],
                    "test_loss": metrics["breakdown"].total,
                    "per_regime_mae": metrics["per_regime_mae"],
                    "n_windows": metrics["n_windows"],
                    "n_parameters": report.n_parameters,
                    "epochs": report.epochs_run,
                }
                trace.final_report = report
    trace.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        trace.save(out_dir)
    return trace


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def run_ablation(best_arch, panel, train_cfg: TrainConfig) -> list:
    """Retrain the winner with single components removed.

    Rows: full model, each block disabled, static (uniform) gating, and all
    stability controls off.  Every variant uses the same merged train+val
    fit and reports test MAE/RMSE/R2 plus the MAE increase over the full
    model in percent.
    """
    ds = _merged_dataset(panel, train_cfg)

    def cfg_with(**kw) -> TrainConfig:
        return TrainConfig(**{**train_cfg.__dict__, **kw})

    w = train_cfg.loss_weights
    variants = [("full", best_arch, train_cfg)]
    for label, flag in (("no_volatility_block", "use_volatility"),
                        ("no_trend_block", "use_trend"),
                        ("no_range_block", "use_range")):
        try:
            variants.append((label, replace(best_arch, **{flag: False}),
                             train_cfg))
        except ValueError as exc:
            variants.append((label, None, str(exc)))
    variants.append(("static_gate", best_arch, cfg_with(static_gate=True)))
    variants.append(("no_stability", best_arch, cfg_with(
        loss_weights=LossWeights(w.w_p, w.w_v, w.w_r, 0.0),
        spectral_projection=False, adaptive_clip=False,
        adaptive_l_target=False)))

    rows = []
    for label, arch, cfg in variants:
        if arch is None:
            rows.append({"variant": label, "failed": True, "note": cfg,
                         "mae": math.nan, "rmse": math.nan, "r2": math.nan,
                         "per_regime_mae": {}, "mae_increase_pct": math.nan})
            continue
        report, metrics = train_final(arch, panel, cfg, ds=ds)
        if metrics is None:
            rows.append({"variant": label, "failed": True,
                         "note": report.fail_reason, "mae": math.nan,
                         "rmse": math.nan, "r2": math.nan,
                         "per_regime_mae": {},
                         "mae_increase_pct": math.nan})
            continue
        rows.append({"variant": label, "failed": False, "note": "",
                     "mae": metrics["mae"], "rmse": metrics["rmse"],
                     "r2": metrics["r2"],
                     "per_regime_mae": metrics["per_regime_mae"],
                     "n_parameters": report.n_parameters,
                     "mae_increase_pct": math.nan})
    full_mae = rows[0]["mae"]
    for row in rows:
        if not row["failed"] and math.isfinite(full_mae) and full_mae > 0:
            row["mae_increase_pct"] = 100.0 * (row["mae"] - full_mae) \
                / full_mae
    return rows


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

# coordinates of the planted optimum: 2 layers, dropout 0.1, 16 range lags,
# gate width 8; every one of them sits on the sampling grids
_BENCH_WEIGHTS = (8.0, 6.0, 4.0, 4.0)
_BENCH_SCALE = 10.0   # keeps grid-step score gaps well above EI's xi offset


def benchmark_objective(arch: ArchSpec) -> float:
    """Deterministic score of the encoding with a planted maximum of 10.0.

    Only four coordinates matter (depth, dropout, range lookback, gate
    width); the rest are distractors the surrogate has to learn to ignore.
    """
    v = encode(arch)
    w1, w2, w3, w4 = _BENCH_WEIGHTS
    q = (w1 * (v[_NLAY] - 2.0 / 3.0) ** 2
         + w2 * (v[_DROP] - 0.1) ** 2
         + w3 * (v[_LAGS] - 0.5) ** 2
         + w4 * (v[_GATEW] - 0.25) ** 2)
    return _BENCH_SCALE / (1.0 + q)
