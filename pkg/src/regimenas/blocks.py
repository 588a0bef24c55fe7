"""Volatility/Trend/Range blocks, the regime gate, and the blended model.

Each block maps a feature window (B, T, F) to a representation (B, T, d).
The model projects the input to the same width, adds each block as a
sigmoid-scaled residual, reads the last step through a shared linear head,
and mixes the three per-block predictions with gate weights computed from
the regime probabilities:

    path_i = x W_in + sigmoid(theta_i) * block_i(x)
    y_hat  = sum_i g_i(p) * (path_i[last] w_head + b_head)

Because the gate is the only place the regime probabilities enter, and the
head is affine over a convex combination, the prediction's sensitivity to p
is bounded by sqrt(3) * L_G * B where L_G is the gate's Lipschitz constant
(product of its layer spectral norms times the softmax Jacobian bound 1/2)
and B bounds the per-block head outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import REGIMES
from .tensor import ShapeError, Tensor

CELL_TYPES = ("RNN", "GRU", "LSTM")
ACTIVATIONS = ("relu", "gelu")
KERNEL_SETS = ((3,), (3, 5), (3, 5, 7))

MAX_PARAMETERS = 5_000_000


@dataclass
class BlockConfig:
    """Architecture knobs for one assembled model."""

    cell_type: str | tuple = "GRU"   # one name, or one per layer
    hidden_sizes: tuple = (64,)
    dropout: float = 0.0
    activation: str = "relu"
    use_volatility: bool = True
    use_trend: bool = True
    use_range: bool = True
    kernel_sizes: tuple = (3, 5, 7)
    dilations: tuple = (1, 2)
    range_lags: int = 16
    gate_width: int = 16
    volume_skip: bool = True
    vol_coupling_init: float = 1.0   # v_g start value
    leak_base: float = 0.1           # a0 in the adaptive activation

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.dilations = tuple(int(d) for d in self.dilations)
        if isinstance(self.cell_type, (list, tuple)):
            self.cell_type = tuple(self.cell_type)
            if len(self.cell_type) != len(self.hidden_sizes):
                raise ValueError("need one cell type per layer")
            if any(c not in CELL_TYPES for c in self.cell_type):
                raise ValueError(f"cell types must be one of {CELL_TYPES}")
        elif self.cell_type not in CELL_TYPES:
            raise ValueError(f"cell_type must be one of {CELL_TYPES}")
        if not 1 <= len(self.hidden_sizes) <= 3:
            raise ValueError("between 1 and 3 layers")
        if any(not 64 <= h <= 256 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must lie in [64, 256]")
        if not 0.0 <= self.dropout <= 0.3:
            raise ValueError("dropout must lie in [0, 0.3]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not (self.use_volatility or self.use_trend or self.use_range):
            raise ValueError("at least one block must be enabled")
        if not self.kernel_sizes or any(k < 1 for k in self.kernel_sizes):
            raise ValueError("bad kernel sizes")
        if self.range_lags < 1:
            raise ValueError("range_lags must be >= 1")
        if self.gate_width < 1:
            raise ValueError("gate_width must be >= 1")

    @property
    def cell_types(self) -> tuple:
        """Per-layer cell names; a plain string broadcasts to every layer."""
        if isinstance(self.cell_type, tuple):
            return self.cell_type
        return (self.cell_type,) * self.n_layers

    @property
    def width(self) -> int:
        return self.hidden_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes)


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _act(name: str, x: Tensor) -> Tensor:
    return T.relu(x) if name == "relu" else T.gelu(x)


def _ensure_batched(x) -> tuple:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        return T.reshape(t, (1,) + t.shape), True
    if t.ndim == 3:
        return t, False
    raise ShapeError(f"expected (T, F) or (B, T, F), got {t.shape}")


# ---------------------------------------------------------------------------
# volatility block
# ---------------------------------------------------------------------------

_GATE_NAMES = {"RNN": ("h",), "GRU": ("z", "r", "h"),
               "LSTM": ("i", "f", "o", "c")}


class VolatilityBlock:
    """Recurrent cell with volatility-coupled gates and a volume-scaled skip.

    All sigma dependence flows through the single coupling s_t = v_g * sigma_t:
    it is added to every gate pre-activation, and the output nonlinearity is
    leaky-linear with slope a0 / (1 + |s_t|) on the negative side.  Setting
    v_g = 0 therefore severs the block from sigma entirely, and sigma = 0
    recovers the plain cell with a constant a0 slope.
    """

    def __init__(self, cfg: BlockConfig, n_features: int, rng):
        self.cfg = cfg
        self.n_features = n_features
        p = {}
        d_in = n_features
        for layer, d_out in enumerate(cfg.hidden_sizes):
            for g in _GATE_NAMES[cfg.cell_types[layer]]:
                p[f"l{layer}_wx_{g}"] = _glorot(rng, d_in, d_out)
                p[f"l{layer}_wh_{g}"] = _glorot(rng, d_out, d_out)
                p[f"l{layer}_b_{g}"] = np.zeros(d_out)
            d_in = d_out
        d = cfg.width
        p["w_out"] = _glorot(rng, d, d)
        p["b_out"] = np.zeros(d)
        p["v_g"] = np.asarray(cfg.vol_coupling_init, dtype=np.float64)
        if cfg.volume_skip:
            p["w_skip"] = _glorot(rng, n_features, d)
            p["skip_scale"] = np.zeros(2)  # affine map of log-volume
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def forward(self, x: Tensor, sigma: Tensor,
                log_volume: Optional[Tensor]) -> Tensor:
        """x: (B, T, F); sigma, log_volume: (B, T). Returns (B, T, d)."""
        if np.any(sigma.data < 0):
            raise ValueError("sigma must be non-negative")
        b, t_len, _ = x.shape
        cfg = self.cfg
        s = T.reshape(sigma * self.params["v_g"], (b, t_len, 1))
        h_seq = self._run_stack(x, s, b, t_len)

        pre = T.matmul(h_seq, self.params["w_out"]) + self.params["b_out"]
        slope = Tensor(cfg.leak_base) / (Tensor(1.0) + T.absolute(s))
        out = T.relu(pre) + slope * (pre - T.relu(pre))

        if cfg.volume_skip and log_volume is not None:
            sc = self.params["skip_scale"]
            gate = T.sigmoid(T.reshape(log_volume, (b, t_len, 1))
                             * T.tslice(sc, (slice(0, 1),))
                             + T.tslice(sc, (slice(1, 2),)))
            out = out + gate * T.matmul(x, self.params["w_skip"])
        return out

    def _run_stack(self, x, s, b, t_len):
        inp = x
        for layer in range(self.cfg.n_layers):
            inp = self._run_layer(layer, inp, s, b, t_len)
        return inp

    def _run_layer(self, layer, x, s, b, t_len):
        cfg = self.cfg
        d = cfg.hidden_sizes[layer]
        cell = cfg.cell_types[layer]
        P = self.params

        def lin(g, xt, ht):
            pre = (T.matmul(xt, P[f"l{layer}_wx_{g}"])
                   + T.matmul(ht, P[f"l{layer}_wh_{g}"])
                   + P[f"l{layer}_b_{g}"])
            return pre

        h = Tensor(np.zeros((b, d)))
        c = Tensor(np.zeros((b, d)))
        outs = []
        for t in range(t_len):
            xt = T.tslice(x, (slice(None), t, slice(None)))
            st = T.tslice(s, (slice(None), t, slice(None)))
            if cell == "RNN":
                h = T.tanh(lin("h", xt, h) + st)
            elif cell == "GRU":
                z = T.sigmoid(lin("z", xt, h) + st)
                r = T.sigmoid(lin("r", xt, h) + st)
                cand_pre = (T.matmul(xt, P[f"l{layer}_wx_h"])
                            + T.matmul(r * h, P[f"l{layer}_wh_h"])
                            + P[f"l{layer}_b_h"])
                cand = T.tanh(cand_pre)
                h = (Tensor(1.0) - z) * h + z * cand
            else:  # LSTM
                i = T.sigmoid(lin("i", xt, h) + st)
                f = T.sigmoid(lin("f", xt, h) + st)
                o = T.sigmoid(lin("o", xt, h))
                cand = T.tanh(lin("c", xt, h))
                c = f * c + i * cand
                h = o * T.tanh(c)
            outs.append(T.reshape(h, (b, 1, d)))
        return T.concat(outs, axis=1)


# ---------------------------------------------------------------------------
# trend block
# ---------------------------------------------------------------------------

def causal_conv_taps(x: Tensor, weights: list, dilation: int) -> Tensor:
    """Causal 1-D convolution as a sum of shifted tap projections.

    ``weights[j]`` maps the input ``j*dilation`` steps back; positions with
    insufficient history see zero padding.
    """
    b, t_len, _ = x.shape
    out = T.matmul(x, weights[0])
    for j in range(1, len(weights)):
        shift = j * dilation
        if shift >= t_len:
            continue
        shifted = T.pad(T.tslice(x, (slice(None), slice(0, t_len - shift),
                                     slice(None))),
                        [(0, 0), (shift, 0), (0, 0)])
        out = out + T.matmul(shifted, weights[j])
    return out


def momentum_weights(t_len: int, tau: Tensor) -> Tensor:
    """Lower-triangular lag weights: row t is softmax over lags of -lag/tau.

    Future positions carry a large negative constant, which underflows to an
    exact zero weight after the softmax.
    """
    idx = np.arange(t_len)
    lag = idx[:, None] - idx[None, :]
    mask = np.where(lag < 0, -1e9, 0.0)
    scores = Tensor(-np.maximum(lag, 0.0)) / tau + Tensor(mask)
    return T.softmax(scores, axis=-1)


class TrendBlock:
    """Parallel causal convolutions plus an exponential-recency momentum path.

    Kernel sizes cross dilations (e.g. 3/5/7 x 1,2); branch outputs and the
    momentum feature m_t = sum_i softmax(-i/tau)(i) x_{t-i} are concatenated
    and linearly mixed.  tau = exp(log_tau) stays positive.
    """

    def __init__(self, cfg: BlockConfig, n_features: int, rng):
        self.cfg = cfg
        self.n_features = n_features
        d = cfg.width
        self.branch_channels = max(8, d // (2 * len(cfg.kernel_sizes)
                                            * len(cfg.dilations)))
        c = self.branch_channels
        p = {}
        for k in cfg.kernel_sizes:
            for dl in cfg.dilations:
                for j in range(k):
                    p[f"k{k}_d{dl}_tap{j}"] = _glorot(rng, n_features, c)
        p["log_tau"] = np.asarray(0.0)
        n_branches = len(cfg.kernel_sizes) * len(cfg.dilations)
        p["w_mix"] = _glorot(rng, n_branches * c + n_features, d)
        p["b_mix"] = np.zeros(d)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        b, t_len, _ = x.shape
        if t_len < max(cfg.kernel_sizes):
            raise ShapeError(
                f"window {t_len} shorter than largest kernel "
                f"{max(cfg.kernel_sizes)}")
        branches = []
        for k in cfg.kernel_sizes:
            for dl in cfg.dilations:
                taps = [self.params[f"k{k}_d{dl}_tap{j}"] for j in range(k)]
                branches.append(causal_conv_taps(x, taps, dl))
        tau = T.exp(self.params["log_tau"])
        lam = momentum_weights(t_len, tau)
        momentum = T.matmul(T.reshape(lam, (1, t_len, t_len)), x)
        mixed = T.matmul(T.concat(branches + [momentum], axis=-1),
                         self.params["w_mix"]) + self.params["b_mix"]
        return _act(cfg.activation, mixed)


# ---------------------------------------------------------------------------
# range block
# ---------------------------------------------------------------------------

def lag_kernel_weights(x: Tensor, n_lags: int, bandwidth: Tensor) -> Tensor:
    """Softmax kernel weights over the last ``n_lags`` rows.

    w[b, t, j] ~ exp(-||x_t - x_{t-j-1}||^2 / h); lags that reach before the
    window start are masked out.  The first row has no history at all, so its
    weights fall back to uniform over zero padding.
    """
    if float(np.min(bandwidth.data if isinstance(bandwidth, Tensor)
                    else bandwidth)) <= 0.0:
        raise ValueError("bandwidth must be positive")
    b, t_len, f = x.shape
    dists = []
    for j in range(1, n_lags + 1):
        if j < t_len:
            head = T.tslice(x, (slice(None), slice(0, t_len - j), slice(None)))
            diff = T.tslice(x, (slice(None), slice(j, t_len), slice(None))) - head
            d2 = T.tsum(diff * diff, axis=-1, keepdims=True)
            d2 = T.pad(d2, [(0, 0), (j, 0), (0, 0)])
        else:
            d2 = Tensor(np.zeros((b, t_len, 1)))
        dists.append(d2)
    d2_all = T.concat(dists, axis=-1)                      # (B, T, J)
    lag_idx = np.arange(1, n_lags + 1)[None, :]
    t_idx = np.arange(t_len)[:, None]
    mask = np.where(lag_idx > t_idx, -1e9, 0.0)            # (T, J)
    scores = T.neg(d2_all) / bandwidth + Tensor(mask)
    return T.softmax(scores, axis=-1)


class RangeBlock:
    """Kernel average over recent lags, compared against the current row.

    a_t = sum_j w_j x_{t-j} with w = softmax(-||x_t - x_{t-j}||^2 / h);
    the output is a linear map of concat(a_t, x_t − a_t).  h = exp(log_h).
    """

    def __init__(self, cfg: BlockConfig, n_features: int, rng):
        self.cfg = cfg
        self.n_features = n_features
        p = {
            "log_h": np.asarray(0.0),
            "w_mix": _glorot(rng, 2 * n_features, cfg.width),
            "b_mix": np.zeros(cfg.width),
        }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def kernel_average(self, x: Tensor, bandwidth: Optional[Tensor] = None,
                       n_lags: Optional[int] = None) -> Tensor:
        """The lag-weighted anchor a_t, before any mixing."""
        b, t_len, f = x.shape
        J = self.cfg.range_lags if n_lags is None else n_lags
        h = T.exp(self.params["log_h"]) if bandwidth is None else bandwidth
        w = lag_kernel_weights(x, J, h)                    # (B, T, J)
        anchor = Tensor(np.zeros((b, t_len, f)))
        for j in range(1, J + 1):
            if j >= t_len + 1:
                break
            wj = T.tslice(w, (slice(None), slice(None), slice(j - 1, j)))
            if j < t_len:
                lagged = T.pad(
                    T.tslice(x, (slice(None), slice(0, t_len - j), slice(None))),
                    [(0, 0), (j, 0), (0, 0)])
            else:
                lagged = Tensor(np.zeros((b, t_len, f)))
            anchor = anchor + wj * lagged
        return anchor

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        anchor = self.kernel_average(x)
        both = T.concat([anchor, x - anchor], axis=-1)
        mixed = T.matmul(both, self.params["w_mix"]) + self.params["b_mix"]
        return _act(cfg.activation, mixed)


# ---------------------------------------------------------------------------
# gate
# ---------------------------------------------------------------------------

class GatingNetwork:
    """softmax(p @ w_skip + MLP(p)): direct routing path plus a tanh refiner.

    ``align`` initializes the skip path; routing each regime's probability
    mass straight to one block (an identity-like column pattern, spectral
    norm 1) makes blocks train mostly on windows of their nominal regime
    from the first step.  The MLP output layer starts at zero, so the skip
    path alone sets the initial blend; with ``align=None`` the skip starts
    at zero too and the initial gate is exactly uniform.  ``n_out`` is the
    number of enabled blocks; weights always sum to 1 over those.
    """

    def __init__(self, n_regimes: int, width: int, n_out: int, rng,
                 align: Optional[np.ndarray] = None):
        self.n_out = n_out
        if align is None:
            align = np.zeros((n_regimes, n_out))
        align = np.asarray(align, dtype=np.float64)
        if align.shape != (n_regimes, n_out):
            raise ShapeError(f"alignment shape {align.shape}, "
                             f"expected {(n_regimes, n_out)}")
        self.params = {
            "w_skip": Tensor(align.copy(), requires_grad=True),
            "w1": Tensor(_glorot(rng, n_regimes, width), requires_grad=True),
            "b1": Tensor(np.zeros(width), requires_grad=True),
            "w2": Tensor(np.zeros((width, n_out)), requires_grad=True),
            "b2": Tensor(np.zeros(n_out), requires_grad=True),
        }

    def forward(self, p: Tensor) -> Tensor:
        if np.any(p.data < -1e-9) or np.any(
                np.abs(p.data.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("gate input must be a probability vector")
        squeeze = p.ndim == 1
        if squeeze:
            p = T.reshape(p, (1,) + p.shape)
        hidden = T.tanh(T.matmul(p, self.params["w1"]) + self.params["b1"])
        logits = T.matmul(p, self.params["w_skip"]) \
            + T.matmul(hidden, self.params["w2"]) + self.params["b2"]
        g = T.softmax(logits, axis=-1)
        return T.reshape(g, (self.n_out,)) if squeeze else g

    def lipschitz_bound(self) -> float:
        """1/2 * (skip norm + product of MLP norms); tanh is 1-Lipschitz."""
        s0 = T.spectral_norm(self.params["w_skip"].data, iters=500, tol=1e-12)
        s1 = T.spectral_norm(self.params["w1"].data, iters=500, tol=1e-12)
        s2 = T.spectral_norm(self.params["w2"].data, iters=500, tol=1e-12)
        return 0.5 * (s0 + s1 * s2)


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------

BLOCK_ORDER = ("volatility", "trend", "range")
NOMINAL_REGIME = {"volatility": "HighVolatility", "trend": "Trend",
                  "range": "Range"}


class BlendedModel:
    """Gated blend of the enabled specialized blocks with a shared head."""

    def __init__(self, cfg: BlockConfig, n_features: int, n_regimes: int = 3,
                 seed: int = 0):
        self.cfg = cfg
        self.n_features = n_features
        rng = np.random.default_rng([seed, 211])
        d = cfg.width
        self.blocks = {}
        if cfg.use_volatility:
            self.blocks["volatility"] = VolatilityBlock(cfg, n_features, rng)
        if cfg.use_trend:
            self.blocks["trend"] = TrendBlock(cfg, n_features, rng)
        if cfg.use_range:
            self.blocks["range"] = RangeBlock(cfg, n_features, rng)
        self.block_names = [b for b in BLOCK_ORDER if b in self.blocks]
        # partial permutation matrix (spectral norm 1, so it survives
        # projection): each regime's probability feeds its nominal block
        align = np.zeros((n_regimes, len(self.block_names)))
        if n_regimes == len(REGIMES):
            for j, name in enumerate(self.block_names):
                align[REGIMES.index(NOMINAL_REGIME[name]), j] = 1.0
        self.gate = GatingNetwork(n_regimes, cfg.gate_width,
                                  len(self.block_names), rng, align=align)
        n_blocks = len(self.block_names)
        self.own_params = {
            "w_in": Tensor(_glorot(rng, n_features, d), requires_grad=True),
            "alpha_raw": Tensor(np.zeros(n_blocks), requires_grad=True),
            # one affine head per block so the gate has distinct predictions
            # to route between; scaled down so initial outputs sit near the
            # magnitude of normalized returns instead of O(1)
            "w_head": Tensor(0.05 * _glorot(rng, d, n_blocks),
                             requires_grad=True),
            "b_head": Tensor(np.zeros(n_blocks), requires_grad=True),
        }
        n = self.n_parameters()
        if n > MAX_PARAMETERS:
            raise ValueError(f"model has {n} parameters, cap is {MAX_PARAMETERS}")

    def parameters(self) -> dict:
        out = {}
        for name, block in self.blocks.items():
            for k, v in block.params.items():
                out[f"{name}.{k}"] = v
        for k, v in self.gate.params.items():
            out[f"gate.{k}"] = v
        out.update(self.own_params)
        return out

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def block_predictions(self, x, sigma=None, log_volume=None,
                          training: bool = False,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-block head outputs, shape (B, n_blocks).

        Each column is the affine head applied to that block's residual path
        at the last time step.
        """
        xt, squeezed = _ensure_batched(x)
        b, t_len, _ = xt.shape
        sig = self._aux(sigma, b, t_len, default=0.0)
        lv = self._aux(log_volume, b, t_len, default=0.0)

        proj = T.matmul(xt, self.own_params["w_in"])
        alpha = T.sigmoid(self.own_params["alpha_raw"])
        cols = []
        for i, name in enumerate(self.block_names):
            block = self.blocks[name]
            if name == "volatility":
                out = block.forward(xt, sig, lv)
            else:
                out = block.forward(xt)
            if training and self.cfg.dropout > 0.0:
                if rng is None:
                    raise ValueError("training forward needs an rng for dropout")
                out = T.dropout(out, self.cfg.dropout, rng, training=True)
            a_i = T.tslice(alpha, (slice(i, i + 1),))
            path = proj + a_i * out
            last = T.tslice(path, (slice(None), t_len - 1, slice(None)))
            w_i = T.tslice(self.own_params["w_head"],
                           (slice(None), slice(i, i + 1)))
            b_i = T.tslice(self.own_params["b_head"], (slice(i, i + 1),))
            pred = T.matmul(last, w_i) + b_i
            cols.append(pred)
        preds = T.concat(cols, axis=-1)
        return preds

    def forward(self, x, p, sigma=None, log_volume=None,
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Blend per-block predictions with gate weights from p. Returns (B,)."""
        xt, squeezed = _ensure_batched(x)
        pt = p if isinstance(p, Tensor) else Tensor(p)
        if pt.ndim == 1:
            pt = T.reshape(pt, (1,) + pt.shape)
        preds = self.block_predictions(xt, sigma, log_volume, training, rng)
        g = self.gate.forward(pt)
        y = T.tsum(g * preds, axis=-1)
        return T.tslice(y, (0,)) if squeezed else y

    def static_forward(self, x, sigma=None, log_volume=None,
                       training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        """Uniform-weight blend; the regime trace has no influence at all."""
        xt, squeezed = _ensure_batched(x)
        preds = self.block_predictions(xt, sigma, log_volume, training, rng)
        y = T.mean(preds, axis=-1)
        return T.tslice(y, (0,)) if squeezed else y

    def stability_bound(self, max_block_output: float) -> float:
        """sqrt(n_blocks) * L_G * B bound on |f(x|p) - f(x|p')| / ||p - p'||."""
        return math.sqrt(len(self.block_names)) * self.gate.lipschitz_bound() \
            * max_block_output

    def _aux(self, arr, b, t_len, default: float):
        if arr is None:
            return Tensor(np.full((b, t_len), default))
        t = arr if isinstance(arr, Tensor) else Tensor(arr)
        if t.ndim == 1:
            t = T.reshape(t, (1,) + t.shape)
        if t.shape != (b, t_len):
            raise ShapeError(f"aux input shape {t.shape}, expected {(b, t_len)}")
        return t
