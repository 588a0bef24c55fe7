"""Training objective: prediction error plus market-shaped penalty terms.

The total loss is a weighted sum of four non-negative components:

* ``loss_pred``   -- mean squared error of the point predictions,
* ``loss_vol``    -- absolute gap between predicted and realized variance
  over a recent window, so the model cannot win by collapsing to the mean,
* ``loss_reg``    -- mean squared difference of consecutive outputs,
  penalizing jittery prediction paths,
* ``loss_stable`` -- hinge-squared excess of each 2-D weight's spectral norm
  over a target, keeping per-layer Lipschitz constants under control without
  a second backward pass.

Every component accepts either plain numpy arrays (returning a float) or
``Tensor`` values (returning a scalar ``Tensor`` recorded on the active
tape), so the same code path serves evaluation logging and training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "VOL_WINDOW",
    "LossWeights",
    "LossBreakdown",
    "Batch",
    "loss_pred",
    "loss_vol",
    "loss_reg",
    "loss_stable",
    "windowed_vol",
    "total_loss",
    "total_loss_tensors",
]

# Window length for the variance-matching term; the batch is cut into
# non-overlapping chunks of this many consecutive predictions.
VOL_WINDOW = 20


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the four loss components."""

    w_p: float = 1.0
    w_v: float = 0.1
    w_r: float = 0.05
    w_s: float = 0.01

    def __post_init__(self):
        for name in ("w_p", "w_v", "w_r", "w_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-component values of one objective evaluation.

    ``total`` is the exact weighted sum of the components in field order;
    the regime multiplier on the smoothness term, if any, is already folded
    into ``reg`` so the reconstruction identity always holds.
    """

    pred: float
    vol: float
    reg: float
    stable: float
    total: float


@dataclass
class Batch:
    """One contiguous, time-ordered slice of windowed training data.

    ``x`` holds feature windows (B, T, F), ``y`` the scalar targets (B,),
    ``p`` regime probabilities per window (B, n_regimes).  ``sigma`` and
    ``log_volume`` are optional raw side-channels (B, T) consumed by the
    volatility block.
    """

    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sigma: Optional[np.ndarray] = None
    log_volume: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]


def _as_value(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)


def loss_pred(y, y_hat):
    """Mean squared prediction error.

    Float in, float out; ``Tensor`` predictions give a scalar ``Tensor``.
    """
    yv = _as_value(y)
    if yv.size == 0:
        raise ValueError("empty batch")
    if isinstance(y_hat, Tensor):
        if y_hat.shape != yv.shape:
            raise ShapeError(f"target {yv.shape} vs prediction {y_hat.shape}")
        d = y_hat - yv
        return T.mean(d * d)
    fv = np.asarray(y_hat, dtype=np.float64)
    if fv.shape != yv.shape:
        raise ShapeError(f"target {yv.shape} vs prediction {fv.shape}")
    return float(np.mean((yv - fv) ** 2))


def loss_vol(y_window, y_hat_window):
    """|Var(predictions) - Var(targets)| over one window, population variance."""
    yv = _as_value(y_window)
    if yv.size < 2:
        raise ValueError(f"volatility window needs >= 2 points, got {yv.size}")
    target_var = float(np.var(yv))
    if isinstance(y_hat_window, Tensor):
        if y_hat_window.size != yv.size:
            raise ShapeError("window lengths differ")
        return T.absolute(T.variance(y_hat_window) - target_var)
    fv = np.asarray(y_hat_window, dtype=np.float64)
    if fv.size != yv.size:
        raise ShapeError("window lengths differ")
    return float(abs(np.var(fv) - target_var))


def loss_reg(y_hat):
    """Mean squared difference of consecutive outputs along axis 0.

    For vector-valued outputs the squared Euclidean norm of each step
    difference is used; scalars reduce to plain squared diffs.
    """
    if isinstance(y_hat, Tensor):
        n = y_hat.shape[0]
        if n < 2:
            raise ValueError("need >= 2 consecutive outputs")
        d = T.tslice(y_hat, slice(1, None)) - T.tslice(y_hat, slice(0, -1))
        if d.ndim > 1:
            d2 = T.reshape(d, (n - 1, -1))
            return T.mean(T.tsum(d2 * d2, axis=1))
        return T.mean(d * d)
    fv = np.asarray(y_hat, dtype=np.float64)
    if fv.shape[0] < 2:
        raise ValueError("need >= 2 consecutive outputs")
    d = np.diff(fv, axis=0)
    if d.ndim > 1:
        d = d.reshape(d.shape[0], -1)
        return float(np.mean(np.sum(d * d, axis=1)))
    return float(np.mean(d * d))


def _weight_matrices(model) -> list:
    """Collect the 2-D weights of ``model`` (anything with ``.parameters()``,
    a name->value mapping, or a plain iterable of arrays/tensors)."""
    if hasattr(model, "parameters"):
        values = model.parameters().values()
    elif isinstance(model, dict):
        values = model.values()
    else:
        values = list(model)
    out = []
    for w in values:
        ndim = w.ndim if isinstance(w, Tensor) else np.ndim(w)
        if ndim == 2:
            out.append(w)
    return out


def loss_stable(model, l_target: float = 1.0, iters: int = 50,
                tol: float = 1e-6):
    """Sum of squared spectral-norm excesses over ``l_target``.

    Layers already inside the target contribute exactly zero, so a
    well-normalized model pays nothing.  Gradients flow through the
    power-iteration estimate via its converged singular vectors.
    """
    weights = _weight_matrices(model)
    tensor_terms = []
    flat = 0.0
    for w in weights:
        if isinstance(w, Tensor):
            excess = T.relu(T.spectral_norm(w, iters=iters, tol=tol) - l_target)
            tensor_terms.append(excess * excess)
        else:
            sigma = T.spectral_norm(np.asarray(w, dtype=np.float64),
                                    iters=iters, tol=tol)
            flat += max(0.0, sigma - l_target) ** 2
    if not tensor_terms:
        return flat
    acc = tensor_terms[0]
    for term in tensor_terms[1:]:
        acc = acc + term
    return acc + flat if flat else acc


def windowed_vol(y, y_hat, window: int = VOL_WINDOW):
    """Average ``loss_vol`` over non-overlapping windows of the batch.

    A batch shorter than ``window`` is treated as a single window; a
    trailing remainder shorter than ``window`` is dropped.
    """
    yv = _as_value(y)
    n = yv.shape[0]
    if n < window:
        spans = [(0, n)]
    else:
        spans = [(i * window, (i + 1) * window) for i in range(n // window)]
    tensor_mode = isinstance(y_hat, Tensor)
    terms = []
    for a, b in spans:
        fw = T.tslice(y_hat, slice(a, b)) if tensor_mode else y_hat[a:b]
        terms.append(loss_vol(yv[a:b], fw))
    if tensor_mode:
        acc = terms[0]
        for term in terms[1:]:
            acc = acc + term
        return acc * (1.0 / len(terms))
    return float(np.mean(terms))


def total_loss_tensors(batch: Batch, model, weights: LossWeights,
                       l_target: float = 1.0, training: bool = False,
                       rng=None, regime_reg_scale=None,
                       sn_iters: int = 50, sn_tol: float = 1e-6):
    """Build the differentiable objective for one batch.

    Returns ``(root, breakdown)`` where ``root`` is the scalar ``Tensor``
    to backpropagate and ``breakdown`` records the component floats.
    ``regime_reg_scale``, if given, is a per-regime multiplier vector for
    the smoothness term; the batch-mean regime probabilities select the
    effective scale, which is folded into the reported ``reg`` component.

    Components with a zero weight are skipped and reported as 0.0 — they
    are not part of the objective, and the spectral term in particular is
    not free to evaluate.
    """
    y_hat = model.forward(batch.x, batch.p, sigma=batch.sigma,
                          log_volume=batch.log_volume, training=training,
                          rng=rng)
    pred = loss_pred(batch.y, y_hat)
    zero = Tensor(0.0)
    vol = windowed_vol(batch.y, y_hat) if weights.w_v > 0 else zero
    if weights.w_r > 0:
        reg = loss_reg(y_hat)
        if regime_reg_scale is not None:
            scale = float(np.mean(batch.p, axis=0)
                          @ np.asarray(regime_reg_scale, dtype=np.float64))
            reg = reg * scale
    else:
        reg = zero
    if weights.w_s > 0:
        stable = loss_stable(model, l_target=l_target, iters=sn_iters,
                             tol=sn_tol)
        if not isinstance(stable, Tensor):
            stable = Tensor(stable)
    else:
        stable = zero
    root = (pred * weights.w_p + vol * weights.w_v + reg * weights.w_r
            + stable * weights.w_s)
    breakdown = LossBreakdown(
        pred=float(pred.data), vol=float(vol.data), reg=float(reg.data),
        stable=float(stable.data), total=float(root.data))
    return root, breakdown


def total_loss(batch: Batch, model, weights: Optional[LossWeights] = None,
               l_target: float = 1.0, regime_reg_scale=None,
               sn_iters: int = 50, sn_tol: float = 1e-6) -> LossBreakdown:
    """Evaluate the four-term objective on a batch (no gradients)."""
    if weights is None:
        weights = LossWeights()
    _, breakdown = total_loss_tensors(batch, model, weights,
                                      l_target=l_target,
                                      regime_reg_scale=regime_reg_scale,
                                      sn_iters=sn_iters, sn_tol=sn_tol)
    return breakdown
