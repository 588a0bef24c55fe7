"""Multi-head self-attention regime detector.

A window of engineered features is projected to queries/keys/values, attended
per head with a learned additive positional bias, pooled at the last time
step, and classified into regime probabilities.  Head disagreement — each
head classified separately through one shared linear map — yields a bounded
uncertainty score used downstream to widen exploration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import GradTape, ShapeError, Tensor


@dataclass
class AttentionConfig:
    heads: int = 4
    d_k: int = 64          # key dim; value dim is tied to it
    n_regimes: int = 3
    t_window: int = 32
    bias_mode: str = "learned"   # "learned" T x T additive bias, or "none"

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.d_k < 1:
            raise ValueError("d_k must be >= 1")
        if self.n_regimes < 2:
            raise ValueError("need at least 2 regimes")
        if self.d_k % self.heads != 0:
            raise ValueError(f"d_k={self.d_k} not divisible by heads={self.heads}")
        if self.bias_mode not in ("learned", "none"):
            raise ValueError(f"unknown bias_mode {self.bias_mode!r}")


@dataclass
class RegimeOutput:
    """Plain-value view of one forward pass (batch dimension preserved)."""

    p: np.ndarray            # (..., N_r) regime probabilities
    per_head_p: np.ndarray   # (..., H, N_r)
    uncertainty: np.ndarray  # (...) scalar per window, in [0, 1]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def head_uncertainty(per_head_p: np.ndarray, tol: float = 1e-6) -> float:
    """Disagreement score over per-head regime distributions, in [0, 1].

    Blend of two signals, equally weighted: the mean across heads of each
    head's entropy normalized by ln(N_r), and the across-head variance of
    each probability coordinate averaged over coordinates and normalized by
    its maximum 0.25.  Identical one-hot rows give 0; uniform rows give 0.5
    (maximal entropy, zero disagreement).
    """
    p = np.asarray(per_head_p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"expected H x N_r matrix, got shape {p.shape}")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError("per-head rows must be probability distributions")
    h, n_r = p.shape
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=1) / math.log(n_r)
    var_term = p.var(axis=0).mean() / 0.25
    u = 0.5 * entropy.mean() + 0.5 * var_term
    return float(np.clip(u, 0.0, 1.0))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, m: Optional[Tensor],
                     scale: float) -> Tensor:
    """softmax(q kᵀ / scale + m) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key dims disagree: {q.shape} vs {k.shape}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.matmul(q, T.transpose(k, axes)) * Tensor(1.0 / scale)
    if m is not None:
        scores = scores + m
    return T.matmul(T.softmax(scores, axis=-1), v)


class RegimeDetector:
    """Attention classifier over feature windows.

    Parameters live in ``self.params`` (name -> Tensor, requires_grad=True).
    The projections carry no bias terms; the positional bias M starts at
    zero; the final classifier starts at Glorot scale.
    """

    def __init__(self, config: AttentionConfig, n_features: int, seed: int = 0):
        self.config = config
        self.n_features = n_features
        self.d_head = config.d_k // config.heads
        rng = np.random.default_rng([seed, 101])
        d_k, n_r = config.d_k, config.n_regimes
        params = {
            "w_q": _glorot(rng, n_features, d_k),
            "w_k": _glorot(rng, n_features, d_k),
            "w_v": _glorot(rng, n_features, d_k),
            "w_o": _glorot(rng, d_k, d_k),
            "w_cls": _glorot(rng, d_k, n_r),
            "b_cls": np.zeros(n_r),
            "w_head": _glorot(rng, self.d_head, n_r),
            "b_head": np.zeros(n_r),
        }
        if config.bias_mode == "learned":
            params["m_bias"] = np.zeros((config.t_window, config.t_window))
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}

    # -- pieces ------------------------------------------------------------

    def project_qkv(self, x: Tensor):
        """Linear projections Q = XW_Q, K = XW_K, V = XW_V (no biases)."""
        if x.shape[-1] != self.n_features:
            raise ShapeError(
                f"expected {self.n_features} features, got {x.shape[-1]}")
        return (T.matmul(x, self.params["w_q"]),
                T.matmul(x, self.params["w_k"]),
                T.matmul(x, self.params["w_v"]))

    def attention_head(self, q_h: Tensor, k_h: Tensor, v_h: Tensor,
                       m: Optional[Tensor]) -> Tensor:
        """One head of scaled dot-product attention; scale is the full d_k."""
        return scaled_attention(q_h, k_h, v_h, m, math.sqrt(self.config.d_k))

    def _bias(self) -> Optional[Tensor]:
        return self.params.get("m_bias")

    # -- full forward --------------------------------------------------------

    def forward_tensors(self, x: Tensor):
        """Differentiable forward pass.

        ``x`` is (T, F) or (B, T, F).  Returns ``(p, per_head_p, pooled)``
        with the same leading batch shape; gradients flow to every parameter.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, t, _ = x.shape
        if t != self.config.t_window:
            raise ShapeError(
                f"window length {t} != configured {self.config.t_window}")
        q, k, v = self.project_qkv(x)
        m = self._bias()
        heads = []
        pooled_heads = []
        dh = self.d_head
        for h in range(self.config.heads):
            key = (Ellipsis, slice(h * dh, (h + 1) * dh))
            out = self.attention_head(T.tslice(q, key), T.tslice(k, key),
                                      T.tslice(v, key), m)
            heads.append(out)
            pooled_heads.append(T.tslice(out, (slice(None), t - 1, slice(None))))
        attended = T.matmul(T.concat(heads, axis=-1), self.params["w_o"])
        pooled = T.tslice(attended, (slice(None), t - 1, slice(None)))
        logits = T.matmul(pooled, self.params["w_cls"]) + self.params["b_cls"]
        p = T.softmax(logits, axis=-1)

        n_r = self.config.n_regimes
        per_head = []
        for ph in pooled_heads:
            hl = T.matmul(ph, self.params["w_head"]) + self.params["b_head"]
            per_head.append(T.reshape(T.softmax(hl, axis=-1), (b, 1, n_r)))
        per_head_p = T.concat(per_head, axis=1)

        if squeeze:
            p = T.reshape(p, (n_r,))
            per_head_p = T.reshape(per_head_p, (self.config.heads, n_r))
            pooled = T.reshape(pooled, (self.config.d_k,))
        return p, per_head_p, pooled

    def regime_forward(self, x) -> RegimeOutput:
        """Value-level forward: probabilities plus head-disagreement score."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        p, per_head_p, _ = self.forward_tensors(xt)
        php = per_head_p.data
        if php.ndim == 2:
            unc = np.asarray(head_uncertainty(php))
        else:
            unc = np.array([head_uncertainty(row) for row in php])
        return RegimeOutput(p=p.data.copy(), per_head_p=php.copy(),
                            uncertainty=unc)

    def parameters(self) -> dict:
        return self.params
