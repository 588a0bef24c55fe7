"""Single-candidate training loop.

The pieces, in the order a training step uses them:

* windowing         -- :func:`build_windows` turns a feature panel into
  fixed-length lookback windows with next-step targets; windows only ever
  look backward, so any split's windows are safe to build from the full
  row range.
* regime trace      -- :func:`pretrain_detector` fits the attention
  detector once per run on the train split's rule-based labels, and
  :func:`attach_regime_outputs` caches its probabilities and disagreement
  scores for every window, so candidate training never re-runs attention.
* optimizer         -- decoupled-weight-decay adaptive moments
  (:func:`step_optimizer`) under a per-step cosine schedule
  (:func:`cosine_lr`).
* safety rails      -- global-norm gradient clipping with a threshold that
  tightens in volatile/high-volatility batches (:func:`clip_gradients`,
  :func:`tau_threshold`) and a hard spectral projection of every weight
  matrix after each step (:func:`apply_spectral_normalization`), with
  power-iteration vectors persisted across steps.
* stopping          -- :class:`EarlyStopper`, patience over best validation
  total loss with a strict improvement margin.

``train_candidate`` wires these together and emits a :class:`TrainReport`;
``evaluate`` produces MAE/RMSE/R2 and per-regime MAE on any split.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .blocks import BlendedModel, BlockConfig
from .data import REGIMES, FeaturePanel
from .losses import Batch, LossBreakdown, LossWeights, total_loss_tensors
from .regime import AttentionConfig, RegimeDetector
from .tensor import GradTape, NumericError, Tensor
from . import tensor as T

__all__ = [
    "TrainConfig",
    "TrainReport",
    "WindowDataset",
    "build_windows",
    "attach_regime_outputs",
    "pretrain_detector",
    "cosine_lr",
    "AdamWState",
    "step_optimizer",
    "global_norm",
    "clip_gradients",
    "tau_threshold",
    "SpectralState",
    "apply_spectral_normalization",
    "EarlyStopper",
    "StaticGateView",
    "train_candidate",
    "train_gru_baseline",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

_HIGHVOL = REGIMES.index("HighVolatility")


@dataclass
class TrainConfig:
    """Knobs for one candidate's training run.

    ``batch_size`` defaults to the desk-scale 64; 256 is the documented
    large-corpus setting.  ``clip_*`` set the adaptive threshold
    tau0 / (1 + c_sigma*sigma_t + c_regime*p_highvol).
    """

    lr0: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    min_delta: float = 1e-9
    clip_base: float = 1.0
    clip_sigma_coef: float = 1.0
    clip_regime_coef: float = 1.0
    l_target: float = 1.0
    l_target_highvol: float = 0.8
    highvol_threshold: float = 0.5
    t_window: int = 32
    stride: int = 1
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    spectral_projection: bool = True
    adaptive_clip: bool = True
    adaptive_l_target: bool = True
    static_gate: bool = False
    sn_iters: int = 5            # warm-started projection iterations per step

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.clip_base <= 0:
            raise ValueError("clip threshold must be positive")
        if self.t_window < 2 or self.stride < 1:
            raise ValueError("bad windowing")


@dataclass
class TrainReport:
    """Everything the search loop needs to know about one training run.

    ``score`` is the negative best validation total loss (higher is
    better), the quantity the surrogate model is fit to.  ``model`` is the
    trained instance itself — transient, dropped by :meth:`to_json_dict`.
    """

    epochs_run: int = 0
    best_epoch: int = 0
    early_stopped: bool = False
    train_history: list = field(default_factory=list)   # LossBreakdown/epoch
    val_history: list = field(default_factory=list)     # LossBreakdown/epoch
    best_val_total: float = math.inf
    score: float = math.nan
    metrics: dict = field(default_factory=dict)
    mean_val_uncertainty: float = 0.0
    wall_time: float = 0.0
    n_parameters: int = 0
    failed: bool = False
    fail_reason: str = ""
    model: object = None

    def to_json_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "model"}
        out["train_history"] = [asdict(b) for b in self.train_history]
        out["val_history"] = [asdict(b) for b in self.val_history]
        return out


# ---------------------------------------------------------------------------
# windowing and the cached regime trace
# ---------------------------------------------------------------------------

@dataclass
class WindowDataset:
    """Sliding lookback windows over a feature panel.

    Row ``i`` covers panel rows ``end_row[i]-T+1 .. end_row[i]`` and carries
    that end row's next-step target, split tag and regime label.  ``p`` and
    ``uncertainty`` stay ``None`` until a detector pass fills them.
    """

    x: np.ndarray                 # (N, T, F)
    y: np.ndarray                 # (N,)
    sigma: np.ndarray             # (N, T)
    log_volume: np.ndarray        # (N, T)
    split: np.ndarray             # (N,) str
    regime_label: np.ndarray      # (N,) str
    end_row: np.ndarray           # (N,) int
    p: Optional[np.ndarray] = None
    uncertainty: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def t_window(self) -> int:
        return self.x.shape[1]

    @property
    def n_features(self) -> int:
        return self.x.shape[2]

    def indices(self, split_name: str) -> np.ndarray:
        return np.where(self.split == split_name)[0]


def build_windows(panel: FeaturePanel, t_window: int = 32,
                  stride: int = 1) -> WindowDataset:
    """Cut the panel into lookback windows ending at every ``stride``-th row."""
    n = panel.X.shape[0]
    if n < t_window:
        raise ValueError(f"panel has {n} rows, window needs {t_window}")
    ends = np.arange(t_window - 1, n, stride)
    # sliding_window_view yields (n-T+1, F, T); move time back to the middle
    slid = np.lib.stride_tricks.sliding_window_view(panel.X, t_window, axis=0)
    x = np.ascontiguousarray(slid[ends - (t_window - 1)].transpose(0, 2, 1))
    sigma = panel.sigma if panel.sigma is not None else np.zeros(n)
    logv = panel.log_volume if panel.log_volume is not None else np.zeros(n)
    sig_w = np.lib.stride_tricks.sliding_window_view(sigma, t_window, axis=0)
    vol_w = np.lib.stride_tricks.sliding_window_view(logv, t_window, axis=0)
    sel = ends - (t_window - 1)
    return WindowDataset(
        x=x,
        y=panel.target[ends].copy(),
        sigma=np.ascontiguousarray(sig_w[sel]),
        log_volume=np.ascontiguousarray(vol_w[sel]),
        split=panel.split[ends].copy(),
        regime_label=panel.regime_label[ends].copy(),
        end_row=ends,
    )


def attach_regime_outputs(ds: WindowDataset, detector: RegimeDetector,
                          chunk: int = 512) -> WindowDataset:
    """Cache detector probabilities and disagreement per window, in place."""
    n = len(ds)
    p = np.empty((n, detector.config.n_regimes))
    unc = np.empty(n)
    for a in range(0, n, chunk):
        out = detector.regime_forward(ds.x[a:a + chunk])
        p[a:a + chunk] = out.p
        unc[a:a + chunk] = np.atleast_1d(out.uncertainty)
    ds.p = p
    ds.uncertainty = unc
    return ds


def pretrain_detector(ds: WindowDataset, seed: int = 0, epochs: int = 2,
                      lr: float = 3e-3, batch_size: int = 128,
                      sample_stride: int = 2,
                      config: Optional[AttentionConfig] = None) -> RegimeDetector:
    """Fit the attention detector to the train split's rule-based labels.

    Cross-entropy on every ``sample_stride``-th training window is plenty:
    the detector only has to reproduce an indicator rule, not forecast.
    """
    cfg = config or AttentionConfig(t_window=ds.t_window)
    det = RegimeDetector(cfg, n_features=ds.n_features, seed=seed)
    idx = ds.indices("train")[::sample_stride]
    labels = np.array([REGIMES.index(r) for r in ds.regime_label[idx]])
    onehot = np.eye(len(REGIMES))[labels]

    params = det.parameters()
    state = AdamWState(params)
    n_batches = max(1, idx.size // batch_size)
    t_total = epochs * n_batches
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 811, epoch]).permutation(idx.size)
        for b in range(n_batches):
            take = order[b * batch_size:(b + 1) * batch_size]
            with GradTape() as tape:
                p, _, _ = det.forward_tensors(Tensor(ds.x[idx[take]]))
                picked = T.tsum(T.log(p + 1e-12) * onehot[take], axis=-1)
                ce = -T.mean(picked)
            tape.backward(ce)
            grads = _collect_grads(params)
            clip_gradients(grads, 1.0)
            step_optimizer(params, grads, state,
                           cosine_lr(lr, state.t, t_total))
            _zero_grads(params)
    return det


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(lr0: float, t: int, t_total: int) -> float:
    """Cosine annealing from lr0 at t=0 to exactly 0 at t=t_total."""
    if t_total <= 0:
        return lr0
    frac = min(max(t, 0), t_total) / t_total
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0


def step_optimizer(params: dict, grads: dict, state: AdamWState, lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One decoupled-weight-decay adaptive-moment update, in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= lr * update + lr * weight_decay * p.data
    return params


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: dict, tau: float) -> float:
    """Scale the whole gradient vector to norm <= tau. Returns the pre-clip norm."""
    if tau <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > tau:
        scale = tau / norm
        for g in grads.values():
            if g is not None:
                g *= scale
    return norm


def tau_threshold(cfg: TrainConfig, sigma_t: float, p_highvol: float) -> float:
    """Clipping threshold, tightened when the batch is volatile."""
    if not cfg.adaptive_clip:
        return cfg.clip_base
    return cfg.clip_base / (1.0 + cfg.clip_sigma_coef * sigma_t
                            + cfg.clip_regime_coef * p_highvol)


# ---------------------------------------------------------------------------
# spectral projection
# ---------------------------------------------------------------------------

class SpectralState:
    """Per-layer power-iteration vectors carried across steps."""

    def __init__(self):
        self.vectors: dict = {}


def apply_spectral_normalization(model, l_target: float,
                                 state: Optional[SpectralState] = None,
                                 iters: int = 5, tol: float = 1e-9):
    """Divide each weight matrix by max(1, sigma/l_target), in place.

    With ``state`` given, the previous right singular vector warm-starts
    each estimate, so a handful of iterations per step tracks the slowly
    moving spectrum; the first visit uses a full 50-iteration pass.
    """
    for name, p in model.parameters().items():
        if p.ndim != 2:
            continue
        v0 = state.vectors.get(name) if state is not None else None
        budget = iters if v0 is not None else max(iters, 50)
        sigma, _, v, _ = T.power_iteration(p.data, iters=budget, tol=tol,
                                           v0=v0)
        if state is not None:
            state.vectors[name] = v
        if sigma > l_target:
            p.data /= sigma / l_target
    return model


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a real improvement.

    An improvement must beat the best seen value by more than ``min_delta``;
    equal-to-best epochs count toward the patience budget.
    """

    def __init__(self, patience: int, min_delta: float = 1e-9):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.counter = 0
        self.stopped = False

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.stopped = True
        return self.stopped


# ---------------------------------------------------------------------------
# the candidate loop
# ---------------------------------------------------------------------------

class StaticGateView:
    """Forward adapter that ignores regime probabilities entirely."""

    def __init__(self, model: BlendedModel):
        self.model = model

    def forward(self, x, p, sigma=None, log_volume=None, training=False,
                rng=None):
        return self.model.static_forward(x, sigma=sigma,
                                         log_volume=log_volume,
                                         training=training, rng=rng)

    def parameters(self) -> dict:
        return self.model.parameters()


def _collect_grads(params: dict) -> dict:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def _zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def _contiguous_chunks(idx: np.ndarray, size: int) -> list:
    """Split sorted indices into time-ordered chunks, dropping tails < 2."""
    chunks = [idx[a:a + size] for a in range(0, idx.size, size)]
    return [c for c in chunks if c.size >= 2]


def _make_batch(ds: WindowDataset, idx: np.ndarray) -> Batch:
    return Batch(x=ds.x[idx], y=ds.y[idx],
                 p=ds.p[idx] if ds.p is not None else None,
                 sigma=ds.sigma[idx], log_volume=ds.log_volume[idx])


def _mean_breakdown(parts: list, counts: list, w: LossWeights) -> LossBreakdown:
    """Size-weighted mean of per-chunk breakdowns, total recomposed exactly."""
    total_n = float(sum(counts))
    acc = {"pred": 0.0, "vol": 0.0, "reg": 0.0, "stable": 0.0}
    for bd, n in zip(parts, counts):
        for key in acc:
            acc[key] += getattr(bd, key) * (n / total_n)
    total = (w.w_p * acc["pred"] + w.w_v * acc["vol"] + w.w_r * acc["reg"]
             + w.w_s * acc["stable"])
    return LossBreakdown(pred=acc["pred"], vol=acc["vol"], reg=acc["reg"],
                         stable=acc["stable"], total=total)


def _split_loss(fmodel, ds: WindowDataset, idx: np.ndarray,
                cfg: TrainConfig) -> LossBreakdown:
    parts, counts = [], []
    for chunk in _contiguous_chunks(idx, cfg.batch_size):
        _, bd = total_loss_tensors(_make_batch(ds, chunk), fmodel,
                                   cfg.loss_weights, l_target=cfg.l_target)
        parts.append(bd)
        counts.append(chunk.size)
    return _mean_breakdown(parts, counts, cfg.loss_weights)


def _resolve_block_config(arch) -> BlockConfig:
    if isinstance(arch, BlockConfig):
        return arch
    if hasattr(arch, "block_config"):
        return arch.block_config()
    raise TypeError(f"cannot interpret {type(arch).__name__} as an architecture")


def train_candidate(arch, data, cfg: TrainConfig,
                    detector: Optional[RegimeDetector] = None) -> TrainReport:
    """Train one architecture and report its validation performance.

    ``data`` is a FeaturePanel or a prebuilt :class:`WindowDataset`; when
    the dataset has no cached regime trace, a detector is pretrained here
    (or the given one is used) and its outputs are attached first.  The
    best-validation weights are restored before the final metrics pass.
    """
    started = time.perf_counter()
    ds = data if isinstance(data, WindowDataset) else \
        build_windows(data, cfg.t_window, cfg.stride)
    if ds.p is None:
        if detector is None:
            detector = pretrain_detector(ds, seed=cfg.seed)
        attach_regime_outputs(ds, detector)

    block_cfg = _resolve_block_config(arch)
    report = TrainReport()
    try:
        model = BlendedModel(block_cfg, n_features=ds.n_features,
                             seed=cfg.seed)
    except ValueError as exc:
        report.failed = True
        report.fail_reason = f"rejected: {exc}"
        report.wall_time = time.perf_counter() - started
        return report
    report.n_parameters = model.n_parameters()

    fmodel = StaticGateView(model) if cfg.static_gate else model
    params = model.parameters()
    train_idx = ds.indices("train")
    val_idx = ds.indices("val")
    if train_idx.size < 2 or val_idx.size < 2:
        raise ValueError("train/val splits too small to window")
    chunks = _contiguous_chunks(train_idx, cfg.batch_size)
    t_total = cfg.max_epochs * len(chunks)
    state = AdamWState(params)
    spec_state = SpectralState()
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
    dropout_rng = np.random.default_rng([cfg.seed, 409])
    use_dropout = block_cfg.dropout > 0.0
    best_snapshot = None

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, 303, epoch]) \
            .permutation(len(chunks))
        parts, counts = [], []
        for ci in order:
            chunk = chunks[ci]
            batch = _make_batch(ds, chunk)
            p_hv = float(np.mean(batch.p[:, _HIGHVOL])) \
                if batch.p is not None else 0.0
            l_target = cfg.l_target
            if cfg.adaptive_l_target and p_hv > cfg.highvol_threshold:
                l_target = cfg.l_target_highvol
            try:
                with GradTape() as tape:
                    root, bd = total_loss_tensors(
                        batch, fmodel, cfg.loss_weights, l_target=l_target,
                        training=use_dropout,
                        rng=dropout_rng if use_dropout else None)
                if not math.isfinite(bd.total):
                    raise NumericError("non-finite loss")
                tape.backward(root)
                grads = _collect_grads(params)
                tau = tau_threshold(cfg, float(np.mean(batch.sigma)), p_hv)
                clip_gradients(grads, tau)
                if any(not np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericError("non-finite gradient after clipping")
            except NumericError as exc:
                report.failed = True
                report.fail_reason = str(exc)
                report.epochs_run = epoch
                report.wall_time = time.perf_counter() - started
                report.model = model
                return report
            step_optimizer(params, grads, state,
                           cosine_lr(cfg.lr0, state.t, t_total),
                           cfg.weight_decay)
            _zero_grads(params)
            if cfg.spectral_projection:
                apply_spectral_normalization(model, l_target, spec_state,
                                             iters=cfg.sn_iters)
            parts.append(bd)
            counts.append(chunk.size)

        report.train_history.append(
            _mean_breakdown(parts, counts, cfg.loss_weights))
        val_bd = _split_loss(fmodel, ds, val_idx, cfg)
        report.val_history.append(val_bd)
        report.epochs_run = epoch
        stop = stopper.update(val_bd.total, epoch)
        if stopper.best_epoch == epoch:
            report.best_val_total = val_bd.total
            best_snapshot = {k: p.data.copy() for k, p in params.items()}
        if stop:
            report.early_stopped = True
            break

    report.best_epoch = stopper.best_epoch
    if best_snapshot is not None:
        for k, p in params.items():
            p.data[...] = best_snapshot[k]
    report.score = -report.best_val_total
    report.metrics = evaluate(model, ds, "val", weights=cfg.loss_weights,
                              static_gate=cfg.static_gate,
                              l_target=cfg.l_target,
                              batch_size=cfg.batch_size)
    if ds.uncertainty is not None and val_idx.size:
        report.mean_val_uncertainty = float(np.mean(ds.uncertainty[val_idx]))
    report.wall_time = time.perf_counter() - started
    report.model = model
    return report


def train_gru_baseline(data, seed: int = 0,
                       cfg: Optional[TrainConfig] = None) -> TrainReport:
    """Plain two-layer 128-wide recurrent baseline, prediction loss only.

    No regime gating (single block, uniform blend), no volatility coupling,
    no volume skip, no spectral projection, fixed clipping threshold.
    """
    arch = BlockConfig(cell_type="GRU", hidden_sizes=(128, 128),
                       use_volatility=True, use_trend=False, use_range=False,
                       volume_skip=False, vol_coupling_init=0.0,
                       leak_base=0.0)
    if cfg is None:
        cfg = TrainConfig(seed=seed)
    base = TrainConfig(**{
        **cfg.__dict__,
        "loss_weights": LossWeights(1.0, 0.0, 0.0, 0.0),
        "spectral_projection": False,
        "adaptive_clip": False,
        "adaptive_l_target": False,
        "static_gate": True,
        "seed": seed,
    })
    return train_candidate(arch, data, base)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _forward_values(model, ds: WindowDataset, idx: np.ndarray,
                    static_gate: bool, batch_size: int) -> np.ndarray:
    out = np.empty(idx.size)
    for a in range(0, idx.size, batch_size):
        take = idx[a:a + batch_size]
        if static_gate:
            y = model.static_forward(ds.x[take], sigma=ds.sigma[take],
                                     log_volume=ds.log_volume[take])
        else:
            y = model.forward(ds.x[take], ds.p[take], sigma=ds.sigma[take],
                              log_volume=ds.log_volume[take])
        out[a:a + take.size] = y.data
    return out


def evaluate(model: BlendedModel, ds: WindowDataset, split: str,
             weights: Optional[LossWeights] = None, static_gate: bool = False,
             l_target: float = 1.0, batch_size: int = 256) -> dict:
    """MAE/RMSE/R2, per-regime MAE and the loss breakdown on one split."""
    idx = ds.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} has no windows")
    weights = weights or LossWeights()
    y = ds.y[idx]
    y_hat = _forward_values(model, ds, idx, static_gate, batch_size)
    err = y_hat - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err ** 2)))
    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum(err ** 2))
    # a constant target leaves only rounding dust in sst; don't divide by it
    noise_floor = idx.size * (1e-14 * max(1.0, float(np.max(np.abs(y))))) ** 2
    if sst > noise_floor:
        r2 = 1.0 - sse / sst
    else:
        r2 = 1.0 if sse <= noise_floor else 0.0
    per_regime = {}
    for regime in REGIMES:
        mask = ds.regime_label[idx] == regime
        if np.any(mask):
            per_regime[regime] = float(np.mean(np.abs(err[mask])))
    eval_cfg = TrainConfig(batch_size=max(batch_size, 2), l_target=l_target,
                           loss_weights=weights)
    fmodel = StaticGateView(model) if static_gate else model
    breakdown = _split_loss(fmodel, ds, idx, eval_cfg)
    return {"mae": mae, "rmse": rmse, "r2": r2, "per_regime_mae": per_regime,
            "breakdown": breakdown, "n_windows": int(idx.size)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: BlendedModel, meta: Optional[dict] = None):
    """Write parameters (npz) plus an architecture manifest (json)."""
    import json
    from pathlib import Path

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.data for k, v in model.parameters().items()}
    np.savez(path / "weights.npz", **arrays)
    manifest = {
        "block_config": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in model.cfg.__dict__.items()},
        "n_features": model.n_features,
        "n_parameters": model.n_parameters(),
    }
    if meta:
        manifest["meta"] = meta
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> BlendedModel:
    """Rebuild a model from :func:`save_checkpoint` output."""
    import json
    from pathlib import Path

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = manifest["block_config"]
    cfg = BlockConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in raw.items()})
    model = BlendedModel(cfg, n_features=manifest["n_features"])
    with np.load(path / "weights.npz") as arrays:
        for k, p in model.parameters().items():
            p.data[...] = arrays[k]
    return model
