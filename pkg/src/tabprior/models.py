"""Logistic regression variants with prior penalties.

* ``lr``        plain logistic regression with a small ridge penalty
* ``biased``    BCE + lam * ||beta - beta_p||^2
* ``monotonic`` logistic regression on per-column monotone maps z_i(x_i),
                penalised through the effective slopes beta_eff

All three are trained full-batch with Adam on analytic gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import DataError, EncodedColumn, EncodedMatrix, Standardizer
from .umnn import DEFAULT_ORDER, MonotoneMap

log = logging.getLogger(__name__)

KINDS = ("lr", "biased", "monotonic")
DISPLAY_NAMES = {"lr": "LR", "biased": "BiasedLR", "monotonic": "MonotonicLR"}

PROB_CLAMP = 1e-12
SLOPE_EPS = 1e-6
MAX_SLOPE_POINTS = 64
LAMBDA_SCALE = {"lr": 0.0, "biased": 0.5, "monotonic": 0.1}
DEFAULT_LR = {"lr": 0.01, "biased": 0.01, "monotonic": 0.005}
MAP_DECAY_SCALE = 8.0


class TrainingDivergedError(RuntimeError):
    pass


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return kind


def lambda_schedule(n: int, kind: str) -> float:
    """Prior strength c / sqrt(n): c = 0.5 (biased), 0.1 (monotonic), 0 (lr)."""
    _check_kind(kind)
    if n < 1:
        raise ValueError("number of shots must be >= 1")
    return LAMBDA_SCALE[kind] / math.sqrt(n)


def map_decay_schedule(n: int) -> float:
    """Curvature penalty on the maps' first-layer weights, c / sqrt(n) with c = 8.

    Driving those weights to zero makes each map linear, so this shrinks
    MonotonicLR toward a linear model when shots are scarce.
    """
    if n < 1:
        raise ValueError("number of shots must be >= 1")
    return MAP_DECAY_SCALE / math.sqrt(n)


@dataclass
class TrainConfig:
    lam: float = 0.0
    learning_rate: float | None = None
    max_epochs: int = 2000
    tolerance: float = 1e-7
    patience: int = 20
    seed: int = 0
    l2_fallback: float = 1e-3
    hidden: tuple[int, ...] = (16, 16)
    quadrature_order: int = DEFAULT_ORDER
    bias_enabled: bool = True
    beta_eff_mode: str = "mean"
    map_decay: float | None = None  # None: no decay in train(); the evaluation uses the schedule

    def __post_init__(self):
        if self.lam < 0 or self.l2_fallback < 0 or (self.map_decay or 0.0) < 0:
            raise ValueError("regularisation strengths must be >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.tolerance <= 0 or self.patience < 1:
            raise ValueError("max_epochs, tolerance and patience must be positive")
        if self.beta_eff_mode not in ("mean", "sum"):
            raise ValueError("beta_eff_mode must be 'mean' or 'sum'")
        self.hidden = tuple(int(h) for h in self.hidden)

    def rate(self, kind: str) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[kind]

    def to_json(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class LinearParams:
    alpha: float
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not (math.isfinite(self.alpha) and np.all(np.isfinite(self.beta))):
            raise ValueError("linear parameters must be finite")


@dataclass
class ModelState:
    kind: str
    linear: LinearParams
    columns: tuple[EncodedColumn, ...]
    maps: list[MonotoneMap] | None = None
    stats: Standardizer | None = None
    train_config: dict = field(default_factory=dict)
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_kind(self.kind)
        self.columns = tuple(self.columns)
        if len(self.linear.beta) != len(self.columns):
            raise ValueError("beta length must equal the encoded column count")
        if self.kind == "monotonic":
            if self.maps is None or len(self.maps) != len(self.columns):
                raise ValueError("MonotonicLR needs exactly one map per encoded column")
        elif self.maps is not None:
            raise ValueError(f"{self.kind} models carry no monotone maps")

    @property
    def alpha(self) -> float:
        return self.linear.alpha

    @property
    def beta(self) -> np.ndarray:
        return self.linear.beta

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.kind]


def _check_layout(state: ModelState, matrix: EncodedMatrix) -> None:
    if tuple(matrix.columns) != tuple(state.columns):
        raise DataError("matrix column layout does not match the model's training layout")
    if not np.all(np.isfinite(matrix.values)):
        raise DataError("matrix contains non-finite features")


def _column_z(m: MonotoneMap, col: np.ndarray) -> np.ndarray:
    u, inv = np.unique(col, return_inverse=True)
    return np.asarray(m.z(u))[inv]


def column_activations(state: ModelState, matrix: EncodedMatrix) -> np.ndarray:
    """Per-row, per-column additive logit contributions beta_i * z_i(x_i)."""
    _check_layout(state, matrix)
    X = matrix.values
    if state.kind != "monotonic":
        return X * state.beta
    out = np.empty_like(X)
    for j, m in enumerate(state.maps):
        out[:, j] = state.beta[j] * _column_z(m, X[:, j])
    return out


def logits(state: ModelState, matrix: EncodedMatrix) -> np.ndarray:
    _check_layout(state, matrix)
    if state.kind != "monotonic":
        return matrix.values @ state.beta + state.alpha
    return column_activations(state, matrix).sum(axis=1) + state.alpha


def predict(state: ModelState, matrix: EncodedMatrix) -> np.ndarray:
    return expit(logits(state, matrix))


# --- losses -------------------------------------------------------------------


def _bce(logit: np.ndarray, y: np.ndarray):
    """Mean BCE on clamped probabilities, and its gradient w.r.t. the logits."""
    p = expit(logit)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return loss, np.where(inside, p - y, 0.0) / len(y)


def _as_target(y) -> np.ndarray:
    return np.asarray(y, dtype=np.float64)


def _biased_value_grad(X, y, alpha, beta, beta_p, lam):
    loss, dlogit = _bce(X @ beta + alpha, y)
    diff = beta - beta_p
    loss = loss + lam * float(diff @ diff)
    return loss, float(dlogit.sum()), X.T @ dlogit + 2.0 * lam * diff


def loss_biased(state: ModelState, matrix: EncodedMatrix, y, beta_p, lam: float, grad: bool = False):
    """Mean BCE + lam * ||beta - beta_p||^2 for a linear model.

    With ``grad=True`` returns ``(loss, {"alpha": ..., "beta": ...})``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    beta_p = np.asarray(beta_p, dtype=np.float64)
    if beta_p.shape != state.beta.shape:
        raise ValueError("beta_p length does not match beta")
    _check_layout(state, matrix)
    loss, da, db = _biased_value_grad(
        matrix.values, _as_target(y), state.alpha, state.beta, beta_p, lam
    )
    return (loss, {"alpha": da, "beta": db}) if grad else loss


def slope_points(col: np.ndarray, max_points: int = MAX_SLOPE_POINTS) -> np.ndarray:
    """Distinct column values used for effective slopes (<= max_points quantiles)."""
    u = np.unique(col)
    if len(u) > max_points:
        u = np.unique(np.quantile(col, np.linspace(0.0, 1.0, max_points), method="nearest"))
    return u


def beta_eff(state: ModelState, matrix: EncodedMatrix, mode: str = "mean") -> np.ndarray:
    """Average secant slope beta_i * z_i(x) / x over each column's value set.

    Points with |x| <= 1e-6 are skipped; a column left with none falls back to
    beta_i * f_i(0), the slope at the origin.
    """
    if state.kind != "monotonic":
        raise ValueError("beta_eff is defined for MonotonicLR states")
    _check_layout(state, matrix)
    out = np.empty(len(state.columns))
    for j, m in enumerate(state.maps):
        pts = slope_points(matrix.values[:, j])
        pts = pts[np.abs(pts) > SLOPE_EPS]
        if pts.size == 0:
            out[j] = state.beta[j] * float(m.f(0.0))
            continue
        ratios = np.asarray(m.z(pts)) / pts
        out[j] = state.beta[j] * (ratios.mean() if mode == "mean" else ratios.sum())
    return out


class MonotonicObjective:
    """Loss and full gradient of MonotonicLR on a fixed training matrix.

    Each column is evaluated only at its distinct values; the slope points are
    a subset of those, so one forward/backward pass per column covers both the
    likelihood and the penalty.
    """

    def __init__(
        self, X: np.ndarray, y, beta_p, lam: float, mode: str = "mean", map_decay: float = 0.0
    ):
        self.X = np.asarray(X, dtype=np.float64)
        self.map_decay = float(map_decay)
        self.y = _as_target(y)
        self.beta_p = np.asarray(beta_p, dtype=np.float64)
        self.lam = float(lam)
        self.mode = mode
        self.cols = []
        for j in range(self.X.shape[1]):
            u, inv = np.unique(self.X[:, j], return_inverse=True)
            pts = slope_points(self.X[:, j])
            pts = pts[np.abs(pts) > SLOPE_EPS]
            sidx = np.searchsorted(u, pts)
            self.cols.append((u, inv, sidx))

    def __call__(self, alpha: float, beta: np.ndarray, maps: Sequence[MonotoneMap]):
        n, d = self.X.shape
        z = np.empty((n, d))
        cache = []
        for j, m in enumerate(maps):
            u, inv, sidx = self.cols[j]
            zu, vjp = m.z_with_vjp(u)
            z[:, j] = zu[inv]
            if sidx.size:
                ratio = zu[sidx] / u[sidx]
                scale = ratio.mean() if self.mode == "mean" else ratio.sum()
                f0_vjp = None
            else:
                f0, f0_vjp = m.f_with_vjp(np.zeros(1))
                scale = float(f0[0])
            cache.append((vjp, scale, f0_vjp))

        bce, dlogit = _bce(z @ beta + alpha, self.y)
        scales = np.array([c[1] for c in cache])
        eff = beta * scales
        diff = eff - self.beta_p
        loss = bce + self.lam * float(diff @ diff)
        if self.map_decay:
            for m in maps:
                w = m.theta[m.net.input_weights]
                loss += self.map_decay * float(w @ w)

        d_alpha = float(dlogit.sum())
        d_eff = 2.0 * self.lam * diff
        d_beta = z.T @ dlogit + d_eff * scales
        d_theta = []
        for j, (vjp, _, f0_vjp) in enumerate(cache):
            u, inv, sidx = self.cols[j]
            g = beta[j] * np.bincount(inv, weights=dlogit, minlength=len(u))
            if f0_vjp is None:
                w = 1.0 / len(sidx) if self.mode == "mean" else 1.0
                np.add.at(g, sidx, d_eff[j] * beta[j] * w / u[sidx])
                dt = vjp(g)
            else:
                dt = vjp(g) + f0_vjp(np.array([d_eff[j] * beta[j]]))
            if self.map_decay:
                sl = maps[j].net.input_weights
                dt[sl] += 2.0 * self.map_decay * maps[j].theta[sl]
            d_theta.append(dt)
        return loss, d_alpha, d_beta, d_theta


def loss_monotonic(
    state: ModelState, matrix: EncodedMatrix, y, beta_p, lam: float, grad: bool = False
):
    """Mean BCE + lam * ||beta_eff - beta_p||^2.

    With ``grad=True`` returns ``(loss, {"alpha", "beta", "theta": [per map]})``.
    """
    if state.kind != "monotonic":
        raise ValueError("loss_monotonic needs a MonotonicLR state")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    beta_p = np.asarray(beta_p, dtype=np.float64)
    if beta_p.shape != state.beta.shape:
        raise ValueError("beta_p length does not match beta")
    _check_layout(state, matrix)
    mode = state.train_config.get("beta_eff_mode", "mean")
    obj = MonotonicObjective(
        matrix.values, y, beta_p, lam, mode, state.train_config.get("map_decay") or 0.0
    )
    loss, da, db, dt = obj(state.alpha, state.beta, state.maps)
    return (loss, {"alpha": da, "beta": db, "theta": dt}) if grad else loss


# --- training -----------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _initial_state(kind, columns, beta_p, config: TrainConfig) -> ModelState:
    d = len(columns)
    maps = None
    beta = np.zeros(d)
    if kind == "monotonic":
        rng = np.random.default_rng(config.seed)
        widths = (1, *config.hidden, 1)
        maps = [
            MonotoneMap.initialized(widths, rng, config.quadrature_order, config.bias_enabled)
            for _ in range(d)
        ]
        # z == 0 at init, so beta = 0 would be a stationary point of the loss.
        beta = np.where(beta_p != 0, beta_p, 1.0).astype(np.float64)
    return ModelState(kind, LinearParams(0.0, beta), columns, maps, train_config=config.to_json())


def train(
    kind: str,
    matrix: EncodedMatrix,
    y,
    beta_p,
    config: TrainConfig | None = None,
) -> ModelState:
    """Full-batch Adam on the loss for ``kind``; returns the best-loss state.

    Stops after ``max_epochs`` or once the relative improvement of the best
    loss stays below ``tolerance`` for ``patience`` consecutive epochs.
    """
    _check_kind(kind)
    config = config or TrainConfig()
    X = np.asarray(matrix.values, dtype=np.float64)
    y = _as_target(y)
    if X.shape[0] < 1 or len(y) != X.shape[0]:
        raise ValueError("need at least one row and one label per row")
    if len(np.unique(y)) < 2:
        log.warning("training labels contain a single class")
    beta_p = np.asarray(beta_p, dtype=np.float64)
    if beta_p.shape != (X.shape[1],):
        raise ValueError("beta_p length does not match the encoded column count")
    if kind == "lr":
        beta_p, lam = np.zeros_like(beta_p), config.l2_fallback
    else:
        lam = config.lam

    state = _initial_state(kind, matrix.columns, beta_p, config)
    d = X.shape[1]
    if kind == "monotonic":
        objective = MonotonicObjective(
            X, y, beta_p, lam, config.beta_eff_mode, config.map_decay or 0.0
        )
        sizes = [m.net.n_params for m in state.maps]
        offsets = np.cumsum([1 + d, *sizes])

        def evaluate(p):
            for m, lo, hi in zip(state.maps, offsets[:-1], offsets[1:]):
                m.theta = p[lo:hi]
            loss, da, db, dt = objective(p[0], p[1 : 1 + d], state.maps)
            return loss, np.concatenate([[da], db, *dt])

        params = np.concatenate([[state.alpha], state.beta, *[m.theta for m in state.maps]])
    else:

        def evaluate(p):
            loss, da, db = _biased_value_grad(X, y, p[0], p[1:], beta_p, lam)
            return loss, np.concatenate([[da], db])

        params = np.concatenate([[state.alpha], state.beta])

    opt = Adam(config.rate(kind))
    best_loss, best_params, stall, epoch = math.inf, params.copy(), 0, 0
    for epoch in range(1, config.max_epochs + 1):
        loss, grad = evaluate(params)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(
                f"{DISPLAY_NAMES[kind]} diverged at epoch {epoch}: loss={loss} "
                f"|params|={np.linalg.norm(params):.3g} lam={lam} rows={X.shape[0]}"
            )
        if loss < best_loss:
            rel = (best_loss - loss) / max(abs(best_loss), 1e-12) if math.isfinite(best_loss) else math.inf
            best_loss, best_params = loss, params.copy()
        else:
            rel = 0.0
        stall = stall + 1 if rel < config.tolerance else 0
        if stall >= config.patience:
            break
        params = opt.step(params, grad)

    state.linear = LinearParams(best_params[0], best_params[1 : 1 + d])
    if kind == "monotonic":
        for m, lo, hi in zip(state.maps, offsets[:-1], offsets[1:]):
            m.theta = best_params[lo:hi].copy()
    state.fit_info = {"epochs": epoch, "loss": float(best_loss), "lam": float(lam)}
    state.stats = matrix.stats
    return state


# --- checkpoints --------------------------------------------------------------


def state_to_json(state: ModelState) -> dict:
    out = {
        "kind": state.kind,
        "alpha": state.alpha,
        "beta": state.beta.tolist(),
        "column_map": [c.to_json() for c in state.columns],
        "stats": None if state.stats is None else state.stats.to_json(),
        "train_config": state.train_config,
        "fit": state.fit_info,
    }
    if state.maps is not None:
        out["maps"] = [m.to_json() for m in state.maps]
    return out


def state_from_json(obj) -> ModelState:
    maps = obj.get("maps")
    return ModelState(
        kind=obj["kind"],
        linear=LinearParams(obj["alpha"], obj["beta"]),
        columns=tuple(EncodedColumn.from_json(c) for c in obj["column_map"]),
        maps=None if maps is None else [MonotoneMap.from_json(m) for m in maps],
        stats=None if obj.get("stats") is None else Standardizer.from_json(obj["stats"]),
        train_config=obj.get("train_config", {}),
        fit_info=obj.get("fit", {}),
    )


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_json(state), fh, indent=1)


def load_checkpoint(path: str | Path) -> ModelState:
    with open(path, encoding="utf-8") as fh:
        return state_from_json(json.load(fh))
