"""Acceptance suite: one test per criterion, each recorded for the summary."""

import itertools
import time

import numpy as np
import pytest

from conftest import DATA, DECOMPOSITION_TOL, FIT_LOG, dataset_paths, record_criterion
from tabprior import models
from tabprior.analyze import NON_MONOTONE, activation_curve, classify_curve, decomposition_residual
from tabprior.data import CONTINUOUS, EncodedColumn, EncodedMatrix, load_dataset
from tabprior.evaluation import ExperimentGrid, auc, fit_cell, load_reference, run_grid
from tabprior.models import LinearParams, ModelState, TrainConfig, loss_monotonic
from tabprior.priors import load_prior_file
from tabprior.umnn import LN2, MonotoneMap, ScalarNet, z_eval

SEEDS = tuple(range(20))
TOL = 0.03
REFERENCE = load_reference()


def _ref(dataset, key, shots):
    return REFERENCE[dataset][key][str(shots)]["mean"]


# --- 1. gradients -------------------------------------------------------------


_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(32)


def _softplus(v):
    return np.logaddexp(0.0, v)


def _layers(widths, theta):
    """Per-layer (W, b) from the flat [W row-major, b, ...] layout."""
    out, off = [], 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        W = theta[off : off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        out.append((W, theta[off : off + n_out], off - n_in * n_out, off + n_out))
        off += n_out
    return out


def _perturbed_net(widths, theta, pts, idx, delta):
    """Network outputs (len(idx), len(pts)); row r adds delta[r] to theta[idx[r]].

    Layers before the perturbed one reuse the unperturbed activations.
    """
    layers = _layers(widths, theta)
    inputs = [pts[:, None]]
    for i, (W, b, _, _) in enumerate(layers[:-1]):
        inputs.append(_softplus(inputs[-1] @ W.T + b))
    out = np.empty((len(idx), len(pts)))
    for i, (W, b, lo, hi) in enumerate(layers):
        rows = np.flatnonzero((idx >= lo) & (idx < hi))
        if rows.size == 0:
            continue
        R = len(rows)
        flat = np.repeat(theta[lo:hi][None, :], R, axis=0)
        flat[np.arange(R), idx[rows] - lo] += delta[rows]
        Wb = flat[:, : W.size].reshape(R, *W.shape)
        bb = flat[:, W.size :]
        n_out = W.shape[0]
        pre = (inputs[i] @ Wb.reshape(R * n_out, -1).T).reshape(len(pts), R, n_out)
        h = pre.transpose(1, 0, 2) + bb[:, None, :]
        for k, (W2, b2, _, _) in enumerate(layers[i + 1 :], start=i + 1):
            h = _softplus(h) @ W2.T + b2
        out[rows] = h[..., 0]
    return out


def _f_values(m, idx, delta, pts):
    shift = np.log(2.0) if m.bias_enabled else 0.0
    return _softplus(_perturbed_net(m.net.widths, m.theta, pts, idx, delta)) - shift


def _z_values(m, idx, delta, x):
    pts = (x[:, None] * 0.5 * (_NODES + 1.0)).ravel()
    f = _f_values(m, idx, delta, pts)
    return 0.5 * x[None, :] * (f.reshape(len(idx), len(x), -1) @ _WEIGHTS)


class _Oracle:
    """MonotonicLR loss evaluated for many parameter perturbations at once,
    independently of the library's objective and network code."""

    def __init__(self, X, y, bp, lam, decay, maps):
        self.X, self.y, self.bp, self.lam, self.decay = X, y, bp, lam, decay
        self.maps = maps
        d = X.shape[1]
        self.z = np.empty_like(X)
        self.scale = np.empty(d)
        self.decay_terms = np.empty(d)
        for j in range(d):
            z, sc, dec = self.column(j, np.zeros(1, dtype=int), np.zeros(1))
            self.z[:, j], self.scale[j], self.decay_terms[j] = z[0], sc[0], dec[0]

    def column(self, j, idx, delta):
        m = self.maps[j]
        u, inv = np.unique(self.X[:, j], return_inverse=True)
        zu = _z_values(m, idx, delta, u)
        keep = np.abs(u) > 1e-6
        if keep.any():
            scale = np.mean(zu[:, keep] / u[keep], axis=1)
        else:
            scale = _f_values(m, idx, delta, np.zeros(1))[:, 0]
        n_w = m.net.widths[1]  # the first n_w entries are the input weights
        w = np.repeat(m.theta[None, :n_w], len(idx), axis=0)
        hit = idx < n_w
        w[np.flatnonzero(hit), idx[hit]] += delta[hit]
        dec = self.decay * np.sum(w**2, axis=1)
        return zu[:, inv], scale, dec

    def loss(self, alpha, beta, z=None, scale=None, dec=None):
        z = self.z[None] if z is None else z
        scale = self.scale[None] if scale is None else scale
        dec = self.decay_terms.sum() if dec is None else dec
        logit = z @ beta + alpha
        bce = np.mean(np.logaddexp(0.0, logit) - self.y * logit, axis=-1)
        pen = self.lam * np.sum((beta * scale - self.bp) ** 2, axis=-1)
        return bce + pen + dec

    def theta_fd(self, j, alpha, beta, h=1e-4):
        P = len(self.maps[j].theta)
        steps = np.array([2.0, 1.0, -1.0, -2.0]) * h
        zj, sc, dec = self.column(j, np.tile(np.arange(P), 4), np.repeat(steps, P))
        z = np.repeat(self.z[None], 4 * P, axis=0)
        z[:, :, j] = zj
        scale = np.repeat(self.scale[None], 4 * P, axis=0)
        scale[:, j] = sc
        other = self.decay_terms.sum() - self.decay_terms[j]
        L = self.loss(alpha, beta, z, scale, dec + other).reshape(4, P)
        return (-L[0] + 8 * L[1] - 8 * L[2] + L[3]) / (12 * h)


def _stencil(f, h=1e-4):
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def _rel(g, fd, floor=1e-6):
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for inst in range(100):
        rng = np.random.default_rng(1000 + inst)
        d = int(rng.integers(1, 6))
        rows = int(rng.integers(2, 21))
        hidden = [(4,), (8,), (6, 6), (16, 16)][int(rng.integers(4))]
        X = np.round(rng.normal(size=(rows, d)), 1)
        if d > 1 and rng.uniform() < 0.2:
            X[:, -1] = 0.0  # exercises the slope-at-origin fallback
        y = rng.integers(0, 2, rows).astype(float)
        cols = tuple(EncodedColumn(f"x{j}", f"x{j}", CONTINUOUS) for j in range(d))
        maps = []
        for _ in range(d):
            net = ScalarNet((1, *hidden, 1))
            net.theta = rng.normal(scale=0.5, size=net.n_params)
            maps.append(MonotoneMap(net, 32, bool(rng.integers(2))))
        alpha, beta = float(rng.normal()), rng.normal(size=d)
        bp = rng.choice([-1.0, 0.0, 1.0], size=d)
        lam, decay = float(rng.uniform(0, 1)), float(rng.choice([0.0, 0.5]))
        state = ModelState("monotonic", LinearParams(alpha, beta), cols, maps,
                           train_config={"map_decay": decay})
        _, grad = loss_monotonic(state, EncodedMatrix(X, cols), y, bp, lam, grad=True)

        oracle = _Oracle(X, y, bp, lam, decay, maps)
        fd_alpha = _stencil(lambda h: oracle.loss(alpha + h, beta)[0])
        worst = max(worst, float(_rel(grad["alpha"], fd_alpha)))
        for i in range(d):
            e = np.eye(d)[i]
            fd = _stencil(lambda h: oracle.loss(alpha, beta + h * e)[0])
            worst = max(worst, float(_rel(grad["beta"][i], fd)))
        checked += 1 + d
        for j in range(d):
            fd = oracle.theta_fd(j, alpha, beta)
            worst = max(worst, float(_rel(grad["theta"][j], fd).max()))
            checked += len(fd)
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-4 and elapsed < 30
    record_criterion(1, passed, f"{checked} partials, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 30


# --- 2. quadrature -------------------------------------------------------------


def test_criterion_2_quadrature():
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in (8, 16, 32):
        for deg in range(0, 2 * k):
            c = rng.normal(size=deg + 1)
            poly = np.polynomial.Polynomial(c)
            anti = poly.integ()
            m = MonotoneMap(ScalarNet((1, 2, 1)), quadrature_order=k, integrand=poly)
            for x in rng.uniform(-1, 1, 5):
                worst = max(worst, abs(z_eval(m, x) - anti(x)))
    passed = worst <= 1e-12
    record_criterion(2, passed, f"degrees 0..2K-1 for K in 8,16,32; worst abs err {worst:.1e}")
    assert passed


# --- 3. monotonicity ------------------------------------------------------------


def _map(rng, bias):
    # Scales up to 0.5 bracket trained maps under the default first-layer decay.
    net = ScalarNet((1, 16, 16, 1))
    net.theta = rng.normal(scale=rng.uniform(0.05, 0.5), size=net.n_params)
    return MonotoneMap(net, 32, bias)


def test_criterion_3_monotonicity():
    rng = np.random.default_rng(3)
    violations = floor_violations = 0
    for _ in range(1000):
        grid = np.sort(rng.uniform(-5, 5, 50))
        violations += int(np.sum(np.diff(_map(rng, False).z(grid)) < 0))
        z = _map(rng, True).z(grid)
        floor_violations += int(np.sum(np.diff(z) < -LN2 * np.diff(grid) - 1e-12))
    passed = violations == 0 and floor_violations == 0
    record_criterion(3, passed, f"1000+1000 maps: {violations} decreases, {floor_violations} slope-floor breaches")
    assert passed


# --- 4. AUC --------------------------------------------------------------------


def _pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_criterion_4_auc_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        s = rng.integers(0, int(rng.integers(2, 12)), n) / 4.0  # few levels -> many ties
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        worst = max(worst, abs(auc(s, y) - _pairwise_auc(s, y)))
    record_criterion(4, worst <= 1e-12, f"1000 instances, worst diff {worst:.1e}")
    assert worst <= 1e-12


# --- 5. lambda limit --------------------------------------------------------------


def test_criterion_5_lambda_limit():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(50 + seed)
        d = int(rng.integers(1, 6))
        X = rng.normal(size=(40, d))
        y = rng.integers(0, 2, 40)
        bp = rng.choice([-1.0, 0.0, 1.0], size=d)
        cols = tuple(EncodedColumn(f"x{j}", f"x{j}", CONTINUOUS) for j in range(d))
        state = models.train("biased", EncodedMatrix(X, cols), y, bp, TrainConfig(lam=1e6))
        worst = max(worst, float(np.linalg.norm(state.beta - bp)))
    record_criterion(5, worst < 1e-2, f"max ||beta - beta_p|| = {worst:.1e} over 10 problems")
    assert worst < 1e-2


# --- 6. Diabetes -------------------------------------------------------------------


def test_criterion_6_diabetes():
    csv, schema, priors = dataset_paths("diabetes")
    grid = ExperimentGrid(
        "diabetes", str(csv), str(schema), str(priors), shots=(4, 64), seeds=SEEDS,
        pairs=[("biased", "ordered"), ("lr", "raw")],
    )
    start = time.perf_counter()
    report = run_grid(grid)
    elapsed = time.perf_counter() - start
    checks = []
    for method, enc, n in (("biased", "ordered", 4), ("biased", "ordered", 64), ("lr", "raw", 64)):
        cell = report.cell(method, enc, n)
        ref = _ref("diabetes", f"{method}_{enc}", n)
        ok = len(cell.aucs) == len(SEEDS) and abs(cell.auc_mean - ref) <= TOL
        checks.append((f"{method}_{enc}@{n}", cell.auc_mean, ref, ok))
    passed = all(c[3] for c in checks) and elapsed < 300
    detail = "; ".join(f"{k} {m:.3f} vs {r:.2f} {'ok' if ok else 'OUT'}" for k, m, r, ok in checks)
    record_criterion(6, passed, f"{detail}; {elapsed:.0f}s")
    assert elapsed < 300
    assert all(c[3] for c in checks), detail


# --- 7 and 9. Heart ----------------------------------------------------------------

HEART_CSV, HEART_SCHEMA, HEART_PRIORS = dataset_paths("heart")
HEART_MISSING = (
    f"{HEART_CSV.relative_to(DATA.parent)} is not in the repository (no network copy was "
    "available to this build); place the 918-row file there to run this criterion"
)


def test_criterion_7_heart():
    if not HEART_CSV.exists():
        record_criterion(7, False, "not run: heart.csv missing")
        pytest.fail(HEART_MISSING)
    grid = ExperimentGrid(
        "heart", str(HEART_CSV), str(HEART_SCHEMA), str(HEART_PRIORS), seeds=SEEDS,
        shots=(4, 512), pairs=[("monotonic", "ordered"), ("lr", "raw")],
    )
    report = run_grid(grid, threads=4)
    mono = report.cell("monotonic", "ordered", 512).auc_mean
    lr = report.cell("lr", "raw", 4).auc_mean
    ok_mono = abs(mono - 0.93) <= 0.03
    ok_lr = abs(lr - 0.79) <= 0.05
    record_criterion(7, ok_mono and ok_lr, f"monotonic@512 {mono:.3f} vs 0.93; lr_raw@4 {lr:.3f} vs 0.79")
    assert ok_mono and ok_lr


def test_criterion_9_heart_chest_pain():
    if not HEART_CSV.exists():
        record_criterion(9, False, "not run: heart.csv missing")
        pytest.fail(HEART_MISSING)
    table = load_dataset(HEART_CSV, HEART_SCHEMA)
    spec = load_prior_file(HEART_PRIORS, table.schema)
    hits = 0
    for seed in SEEDS:
        cell = fit_cell(table, spec, "monotonic", "ordered", 512, seed)
        flag = classify_curve(activation_curve(cell.state, "ChestPainType", cell.matrix))
        hits += flag.status == NON_MONOTONE and flag.extremum_kind == "minimum"
    passed = hits * 2 >= len(SEEDS)
    record_criterion(9, passed, f"interior minimum in {hits}/{len(SEEDS)} seeds")
    assert passed


# --- 8. Income ---------------------------------------------------------------------


def test_criterion_8_income_ordering():
    csv, schema, priors = dataset_paths("income")
    grid = ExperimentGrid(
        "income", str(csv), str(schema), str(priors), shots=(64,), seeds=SEEDS,
        pairs=[("lr", "ordered"), ("lr", "raw")],
    )
    report = run_grid(grid)
    ordered = report.cell("lr", "ordered", 64).auc_mean
    raw = report.cell("lr", "raw", 64).auc_mean
    gap = ordered - raw
    record_criterion(8, gap >= 0.02, f"ordered {ordered:.3f} vs raw {raw:.3f}, gap {gap:+.3f}")
    assert gap >= 0.02


# --- 10. decomposition ---------------------------------------------------------------


def test_criterion_10_decomposition():
    worst = 0.0
    fits = 0
    for name, encodings in (("diabetes", ("raw",)), ("cleveland", ("ordered", "onehot"))):
        csv, schema, priors = dataset_paths(name)
        table = load_dataset(csv, schema)
        spec = load_prior_file(priors, table.schema)
        for enc, method in itertools.product(encodings, ("lr", "biased", "monotonic")):
            cfg = TrainConfig(max_epochs=60, hidden=(8, 8))
            cell = fit_cell(table, spec, method, enc, 32, 0, config=cfg)
            worst = max(worst, decomposition_residual(cell.state, cell.matrix))  # all rows
            fits += 1
    logged = max(FIT_LOG) if FIT_LOG else 0.0
    passed = max(worst, logged) <= DECOMPOSITION_TOL
    record_criterion(
        10, passed, f"{fits} full-table checks worst {worst:.1e}; suite-wide hook checked at exit"
    )
    assert passed
