"""Shallow binary classifiers: LR, SVM, KNN and MLP.

All models standardise their inputs with statistics of the training set and
expose ``predict_proba`` returning P(Y=1 | x).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .nn_core import Dense, Network, ReLU, Softmax, TrainConfig, read_container, train, write_container

ALPHA1_GRID = tuple(10.0 ** i for i in range(-7, 8))
ALPHA4_GRID = ALPHA1_GRID
PENALTY_GRID = tuple(round(0.05 * i, 2) for i in range(21))
NEIGHBOURS_GRID = tuple(range(10, 101, 10))
LEAF_GRID = tuple(range(5, 31, 5))
NEURONS_GRID = tuple(range(10, 101, 10))
LEARNING_RATE_GRID = (1e-2, 1e-3, 1e-4)


def _on_grid(value, grid):
    return any(np.isclose(value, g, rtol=1e-9, atol=0) for g in grid)


def _check(name, value, grid, override):
    if not override and not _on_grid(value, grid):
        raise ValueError(f"{name}={value} is outside its search grid; pass allow_off_grid=True")


@dataclass(frozen=True)
class LRSpec:
    alpha1: float = 1.0   # inverse regularisation strength
    alpha2: float = 0.0   # l1 weight
    alpha3: float = 1.0   # l2 weight
    allow_off_grid: bool = False
    variant = "lr"

    def __post_init__(self):
        _check("alpha1", self.alpha1, ALPHA1_GRID, self.allow_off_grid)
        _check("alpha2", self.alpha2, PENALTY_GRID, self.allow_off_grid)
        _check("alpha3", self.alpha3, PENALTY_GRID, self.allow_off_grid)


@dataclass(frozen=True)
class SVMSpec:
    alpha1: float = 1.0   # C
    alpha4: float = 1e-3  # RBF kernel coefficient
    allow_off_grid: bool = False
    variant = "svm"

    def __post_init__(self):
        _check("alpha1", self.alpha1, ALPHA1_GRID, self.allow_off_grid)
        _check("alpha4", self.alpha4, ALPHA4_GRID, self.allow_off_grid)


@dataclass(frozen=True)
class KNNSpec:
    alpha5: int = 10      # neighbours
    alpha6: int = 30      # tree leaf size
    exact: bool = False
    allow_off_grid: bool = False
    variant = "knn"

    def __post_init__(self):
        if self.alpha5 < 1 or self.alpha6 < 1:
            raise ValueError("alpha5 and alpha6 must be positive")
        _check("alpha5", self.alpha5, NEIGHBOURS_GRID, self.allow_off_grid)
        _check("alpha6", self.alpha6, LEAF_GRID, self.allow_off_grid)


@dataclass(frozen=True)
class MLPSpec:
    alpha7: int = 50      # hidden units
    alpha3: float = 0.0   # l2 weight
    beta6: float = 1e-3   # learning rate
    epochs: int = 200
    seed: int = 0
    allow_off_grid: bool = False
    variant = "mlp"

    def __post_init__(self):
        _check("alpha7", self.alpha7, NEURONS_GRID, self.allow_off_grid)
        _check("alpha3", self.alpha3, PENALTY_GRID, self.allow_off_grid)
        _check("beta6", self.beta6, LEARNING_RATE_GRID, self.allow_off_grid)


ShallowSpec = LRSpec | SVMSpec | KNNSpec | MLPSpec
SPEC_TYPES = {"lr": LRSpec, "svm": SVMSpec, "knn": KNNSpec, "mlp": MLPSpec}


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["variant"] = spec.variant
    return d


def spec_from_dict(d: dict):
    d = dict(d)
    return SPEC_TYPES[d.pop("variant")](**d)


class Scaler:
    def __init__(self, mean, scale):
        self.mean = mean
        self.scale = scale

    @classmethod
    def fit(cls, X):
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, X):
        return (X - self.mean) / self.scale


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# Logistic regression

def fit_elastic_net_lr(Z, y, alpha1, alpha2, alpha3, tol=1e-8, max_iter=20000):
    """Minimise ``mean(logloss) + (alpha2 |w|_1 + alpha3/2 |w|^2) / (alpha1 n)``
    by accelerated proximal gradient (FISTA with adaptive restart).

    The weights and the unpenalised intercept take separate steps from the
    majoriser ``2 * blockdiag(H_ww, H_bb)`` of the Hessian. Iteration stops
    when every coordinate of the gradient mapping is below ``tol``.
    """
    n, d = Z.shape
    lam = 1.0 / (alpha1 * n)
    Za = np.hstack([Z, np.ones((n, 1))])
    step = np.empty(d + 1)
    step[:d] = 1.0 / (2.0 * (np.linalg.norm(Z, 2) ** 2 / (4.0 * n) + lam * alpha3))
    step[d] = 2.0  # 1 / (2 * 1/4)
    thr = step[:d] * lam * alpha2
    theta = np.zeros(d + 1)
    v = theta.copy()
    t = 1.0
    for it in range(max_iter):
        grad = Za.T @ (_sigmoid(Za @ v) - y) / n
        grad[:d] += lam * alpha3 * v[:d]
        nxt = v - step * grad
        nxt[:d] = np.sign(nxt[:d]) * np.maximum(np.abs(nxt[:d]) - thr, 0.0)
        mapping = (v - nxt) / step
        if np.max(np.abs(mapping)) <= tol:
            theta = nxt
            break
        if mapping @ (nxt - theta) > 0:
            t = 1.0  # momentum points uphill: restart
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        v = nxt + ((t - 1.0) / t_new) * (nxt - theta)
        theta, t = nxt, t_new
    return theta[:d], theta[d], it + 1


# --------------------------------------------------------------------------
# SVM

def rbf_kernel(A, B, gamma):
    sq = (A ** 2).sum(1)[:, None] + (B ** 2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def platt_fit(f, y, max_iter=100):
    """Fit ``P(y=1|f) = 1 / (1 + exp(A f + B))`` (Newton with backtracking,
    Platt's smoothed targets)."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y)
    n_pos = float((y == 1).sum())
    n_neg = float(len(y) - n_pos)
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y == 1, hi, lo)
    A, B = 0.0, np.log((n_neg + 1.0) / (n_pos + 1.0))

    def objective(A, B):
        z = A * f + B
        return np.sum(t * z + np.logaddexp(0.0, -z))

    fval = objective(A, B)
    for _ in range(max_iter):
        z = A * f + B
        p = _sigmoid(-z)  # P(y=1)
        q = 1.0 - p
        d2 = p * q
        h11 = 1e-12 + np.sum(f * f * d2)
        h22 = 1e-12 + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        stepsize = 1.0
        while stepsize >= 1e-10:
            nA, nB = A + stepsize * dA, B + stepsize * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * stepsize * gd:
                A, B, fval = nA, nB, nf
                break
            stepsize /= 2.0
        else:
            break
    return A, B


# --------------------------------------------------------------------------
# Models

class ShallowModel:
    variant = ""

    def __init__(self, spec, scaler: Scaler, n_features: int):
        self.spec = spec
        self.scaler = scaler
        self.n_features = n_features

    def _prep(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.scaler(X), single

    def predict_proba(self, X):
        Z, single = self._prep(X)
        p = np.clip(self._proba(Z), 0.0, 1.0)
        return float(p[0]) if single else p

    def _proba(self, Z):
        raise NotImplementedError

    def arrays(self) -> dict:
        out = {"scaler.mean": self.scaler.mean, "scaler.scale": self.scaler.scale}
        out.update(self._arrays())
        return out

    def _arrays(self) -> dict:
        return {}


class LRModel(ShallowModel):
    variant = "lr"

    def __init__(self, spec, scaler, n_features, w, b, n_iter=0):
        super().__init__(spec, scaler, n_features)
        self.w, self.b, self.n_iter = w, b, n_iter

    def decision_function(self, X):
        Z, _ = self._prep(X)
        return Z @ self.w + self.b

    def _proba(self, Z):
        return _sigmoid(Z @ self.w + self.b)

    def _arrays(self):
        return {"w": self.w, "b": np.array([self.b])}


class SVMModel(ShallowModel):
    variant = "svm"

    def __init__(self, spec, scaler, n_features, support, coef, rho, platt):
        super().__init__(spec, scaler, n_features)
        self.support, self.coef, self.rho, self.platt = support, coef, rho, platt

    def _decision(self, Z):
        if len(self.support) == 0:
            return np.full(len(Z), -self.rho)
        return rbf_kernel(Z, self.support, self.spec.alpha4) @ self.coef - self.rho

    def decision_function(self, X):
        Z, _ = self._prep(X)
        return self._decision(Z)

    def _proba(self, Z):
        A, B = self.platt
        return _sigmoid(-(A * self._decision(Z) + B))

    def _arrays(self):
        return {"support": self.support, "coef": self.coef,
                "rho_platt": np.array([self.rho, *self.platt])}


class KNNModel(ShallowModel):
    variant = "knn"

    def __init__(self, spec, scaler, n_features, Z, y):
        super().__init__(spec, scaler, n_features)
        self.Z, self.y = Z, y
        self.k = min(spec.alpha5, len(Z))
        self._tree = None if spec.exact else cKDTree(Z, leafsize=spec.alpha6)

    def neighbours(self, Z):
        if self._tree is None:
            return exact_neighbours(self.Z, Z, self.k)
        _, idx = self._tree.query(Z, k=self.k)
        return np.asarray(idx).reshape(len(Z), self.k)

    def _proba(self, Z):
        return self.y[self.neighbours(Z)].mean(axis=1)

    def _arrays(self):
        return {"Z": self.Z, "y": self.y.astype(np.float64)}


def exact_neighbours(train, query, k):
    d2 = ((query[:, None, :] - train[None, :, :]) ** 2).sum(-1)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


class MLPModel(ShallowModel):
    variant = "mlp"

    def __init__(self, spec, scaler, n_features, net: Network, history=()):
        super().__init__(spec, scaler, n_features)
        self.net = net
        self.history = list(history)

    def _proba(self, Z):
        return self.net.predict(Z)[:, 1].astype(np.float64)

    def _arrays(self):
        return dict(self.net.state_arrays())


def train_shallow(spec, inputs, labels) -> ShallowModel:
    """Fit ``spec`` on ``inputs`` (n, d) with binary ``labels`` (1 = positive)."""
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("inputs must be (n, d) with one label per row")
    if len(X) < 2:
        raise ValueError("need at least two training samples")
    if set(np.unique(y)) != {0, 1}:
        raise ValueError("training labels must contain both classes 0 and 1")
    scaler = Scaler.fit(X)
    Z = scaler(X)
    d = X.shape[1]

    if isinstance(spec, LRSpec):
        w, b, n_iter = fit_elastic_net_lr(Z, y.astype(np.float64), spec.alpha1, spec.alpha2,
                                          spec.alpha3)
        return LRModel(spec, scaler, d, w, b, n_iter)

    if isinstance(spec, SVMSpec):
        ys = np.where(y == 1, 1.0, -1.0)
        K = rbf_kernel(Z, Z, spec.alpha4)
        alpha, rho, _ = kernels.smo_solve(np.ascontiguousarray(K), ys, float(spec.alpha1))
        sv = alpha > 0
        model = SVMModel(spec, scaler, d, Z[sv].copy(), (alpha * ys)[sv], rho, (0.0, 0.0))
        f = K[:, sv] @ model.coef - rho
        model.platt = platt_fit(f, y)
        return model

    if isinstance(spec, KNNSpec):
        return KNNModel(spec, scaler, d, Z, y)

    if isinstance(spec, MLPSpec):
        net = Network([Dense(spec.alpha7), ReLU(), Dense(2, init="glorot"), Softmax(2)], (d,),
                      seed=spec.seed, dtype=np.float64)
        cfg = TrainConfig(batch_size=min(200, len(Z)), epochs=spec.epochs,
                          learning_rate=spec.beta6, seed=spec.seed, l2=spec.alpha3 / len(Z))
        net, history = train(net, Z, y, cfg)
        return MLPModel(spec, scaler, d, net, history)

    raise TypeError(f"unknown shallow spec {spec!r}")


def predict_proba(model: ShallowModel, x):
    return model.predict_proba(x)


# --------------------------------------------------------------------------
# Serialisation

def save_shallow(model: ShallowModel, path) -> None:
    desc = {"shallow": model.variant, "spec": spec_to_dict(model.spec),
            "n_features": model.n_features}
    if isinstance(model, MLPModel):
        desc["network"] = json.loads(model.net.describe())
    write_container(path, json.dumps(desc, sort_keys=True), model.arrays().items(), dtype_code=1)


def load_shallow(path) -> ShallowModel:
    text, t = read_container(path)
    desc = json.loads(text)
    spec = spec_from_dict(desc["spec"])
    scaler = Scaler(t["scaler.mean"], t["scaler.scale"])
    d = desc["n_features"]
    kind = desc["shallow"]
    if kind == "lr":
        return LRModel(spec, scaler, d, t["w"], float(t["b"][0]))
    if kind == "svm":
        rho, A, B = t["rho_platt"]
        return SVMModel(spec, scaler, d, t["support"], t["coef"], float(rho), (float(A), float(B)))
    if kind == "knn":
        return KNNModel(spec, scaler, d, t["Z"], t["y"].astype(np.int64))
    if kind == "mlp":
        net = Network.from_description(json.dumps(desc["network"]))
        for key, a in net.state_arrays():
            a[...] = t[key]
        net.touch()
        return MLPModel(spec, scaler, d, net)
    raise ValueError(f"{path}: unknown shallow model {kind!r}")
