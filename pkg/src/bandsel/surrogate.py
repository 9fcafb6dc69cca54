"""Lightweight performance predictors over band-combination features.

Feature layout (version 1), length ``N + K + 2``::

    [one-hot band membership (N) | band index / (N - 1), sorted (K) | bc_entropy | bc_sam]

The statistics entries are zero when no cube is supplied.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .hsi import HsiCube, check_bc
from .stats import BandStats

FEATURE_VERSION = 1


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = "ridge"
    lam: float = 1e-3
    hidden: int = 32
    lr: float = 0.05
    epochs: int = 2000

    def __post_init__(self):
        if self.kind not in ("ridge", "mlp"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("ridge penalty must be non-negative")


@dataclass
class SurrogateModel:
    kind: str
    lam: float
    weights: dict[str, np.ndarray]
    layout: dict = field(default_factory=dict)
    train_rmse: float = float("nan")

    def n_features(self) -> int:
        w = self.weights["w"] if self.kind == "ridge" else self.weights["w1"]
        return w.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "lambda": self.lam,
                "layout": self.layout,
                "train_rmse": self.train_rmse,
                "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.weights.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> SurrogateModel:
        obj = json.loads(text)
        weights = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["weights"].items()
        }
        return cls(obj["kind"], obj["lambda"], weights, obj["layout"], obj["train_rmse"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> SurrogateModel:
        with open(path) as fh:
            return cls.from_json(fh.read())


def featurize(bc: Sequence[int], n_bands: int, cube: HsiCube | None = None, stats: BandStats | None = None) -> np.ndarray:
    bc = check_bc(bc, n_bands)
    onehot = np.zeros(n_bands)
    onehot[list(bc)] = 1.0
    positions = np.array(bc, dtype=np.float64) / max(n_bands - 1, 1)
    extra = np.zeros(2)
    if stats is None and cube is not None:
        stats = BandStats.of(cube)
    if stats is not None:
        extra[0] = stats.bc_entropy(bc)
        extra[1] = stats.bc_sam(bc) if len(bc) > 1 else 0.0
    return np.concatenate([onehot, positions, extra])


def _layout(n_bands: int, k: int, with_stats: bool) -> dict:
    return {"version": FEATURE_VERSION, "n_bands": n_bands, "k": k, "stats": with_stats}


def fit_ridge(x, y, lam: float, weights=None) -> dict[str, np.ndarray]:
    """Weighted ridge with unpenalized intercept: solves (Xc' W Xc + lam I) w = Xc' W yc."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    mu_x = sw @ x / sw.sum()
    mu_y = sw @ y / sw.sum()
    xc, yc = x - mu_x, y - mu_y
    gram = xc.T @ (sw[:, None] * xc) + lam * np.eye(x.shape[1])
    rhs = xc.T @ (sw * yc)
    if lam == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystemError("normal equations are singular with lambda=0; use a ridge penalty lambda > 0")
    try:
        w = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{exc}; use a ridge penalty lambda > 0") from exc
    return {"w": w, "b": np.array([mu_y - mu_x @ w])}


def _mlp_forward(params, x):
    z = x @ params["w1"] + params["b1"]
    h = np.maximum(z, 0.0)
    out = h @ params["w2"] + params["b2"]
    return out[:, 0], (z, h)


def mlp_loss_and_grad(params, x, y, sample_weights=None):
    """Weighted mean-squared error of the one-hidden-layer ReLU net and its gradient."""
    sw = np.ones(len(y)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    sw = sw / sw.sum()
    pred, (z, h) = _mlp_forward(params, x)
    r = pred - y
    loss = float(np.sum(sw * r**2))
    d_out = (2.0 * sw * r)[:, None]
    grads = {
        "w2": h.T @ d_out,
        "b2": d_out.sum(axis=0),
    }
    d_h = d_out @ params["w2"].T
    d_z = d_h * (z > 0)
    grads["w1"] = x.T @ d_z
    grads["b1"] = d_z.sum(axis=0)
    return loss, grads


def init_mlp(n_features: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(n_features, hidden)),
        "b1": np.full(hidden, 0.1),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 1)),
        "b2": np.zeros(1),
    }


def fit(x, y, config: SurrogateConfig = SurrogateConfig(), seed: int = 0, weights=None, layout=None) -> SurrogateModel:
    """Fit on a feature matrix. The MLP standardizes features and targets internally."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n_samples, n_features) matching y")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    if config.kind == "ridge":
        params = fit_ridge(x, y, config.lam, weights)
    else:
        rng = np.random.default_rng(seed)
        mu, sd = float(y.mean()), float(y.std()) or 1.0
        yt = (y - mu) / sd
        x_mu = x.mean(axis=0)
        x_sd = x.std(axis=0)
        x_sd[x_sd == 0] = 1.0
        xt = (x - x_mu) / x_sd
        params = init_mlp(x.shape[1], config.hidden, rng)
        for _ in range(config.epochs):
            _, grads = mlp_loss_and_grad(params, xt, yt, weights)
            for k in params:
                params[k] = params[k] - config.lr * grads[k]
        params["y_scale"] = np.array([mu, sd])
        params["x_shift"] = x_mu
        params["x_scale"] = x_sd
    model = SurrogateModel(config.kind, config.lam, params, layout or {})
    model.train_rmse = float(np.sqrt(np.mean((predict_features(model, x) - y) ** 2)))
    return model


def predict_features(model: SurrogateModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_features():
        raise ValueError(f"feature length {x.shape[1]} does not match model ({model.n_features()})")
    p = model.weights
    if model.kind == "ridge":
        return x @ p["w"] + p["b"][0]
    out, _ = _mlp_forward(p, (x - p["x_shift"]) / p["x_scale"])
    mu, sd = p["y_scale"]
    return out * sd + mu


def fit_samples(samples, n_bands: int, config: SurrogateConfig = SurrogateConfig(), cube=None, seed: int = 0, weights=None) -> SurrogateModel:
    """Featurize ``(bc, value)`` pairs and fit."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    ks = {len(bc) for bc, _ in samples}
    if len(ks) != 1:
        raise ValueError("all samples must select the same number of bands")
    stats = BandStats.of(cube) if cube is not None else None
    x = np.stack([featurize(bc, n_bands, stats=stats) for bc, _ in samples])
    y = np.array([v for _, v in samples], dtype=np.float64)
    return fit(x, y, config, seed, weights, _layout(n_bands, ks.pop(), cube is not None))


def _check_layout(model: SurrogateModel, bc, n_bands: int, with_stats: bool) -> None:
    lay = model.layout
    if not lay:
        return
    want = _layout(n_bands, len(bc), with_stats)
    if lay != want:
        raise ValueError(f"feature layout mismatch: model {lay}, request {want}")


def predict(model: SurrogateModel, bc: Sequence[int], n_bands: int, cube=None) -> float:
    _check_layout(model, bc, n_bands, cube is not None)
    return float(predict_features(model, featurize(bc, n_bands, cube))[0])


def predict_many(model: SurrogateModel, bcs, n_bands: int, cube=None) -> np.ndarray:
    bcs = list(bcs)
    if not bcs:
        return np.zeros(0)
    _check_layout(model, bcs[0], n_bands, cube is not None)
    stats = BandStats.of(cube) if cube is not None else None
    x = np.stack([featurize(bc, n_bands, stats=stats) for bc in bcs])
    return predict_features(model, x)
