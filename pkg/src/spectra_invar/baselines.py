"""Comparison models: NIPALS partial least squares and the predictor-only MLP."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import lisa
from .tensor import load_arrays, save_arrays


class DegenerateDataError(ValueError):
    pass


@dataclass
class PlsModel:
    n_components: int
    x_mean: np.ndarray
    y_mean: np.ndarray
    weights: np.ndarray  # [features, k]
    loadings: np.ndarray  # [features, k]
    y_loadings: np.ndarray  # [targets, k]
    coef: np.ndarray  # [features, targets]

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.x_mean) @ self.coef + self.y_mean

    def save(self, path):
        save_arrays(path, {"x_mean": self.x_mean, "y_mean": self.y_mean, "weights": self.weights,
                           "loadings": self.loadings, "y_loadings": self.y_loadings, "coef": self.coef},
                    {"kind": "pls", "n_components": self.n_components})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "pls":
            raise ValueError(f"{path} is not a PLS checkpoint")
        return cls(meta["n_components"], **arrays)


def pls_fit(x, y, k=10, max_iter=500, tol=1e-8):
    """PLS2 by NIPALS with per-component deflation of both blocks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, d = x.shape
    if n < 2:
        raise ValueError("PLS needs at least two samples")
    if k < 1:
        raise ValueError("PLS needs at least one component")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("PLS input contains NaN or Inf")
    if k > min(n - 1, d):
        raise ValueError(f"n_components={k} exceeds min(samples-1, features)={min(n - 1, d)}")
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xr, yr = x - x_mean, y - y_mean
    if not np.any(xr.std(axis=0) > 0):
        raise DegenerateDataError("X has zero variance")
    ws, ps, qs = [], [], []
    for _ in range(k):
        u = yr[:, np.argmax(yr.var(axis=0))].copy()
        if not np.any(u):
            break
        w = np.zeros(d)
        for _ in range(max_iter):
            w_new = xr.T @ u
            norm = np.linalg.norm(w_new)
            if norm == 0:
                break
            w_new /= norm
            t = xr @ w_new
            q = yr.T @ t / (t @ t)
            u = yr @ q / (q @ q)
            done = np.linalg.norm(w_new - w) < tol
            w = w_new
            if done:
                break
        t = xr @ w
        tt = t @ t
        if tt <= 1e-12 * max(1.0, np.sum(x_mean ** 2)):
            break
        p = xr.T @ t / tt
        q = yr.T @ t / tt
        xr = xr - np.outer(t, p)
        yr = yr - np.outer(t, q)
        ws.append(w)
        ps.append(p)
        qs.append(q)
    if not ws:
        raise DegenerateDataError("no PLS component could be extracted")
    W, P, Q = np.array(ws).T, np.array(ps).T, np.array(qs).T
    coef = W @ np.linalg.solve(P.T @ W, Q.T)
    return PlsModel(len(ws), x_mean, y_mean, W, P, Q, coef)


def mean_spectra(x):
    """SG-filtered patches [N, B, 8, 8] -> mean spectrum per patch [N, B]."""
    return np.asarray(x, dtype=np.float64).mean(axis=(2, 3))


def predictor_only_train(cfg, x, brix, acid, is_grape, domain_of_each):
    """Task heads on flattened SG-filtered patches; no autoencoder, no auxiliary losses."""
    cfg = replace(cfg, alpha=0.0, beta=0.0, gamma=0.0)
    return lisa.train(cfg, x, brix, acid, is_grape, domain_of_each, body=False, kind="predictor")


def predictor_only_predict(model, x):
    return model.predict(x)


def load_checkpoint(path):
    """Load any model checkpoint written by the CLI; returns (kind, model)."""
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        if json.loads(sidecar.read_text()).get("kind") == "weight":
            from .pipeline import WeightModel
            return "weight", WeightModel.load(path)
        model = lisa.LisaModel.load(path)
        return model.kind, model
    return "pls", PlsModel.load(path)
