"""StatNN: per-layer summary statistics and small heads trained on them."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .linalg import _sorted_quantile

QUANTILE_LEVELS = (0.10, 0.25, 0.50, 0.75, 0.90)
N_STATS = 2 + len(QUANTILE_LEVELS)


def layer_stats(w) -> np.ndarray:
    """Mean, variance and fixed quantiles of all entries of one layer.

    Everything is computed from the sorted entries, so the result depends only
    on the multiset of values and is bit-identical under any entry permutation.
    """
    s = np.sort(np.asarray(w, dtype=np.float64).ravel())
    mean = s.sum() / s.size
    var = ((s - mean) ** 2).sum() / s.size
    return np.array([mean, var, *(_sorted_quantile(s, q) for q in QUANTILE_LEVELS)])


def statnn_features(record, layers) -> np.ndarray:
    if isinstance(layers, str):
        layers = [layers]
    if not layers:
        raise ConfigError("select at least one layer for StatNN features")
    return np.concatenate([layer_stats(record.layer(name)) for name in layers])


def feature_matrix(records, layers) -> np.ndarray:
    return np.stack([statnn_features(r, layers) for r in records])


def export_features_csv(records, layers, path) -> None:
    feats = feature_matrix(records, layers)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", *(f"f{i + 1}" for i in range(feats.shape[1]))])
        for r, f in zip(records, feats):
            w.writerow([r.model_id, *(repr(float(v)) for v in f)])


# ---------------------------------------------------------------------------
# heads


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray) -> Standardizer:
        sd = feats.std(axis=0)
        return cls(feats.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) / self.scale


def mlp_hidden_for_budget(n_features: int, d_out: int, budget: int) -> int:
    """Hidden width whose one-hidden-layer MLP parameter count is closest to ``budget``."""
    return max(1, int(round((budget - d_out) / (n_features + 1 + d_out))))


def head_param_count(params: dict[str, np.ndarray]) -> int:
    return sum(a.size for a in params.values())


def init_head(variant: str, n_features: int, d_out: int, rng, hidden: int | None = None) -> dict[str, np.ndarray]:
    def uni(fan_in, shape):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, shape)

    if variant == "linear":
        return {"W": uni(n_features, (d_out, n_features)), "b": uni(n_features, d_out)}
    if variant == "mlp":
        if not hidden:
            raise ConfigError("mlp head needs a hidden width")
        return {
            "W1": uni(n_features, (hidden, n_features)),
            "b1": uni(n_features, hidden),
            "W2": uni(hidden, (d_out, hidden)),
            "b2": uni(hidden, d_out),
        }
    raise ConfigError(f"unknown StatNN head variant {variant!r}")


def head_forward(params: dict[str, np.ndarray], F: np.ndarray):
    if "W" in params:
        return F @ params["W"].T + params["b"], {"F": F}
    pre = F @ params["W1"].T + params["b1"]
    h = np.maximum(pre, 0.0)
    return h @ params["W2"].T + params["b2"], {"F": F, "pre": pre, "h": h}


def head_backward(params: dict[str, np.ndarray], cache: dict, G: np.ndarray) -> dict[str, np.ndarray]:
    if "W" in params:
        return {"W": G.T @ cache["F"], "b": G.sum(axis=0)}
    dh = (G @ params["W2"]) * (cache["pre"] > 0)
    return {
        "W2": G.T @ cache["h"],
        "b2": G.sum(axis=0),
        "W1": dh.T @ cache["F"],
        "b1": dh.sum(axis=0),
    }


def statnn_head_train(features, targets, variant: str = "linear", cfg=None, budget: int | None = None, table=None):
    """Fit a StatNN head on a precomputed feature matrix.

    ``targets`` is a binary label matrix (multi-label loss) or, when ``table``
    is given, a list of class names (contrastive alignment loss). Returns
    ``(head_params, standardizer, history)``.
    """
    from .trainer import TrainConfig, fit_arrays, bce_loss_batch, contrastive_loss_batch

    cfg = cfg or TrainConfig()
    F = np.asarray(features, dtype=np.float64)
    std = Standardizer.fit(F)
    Fs = std(F)
    rng = np.random.default_rng(cfg.seed)
    if table is None:
        Y = np.asarray(targets, dtype=np.float64)
        d_out = Y.shape[1]
        loss_fn = lambda y: bce_loss_batch(y, Y)  # noqa: E731
    else:
        idx = np.array([table.index(c) for c in targets])
        d_out = table.dim
        loss_fn = lambda y: contrastive_loss_batch(y, idx, table.vectors, cfg.temperature)  # noqa: E731
    hidden = None
    if variant == "mlp":
        hidden = mlp_hidden_for_budget(Fs.shape[1], d_out, budget or 10_000)
    params = init_head(variant, Fs.shape[1], d_out, rng, hidden)

    def step(p):
        y, cache = head_forward(p, Fs)
        loss, G = loss_fn(y)
        return loss, head_backward(p, cache, G)

    params, history = fit_arrays(params, step, cfg)
    return params, std, history
