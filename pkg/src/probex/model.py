"""Probing experts: forward pass, analytic gradients and parameter accounting.

For a weight matrix ``X`` (d_W x d_H) the expert computes::

    z_l = X u_l                 probe responses, l = 1..r_U
    p_l = V^T z_l               shared projection to r_V
    e_l = M_l act(p_l)          per-probe encoder, M_l is r_T x r_V
    e   = sum_l e_l             model encoding
    y   = T e                   prediction head, T is d_Y x r_T

``act`` is the identity (linear expert) or ReLU. With ``depth > 1`` extra
shared r_V x r_V layers, each followed by ``act``, sit between the projection
and the per-probe encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .tensorio import load_tensor, save_tensor

ACTIVATIONS = ("identity", "relu")


@dataclass(frozen=True)
class ProbeXDims:
    d_W: int
    d_H: int
    d_Y: int
    r_U: int = 128
    r_V: int = 128
    r_T: int = 128
    depth: int = 1

    def validate(self) -> None:
        for name in ("d_W", "d_H", "d_Y", "r_U", "r_V", "r_T", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")

    def param_count(self) -> int:
        return (
            self.d_H * self.r_U
            + self.d_W * self.r_V
            + self.r_U * self.r_V * self.r_T
            + self.r_T * self.d_Y
            + (self.depth - 1) * self.r_V * self.r_V
        )


def dense_param_count(d_W: int, d_H: int, d_Y: int) -> int:
    return d_W * d_H * d_Y


@dataclass
class ProbeXParams:
    U: np.ndarray  # d_H x r_U, columns are probes
    V: np.ndarray  # d_W x r_V
    M: np.ndarray  # r_U x r_T x r_V
    T: np.ndarray  # d_Y x r_T
    activation: str = "relu"
    hidden: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        d_H, r_U = self.U.shape
        d_W, r_V = self.V.shape
        d_Y, r_T = self.T.shape
        if self.M.shape != (r_U, r_T, r_V):
            raise DimensionError(f"M has shape {self.M.shape}, expected {(r_U, r_T, r_V)}")
        for h in self.hidden:
            if h.shape != (r_V, r_V):
                raise DimensionError(f"hidden layer has shape {h.shape}, expected {(r_V, r_V)}")

    @property
    def dims(self) -> ProbeXDims:
        return ProbeXDims(
            d_W=self.V.shape[0],
            d_H=self.U.shape[0],
            d_Y=self.T.shape[0],
            r_U=self.U.shape[1],
            r_V=self.V.shape[1],
            r_T=self.T.shape[1],
            depth=len(self.hidden) + 1,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"U": self.U, "V": self.V, "M": self.M, "T": self.T}
        out.update({f"H{i}": h for i, h in enumerate(self.hidden)})
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> ProbeXParams:
        hidden = [arrays[f"H{i}"] for i in range(len(self.hidden))]
        return ProbeXParams(arrays["U"], arrays["V"], arrays["M"], arrays["T"], self.activation, hidden)

    def copy(self) -> ProbeXParams:
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


def param_count(p: ProbeXParams) -> int:
    return sum(a.size for a in p.arrays().values())


def init_params(dims: ProbeXDims, rng: np.random.Generator, activation: str = "relu") -> ProbeXParams:
    """Uniform fan-in initialisation, ``a = 1/sqrt(fan_in)`` for each matrix."""
    dims.validate()

    def uni(fan_in, shape):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, shape)

    U = uni(dims.d_H, (dims.d_H, dims.r_U))
    V = uni(dims.d_W, (dims.d_W, dims.r_V))
    M = uni(dims.r_V, (dims.r_U, dims.r_T, dims.r_V))
    T = uni(dims.r_T, (dims.d_Y, dims.r_T))
    hidden = [uni(dims.r_V, (dims.r_V, dims.r_V)) for _ in range(dims.depth - 1)]
    return ProbeXParams(U, V, M, T, activation, hidden)


@dataclass
class Encoding:
    e: np.ndarray
    per_probe: np.ndarray | None = None  # r_U x r_T, rows sum to e


def _act(p: ProbeXParams, a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) if p.activation == "relu" else a


def _as_batch(p: ProbeXParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    d_W, d_H = p.V.shape[0], p.U.shape[0]
    if X.ndim != 3 or X.shape[1:] != (d_W, d_H):
        raise DimensionError(f"expected weight matrices of shape {(d_W, d_H)}, got {X.shape[-2:] if X.ndim >= 2 else X.shape}")
    return X


def _flat_M(p: ProbeXParams) -> np.ndarray:
    r_U, r_T, r_V = p.M.shape
    return p.M.transpose(1, 0, 2).reshape(r_T, r_U * r_V)


def forward_batch(p: ProbeXParams, X) -> tuple[np.ndarray, dict]:
    """Forward pass over a stack of matrices (N x d_W x d_H); returns ``(y, cache)``."""
    X = _as_batch(p, X)
    n = X.shape[0]
    Z = X @ p.U  # n, d_W, r_U
    pre = [p.V.T @ Z]  # n, r_V, r_U
    acts = [_act(p, pre[0])]
    for h in p.hidden:
        pre.append(h @ acts[-1])
        acts.append(_act(p, pre[-1]))
    At = acts[-1].transpose(0, 2, 1).reshape(n, -1)  # n, r_U*r_V ordered (l, v)
    e = At @ _flat_M(p).T
    y = e @ p.T.T
    return y, {"X": X, "Z": Z, "pre": pre, "acts": acts, "At": At, "e": e}


def encode_batch(p: ProbeXParams, X) -> np.ndarray:
    return forward_batch(p, X)[1]["e"]


def backward_batch(p: ProbeXParams, cache: dict, G) -> dict[str, np.ndarray]:
    """Gradients of ``sum_n <G[n], y[n]>`` w.r.t. every parameter array."""
    X, Z, e, At = cache["X"], cache["Z"], cache["e"], cache["At"]
    G = np.asarray(G, dtype=np.float64)
    n = X.shape[0]
    if G.shape != (n, p.T.shape[0]):
        raise DimensionError(f"upstream gradient has shape {G.shape}, expected {(n, p.T.shape[0])}")
    r_U, r_T, r_V = p.M.shape
    grads = {"T": G.T @ e}
    de = G @ p.T
    grads["M"] = (de.T @ At).reshape(r_T, r_U, r_V).transpose(1, 0, 2)
    dA = (de @ _flat_M(p)).reshape(n, r_U, r_V).transpose(0, 2, 1)
    pre, acts = cache["pre"], cache["acts"]
    for k in range(len(p.hidden), 0, -1):
        dP = dA * (pre[k] > 0) if p.activation == "relu" else dA
        grads[f"H{k - 1}"] = np.einsum("nvl,nwl->vw", dP, acts[k - 1])
        dA = p.hidden[k - 1].T @ dP
    dP = dA * (pre[0] > 0) if p.activation == "relu" else dA
    d_W = p.V.shape[0]
    grads["V"] = Z.transpose(1, 0, 2).reshape(d_W, -1) @ dP.transpose(1, 0, 2).reshape(r_V, -1).T
    dZ = p.V @ dP  # n, d_W, r_U
    d_H = p.U.shape[0]
    grads["U"] = X.transpose(2, 0, 1).reshape(d_H, -1) @ dZ.reshape(-1, r_U)
    return grads


def forward(p: ProbeXParams, x, keep_per_probe: bool = False) -> tuple[Encoding, np.ndarray]:
    """Single weight matrix in, ``(encoding, y)`` out."""
    y, cache = forward_batch(p, x)
    per_probe = None
    if keep_per_probe:
        a = cache["acts"][-1][0]  # r_V, r_U
        per_probe = np.einsum("ltv,vl->lt", p.M, a)
    return Encoding(cache["e"][0], per_probe), y[0]


def backward(p: ProbeXParams, x, upstream) -> dict[str, np.ndarray]:
    _, cache = forward_batch(p, x)
    return backward_batch(p, cache, np.asarray(upstream, dtype=np.float64)[None])


# ---------------------------------------------------------------------------
# several layers, one shared head over the concatenated encodings
#
# A shared head T_shared = [T_1 | T_2 | ...] over e_concat = [e_1; e_2; ...]
# gives y = sum_k T_k e_k, so each layer's params carry its own slice of the
# shared head and gradients separate per layer.


def shared_head(params: dict[str, ProbeXParams]) -> np.ndarray:
    return np.hstack([p.T for p in params.values()])


def _layer_inputs(params: dict[str, ProbeXParams], layers: dict) -> list:
    missing = [n for n in params if n not in layers]
    if missing:
        raise ConfigError(f"record lacks layers {missing}; available: {sorted(layers)}")
    return [layers[n] for n in params]


def forward_multilayer(params: dict[str, ProbeXParams], layers: dict) -> tuple[np.ndarray, np.ndarray]:
    """``layers`` maps layer name to a matrix (or stack of matrices).

    Returns ``(e_concat, y)``; a single matrix per layer yields 1-D outputs.
    """
    inputs = _layer_inputs(params, layers)
    single = np.ndim(inputs[0]) == 2
    es, y = [], None
    for p, x in zip(params.values(), inputs):
        yk, cache = forward_batch(p, x)
        es.append(cache["e"])
        y = yk if y is None else y + yk
    e = np.concatenate(es, axis=1)
    return (e[0], y[0]) if single else (e, y)


def forward_multilayer_batch(params: dict[str, ProbeXParams], layers: dict):
    inputs = _layer_inputs(params, layers)
    caches, y = {}, None
    for (name, p), x in zip(params.items(), inputs):
        yk, caches[name] = forward_batch(p, x)
        y = yk if y is None else y + yk
    return y, caches


def backward_multilayer_batch(params: dict[str, ProbeXParams], caches: dict, G) -> dict[str, dict]:
    return {name: backward_batch(p, caches[name], G) for name, p in params.items()}


# ---------------------------------------------------------------------------
# persistence: one WZT1 file per array plus a JSON sidecar


def save_params(p: ProbeXParams, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = p.arrays()
    for name, a in arrays.items():
        save_tensor(path / f"{name}.wzt", a)
    d = p.dims
    sidecar = {
        "kind": "probex",
        "activation": p.activation,
        "dims": {k: getattr(d, k) for k in ("d_W", "d_H", "d_Y", "r_U", "r_V", "r_T", "depth")},
        "arrays": {k: list(a.shape) for k, a in arrays.items()},
    }
    if extra:
        sidecar.update(extra)
    (path / "params.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


def load_params(path) -> ProbeXParams:
    path = Path(path)
    try:
        meta = json.loads((path / "params.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no params.json") from exc
    arrays = {k: load_tensor(path / f"{k}.wzt", shape) for k, shape in meta["arrays"].items()}
    depth = int(meta["dims"].get("depth", 1))
    hidden = [arrays[f"H{i}"] for i in range(depth - 1)]
    return ProbeXParams(arrays["U"], arrays["V"], arrays["M"], arrays["T"], meta["activation"], hidden)
