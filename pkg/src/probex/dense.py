"""Dense linear expert and its constructive links to probing networks.

The dense expert is a full 3-way tensor ``W`` (d_W x d_H x d_Y) with
``y_k = sum_ij W[i, j, k] X[i, j]``. Two constructions relate it to probing:

* :func:`prop1_construct` builds a general linear probing network (identity
  probes and head, one full encoder per probe) computing the same map as any
  ``W``;
* :func:`prop2_tucker_expand` expands a linear probing expert into the dense
  tensor it implicitly represents, a Tucker product of its factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UnsupportedError
from .linalg import contract3
from .model import ProbeXParams

MAX_PROP1_ENTRIES = 10**6


@dataclass
class DenseExpertParams:
    W: np.ndarray  # d_W x d_H x d_Y

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 3:
            raise DimensionError(f"dense expert tensor must be 3-D, got {self.W.shape}")

    @property
    def param_count(self) -> int:
        return self.W.size


def dense_forward(w: DenseExpertParams | np.ndarray, x) -> np.ndarray:
    W = w.W if isinstance(w, DenseExpertParams) else w
    return contract3(W, x)


def dense_forward_batch(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != W.shape[:2]:
        raise DimensionError(f"tensor {W.shape} does not contract with matrices {X.shape[1:]}")
    return X.reshape(X.shape[0], -1) @ W.reshape(-1, W.shape[2])


def dense_backward_batch(W: np.ndarray, X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """dL/dW for upstream ``G`` (N x d_Y): the sum over samples of ``X (x) g``."""
    X = np.asarray(X, dtype=np.float64)
    return (X.reshape(X.shape[0], -1).T @ G).reshape(W.shape)


@dataclass
class ProbingNet:
    """General linear probing network ``y = T sum_l E[l] X u_l``."""

    U: np.ndarray  # d_H x r_U
    E: np.ndarray  # r_U x d_Y' x d_W, one full encoder per probe
    T: np.ndarray  # d_Y x d_Y'

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.E.shape[2], self.U.shape[0]):
            raise DimensionError(f"expected {(self.E.shape[2], self.U.shape[0])}, got {x.shape}")
        Z = x @ self.U  # d_W x r_U, column l is X u_l
        e = np.einsum("lkw,wl->k", self.E, Z)
        return self.T @ e


def prop1_construct(w: DenseExpertParams | np.ndarray) -> ProbingNet:
    """Probing network equal to the dense expert: ``U = I``, ``T = I``, ``E[l] = W[:, l, :]^T``."""
    W = w.W if isinstance(w, DenseExpertParams) else np.asarray(w, dtype=np.float64)
    if W.size > MAX_PROP1_ENTRIES:
        raise ConfigError(
            f"construction materialises {W.size} entries (> {MAX_PROP1_ENTRIES}); it is meant for toy sizes"
        )
    d_W, d_H, d_Y = W.shape
    E = np.ascontiguousarray(W.transpose(1, 2, 0))  # l, k, i
    return ProbingNet(U=np.eye(d_H), E=E, T=np.eye(d_Y))


def prop2_tucker_expand(p: ProbeXParams) -> DenseExpertParams:
    """Dense tensor ``W[i,j,k] = sum_nml T[k,n] M[l][n,m] V[i,m] U[j,l]`` of a linear expert."""
    if p.activation != "identity":
        raise UnsupportedError("Tucker expansion only exists for the linear (identity activation) expert")
    V = p.V
    for h in p.hidden:
        # stacked linear layers fold into the projection
        V = V @ h.T
    W = np.einsum("kn,lnm,im,jl->ijk", p.T, p.M, V, p.U, optimize=True)
    return DenseExpertParams(W)


def init_dense(d_W: int, d_H: int, d_Y: int, rng: np.random.Generator) -> DenseExpertParams:
    a = 1.0 / np.sqrt(d_W * d_H)
    return DenseExpertParams(rng.uniform(-a, a, (d_W, d_H, d_Y)))


def train_dense(zoo, layer: str, cfg, table=None):
    """Train the dense expert with the shared trainer; returns ``(model, history)``."""
    from .trainer import train

    return train("dense", zoo, layer, cfg, table=table)
