"""Mixture of tree experts: cluster a population into Model Trees, route, dispatch."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError
from .tensorio import load_tensor, save_tensor, to_f32
from .zoo import DEFAULT_LAYER

log = logging.getLogger(__name__)


@dataclass
class RouterModel:
    layer_name: str
    centers: list[np.ndarray]
    heights: list[float] = field(default_factory=list)  # merge heights, ascending
    method: str = "single"
    members: list[list[str]] = field(default_factory=list)  # model ids per cluster

    def __post_init__(self) -> None:
        if not self.centers:
            raise ConfigError("router needs at least one center")
        shape = self.centers[0].shape
        if any(c.shape != shape for c in self.centers):
            raise DimensionError("router centers differ in shape")

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.centers[0].shape

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, c in enumerate(self.centers):
            save_tensor(path / f"center{i}.wzt", c)
        meta = {
            "k": self.k,
            "layer_name": self.layer_name,
            "method": self.method,
            "center_shape": list(self.shape),
            "heights": [float(h) for h in self.heights],
            "members": self.members,
        }
        (path / "router.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> RouterModel:
        path = Path(path)
        try:
            meta = json.loads((path / "router.json").read_text())
        except FileNotFoundError as exc:
            raise FormatError(f"{path}: no router.json") from exc
        centers = [load_tensor(path / f"center{i}.wzt", meta["center_shape"]) for i in range(meta["k"])]
        return cls(meta["layer_name"], centers, meta["heights"], meta["method"], meta["members"])


def largest_gap_k(heights) -> int:
    """Cluster count obtained by cutting the dendrogram in its widest height gap.

    After ``j`` merges of ``n`` points there are ``n - j`` clusters; the cut
    falls between merge ``j`` and ``j + 1`` where that gap is largest. Equal
    gaps resolve to the lower cut (more clusters).
    """
    h = np.asarray(heights, dtype=np.float64)
    n = h.size + 1
    if n < 2:
        raise ConfigError("need at least two models to cluster")
    if h[-1] <= 0:
        raise DegenerateInputError("all models have identical weights; the dendrogram has no gap")
    if n == 2:
        return 2
    gaps = np.diff(h)
    if gaps.max() <= 0:
        raise DegenerateInputError("all merge heights are equal; no gap to cut")
    return n - (int(np.argmax(gaps)) + 1)


def cluster_labels(Z: np.ndarray, k: int) -> np.ndarray:
    """Flat labels 0..k-1 numbered by first appearance in input order."""
    raw = fcluster(Z, t=k, criterion="maxclust")
    order = {}
    for lab in raw:
        order.setdefault(lab, len(order))
    labels = np.array([order[lab] for lab in raw])
    if len(order) != k:
        raise DegenerateInputError(f"dendrogram cannot be cut into exactly {k} clusters (ties in merge heights)")
    return labels


def fit_router_records(records, layer_name: str = DEFAULT_LAYER, k: int | None = None, method: str = "single") -> RouterModel:
    if len(records) < 2:
        raise ConfigError(f"need at least two models to fit a router, got {len(records)}")
    X = np.stack([r.layer(layer_name).ravel() for r in records]).astype(np.float64)
    Z = linkage(pdist(X), method=method)
    heights = Z[:, 2]
    if k is None:
        k = largest_gap_k(heights)
    elif not 1 <= k <= len(records):
        raise ConfigError(f"k must lie in [1, {len(records)}], got {k}")
    labels = cluster_labels(Z, k)
    shape = records[0].layer(layer_name).shape
    centers = [to_f32(X[labels == c].mean(axis=0).reshape(shape)) for c in range(k)]
    for i in range(k):
        for j in range(i):
            if np.array_equal(centers[i], centers[j]):
                raise DegenerateInputError(f"clusters {j} and {i} share a center")
    members = [[r.model_id for r, lab in zip(records, labels) if lab == c] for c in range(k)]
    return RouterModel(layer_name, centers, [float(h) for h in heights], method, members)


def fit_router(zoo, layer_name: str = DEFAULT_LAYER, split: str = "train", k: int | None = None, method: str = "single") -> RouterModel:
    """Single-linkage clustering of one layer; ``k`` from the largest merge-height gap unless given."""
    return fit_router_records(zoo.split(split), layer_name, k, method)


def route(router: RouterModel, x) -> int:
    """Index of the nearest center in Frobenius norm; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != router.shape:
        raise DimensionError(f"matrix of shape {x.shape} cannot be routed against centers of shape {router.shape}")
    d = [np.linalg.norm(x - c) for c in router.centers]
    return int(np.argmin(d))


def route_records(router: RouterModel, records) -> np.ndarray:
    return np.array([route(router, r.layer(router.layer_name)) for r in records], dtype=np.int64)


def assignment_accuracy(router: RouterModel, records, reference) -> float:
    """Fraction of ``records`` routed to a cluster whose members mostly share their tree.

    Each cluster is labelled with the majority ``tree_id`` of its members, looked up
    in ``reference`` (a zoo or an iterable of records covering the fitted models).
    """
    by_id = {r.model_id: r for r in getattr(reference, "records", reference)}
    routed = route_records(router, records)
    return float(np.mean([cluster_tree(router, c, by_id) == r.tree_id for c, r in zip(routed, records)]))


def cluster_tree(router: RouterModel, c: int, by_id: dict) -> str | None:
    trees = [by_id[m].tree_id for m in router.members[c] if m in by_id]
    if not trees:
        return None
    vals, counts = np.unique(trees, return_counts=True)
    return str(vals[np.argmax(counts)])


# ---------------------------------------------------------------------------
# mixture of experts


@dataclass
class MoEModel:
    router: RouterModel
    experts: list  # TrainedMetanet per cluster

    def predict(self, records) -> np.ndarray:
        if not records:
            raise ConfigError("nothing to predict")
        routed = route_records(self.router, records)
        out = None
        for c in np.unique(routed):
            idx = np.flatnonzero(routed == c)
            y = self.experts[c].predict([records[i] for i in idx])
            if out is None:
                out = np.zeros((len(records), y.shape[1]))
            out[idx] = y
        return out

    def save(self, path) -> Path:
        path = Path(path)
        self.router.save(path / "router")
        for i, e in enumerate(self.experts):
            e.save(path / f"expert{i}")
        (path / "moe.json").write_text(json.dumps({"k": self.router.k}, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> MoEModel:
        from .trainer import TrainedMetanet

        path = Path(path)
        router = RouterModel.load(path / "router")
        return cls(router, [TrainedMetanet.load(path / f"expert{i}") for i in range(router.k)])


def moe_train(
    zoo,
    kind: str = "probex",
    layers=None,
    cfg=None,
    router: RouterModel | None = None,
    table=None,
    min_train_size: int = 2,
    only: list[int] | None = None,
) -> tuple[MoEModel, list[list[dict]]]:
    """Fit (or reuse) a router, then one expert per cluster on the records routed to it.

    Without an explicit ``router`` the clustering runs on the first expert layer.

    Expert ``c`` is trained with seed ``cfg.seed + c``, so with a single cluster the
    mixture is the plain :func:`~probex.trainer.train` model. ``only`` restricts
    training to the listed clusters (the others are left as ``None``).
    """
    from .trainer import TrainConfig, task_records, train

    cfg = cfg or TrainConfig()
    layers = layers or [DEFAULT_LAYER]
    task = "align" if cfg.loss == "contrastive_align" else "classify"
    if router is None:
        router = fit_router(zoo, layers[0])
    tr = task_records(zoo, "train", task)
    va = task_records(zoo, "val", task)
    r_tr, r_va = route_records(router, tr), route_records(router, va)
    sizes = np.bincount(r_tr, minlength=router.k)
    small = [c for c in range(router.k) if sizes[c] < min_train_size]
    if small:
        raise ConfigError(f"clusters {small} have fewer than {min_train_size} training records ({sizes.tolist()})")
    experts, histories = [], []
    for c in range(router.k):
        if only is not None and c not in only:
            experts.append(None)
            histories.append([])
            continue
        c_tr = [r for r, a in zip(tr, r_tr) if a == c]
        c_va = [r for r, a in zip(va, r_va) if a == c]
        if not c_va:
            log.warning("cluster %d has no validation records; selecting epochs on its training records", c)
            c_va = c_tr
        model, hist = train(kind, zoo, layers, replace(cfg, seed=cfg.seed + c), table, c_tr, c_va)
        experts.append(model)
        histories.append(hist)
    return MoEModel(router, experts), histories


def moe_predict(moe: MoEModel, records) -> np.ndarray:
    return moe.predict(records)
