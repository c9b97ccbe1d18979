"""Losses, Adam, and the epoch loop with validation-based model selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines
from .dense import dense_backward_batch, dense_forward_batch, init_dense
from .errors import ConfigError, DataError, DegenerateInputError, DimensionError, FormatError, NumericError
from .linalg import make_rng
from .model import (
    ProbeXDims,
    ProbeXParams,
    backward_multilayer_batch,
    forward_multilayer_batch,
    init_params,
)
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

METANET_KINDS = ("probex", "probex-linear", "dense", "statnn-linear", "statnn-mlp")
LOSSES = ("multilabel_bce", "contrastive_align")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 500
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    loss: str = "multilabel_bce"
    temperature: float = 0.07
    ranks: tuple[int, int, int] = (128, 128, 128)  # r_U, r_V, r_T
    depth: int = 1
    statnn_budget: int | None = None  # None: match the probing expert's parameter count
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.ranks = tuple(int(r) for r in self.ranks)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if len(self.ranks) != 3 or min(self.ranks) < 1:
            raise ConfigError(f"ranks must be three positive integers, got {self.ranks}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        if "ranks" in known:
            known["ranks"] = tuple(known["ranks"])
        return cls(**known)


# ---------------------------------------------------------------------------
# embedding tables


class EmbeddingTable:
    """Class name -> unit vector. Rows are kept in insertion order."""

    def __init__(self, names, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        names = list(names)
        if vectors.ndim != 2 or vectors.shape[0] != len(names):
            raise DimensionError(f"{len(names)} names but vectors of shape {vectors.shape}")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate class names in embedding table")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError("embedding table contains a zero vector")
        self.names = names
        self.vectors = vectors / norms[:, None]
        self._index = {n: i for i, n in enumerate(names)}

    @classmethod
    def from_dict(cls, d: dict) -> EmbeddingTable:
        return cls(list(d), [d[k] for k in d])

    @classmethod
    def load(cls, path) -> EmbeddingTable:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"{path}: embedding table not found") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        names = list(raw)
        vecs = np.asarray([raw[k] for k in names], dtype=np.float64)
        dev = np.abs(np.linalg.norm(vecs, axis=1) - 1.0)
        if np.any(dev > 1e-3):
            log.warning("%s: %d embeddings deviate from unit norm by >1e-3; normalising", path, int((dev > 1e-3).sum()))
        return cls(names, vecs)

    def save(self, path) -> None:
        payload = {n: [float(x) for x in v] for n, v in zip(self.names, self.vectors)}
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"class {name!r} is not in the embedding table") from None

    def subset(self, names) -> EmbeddingTable:
        return EmbeddingTable(list(names), self.vectors[[self.index(n) for n in names]])


# ---------------------------------------------------------------------------
# losses


def _sigmoid(y):
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def loss_multilabel_bce(y, bits) -> tuple[float, np.ndarray]:
    """Mean sigmoid cross-entropy over classes, and its gradient w.r.t. the logits."""
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(bits, dtype=np.float64)
    if y.shape != b.shape:
        raise DimensionError(f"logits {y.shape} and labels {b.shape} differ")
    loss = float(np.mean(np.logaddexp(0.0, y) - b * y))
    return loss, (_sigmoid(y) - b) / y.size


def bce_loss_batch(Y, B) -> tuple[float, np.ndarray]:
    """Batch version: mean over samples of :func:`loss_multilabel_bce`."""
    return loss_multilabel_bce(Y, B)


def contrastive_loss_batch(E, targets, table_vectors, tau: float) -> tuple[float, np.ndarray]:
    """Class-softmax over cosine similarities / tau, averaged over the batch."""
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[0]
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("mapped encoding has zero norm")
    Eh = E / norms
    logits = Eh @ table_vectors.T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, targets]))
    P = np.exp(shifted - lse[:, None])
    P[rows, targets] -= 1.0
    dEh = (P @ table_vectors) / (tau * n)
    dE = (dEh - Eh * np.sum(Eh * dEh, axis=1, keepdims=True)) / norms
    return loss, dE


def loss_contrastive_align(e_mapped, target_class: str, table: EmbeddingTable, tau: float = 0.07):
    e = np.asarray(e_mapped, dtype=np.float64)
    loss, g = contrastive_loss_batch(e[None], np.array([table.index(target_class)]), table.vectors, tau)
    return loss, g[0]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple[dict, AdamState]:
    """One Adam update with L2 weight decay folded into the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = cfg.beta1 * state.m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1.0 - cfg.beta2) * (g * g)
        new_p[name] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def fit_arrays(params: dict, step, cfg: TrainConfig) -> tuple[dict, list[float]]:
    """Full-batch Adam for ``cfg.epochs`` epochs; ``step(params) -> (loss, grads)``."""
    state = AdamState()
    losses = []
    for _ in range(cfg.epochs):
        loss, grads = step(params)
        if not np.isfinite(loss):
            raise NumericError("training loss became non-finite")
        losses.append(loss)
        params, state = adam_step(params, grads, state, cfg)
    return params, losses


# ---------------------------------------------------------------------------
# metanetworks behind one interface


class Metanet:
    """Maps a list of :class:`~probex.zoo.ModelRecord` to outputs of width ``d_out``.

    Parameters are a flat ``dict[str, ndarray]`` so the optimiser stays generic.
    """

    kind: str

    def __init__(self, layers: list[str], d_out: int):
        self.layers = list(layers)
        self.d_out = d_out

    def inputs(self, records):
        raise NotImplementedError

    def init(self, rng) -> dict:
        raise NotImplementedError

    def forward(self, params, inputs):
        raise NotImplementedError

    def backward(self, params, cache, G) -> dict:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind, "layers": self.layers, "d_out": self.d_out}


def _stack_layer(records, name):
    return np.stack([r.layer(name) for r in records])


class ProbeXMetanet(Metanet):
    def __init__(self, layers, d_out, shapes, ranks=(128, 128, 128), activation="relu", depth=1):
        super().__init__(layers, d_out)
        self.kind = "probex" if activation == "relu" else "probex-linear"
        self.activation = activation
        self.ranks = tuple(ranks)
        self.depth = depth
        self.shapes = {n: tuple(shapes[n]) for n in self.layers}

    def dims(self, name) -> ProbeXDims:
        d_W, d_H = self.shapes[name]
        return ProbeXDims(d_W, d_H, self.d_out, *self.ranks, depth=self.depth)

    def unflatten(self, params) -> dict[str, ProbeXParams]:
        out = {}
        for n in self.layers:
            arrays = {k.split("/", 1)[1]: v for k, v in params.items() if k.split("/", 1)[0] == n}
            hidden = [arrays[f"H{i}"] for i in range(self.depth - 1)]
            out[n] = ProbeXParams(arrays["U"], arrays["V"], arrays["M"], arrays["T"], self.activation, hidden)
        return out

    def init(self, rng):
        flat = {}
        for n in self.layers:
            p = init_params(self.dims(n), rng, self.activation)
            flat.update({f"{n}/{k}": v for k, v in p.arrays().items()})
        return flat

    def inputs(self, records):
        return {n: _stack_layer(records, n) for n in self.layers}

    def forward(self, params, inputs):
        return forward_multilayer_batch(self.unflatten(params), inputs)

    def backward(self, params, cache, G):
        grads = backward_multilayer_batch(self.unflatten(params), cache, G)
        return {f"{n}/{k}": g for n, gs in grads.items() for k, g in gs.items()}

    def param_count(self) -> int:
        return sum(self.dims(n).param_count() for n in self.layers)

    def config(self):
        return {
            **super().config(),
            "activation": self.activation,
            "ranks": list(self.ranks),
            "depth": self.depth,
            "shapes": {n: list(s) for n, s in self.shapes.items()},
        }


class DenseMetanet(Metanet):
    kind = "dense"

    def __init__(self, layers, d_out, shapes):
        super().__init__(layers, d_out)
        self.shapes = {n: tuple(shapes[n]) for n in self.layers}

    def init(self, rng):
        return {f"{n}/W": init_dense(*self.shapes[n], self.d_out, rng).W for n in self.layers}

    def inputs(self, records):
        return {n: _stack_layer(records, n) for n in self.layers}

    def forward(self, params, inputs):
        y = sum(dense_forward_batch(params[f"{n}/W"], inputs[n]) for n in self.layers)
        return y, inputs

    def backward(self, params, cache, G):
        return {f"{n}/W": dense_backward_batch(params[f"{n}/W"], cache[n], G) for n in self.layers}

    def param_count(self) -> int:
        return sum(a * b * self.d_out for a, b in self.shapes.values())

    def config(self):
        return {**super().config(), "shapes": {n: list(s) for n, s in self.shapes.items()}}


class StatNNMetanet(Metanet):
    def __init__(self, layers, d_out, variant="linear", hidden=None, standardizer=None):
        super().__init__(layers, d_out)
        self.kind = f"statnn-{variant}"
        self.variant = variant
        self.hidden = hidden
        self.standardizer = standardizer
        self.n_features = baselines.N_STATS * len(self.layers)

    def fit_standardizer(self, records):
        self.standardizer = baselines.Standardizer.fit(baselines.feature_matrix(records, self.layers))

    def init(self, rng):
        return baselines.init_head(self.variant, self.n_features, self.d_out, rng, self.hidden)

    def inputs(self, records):
        return self.standardizer(baselines.feature_matrix(records, self.layers))

    def forward(self, params, inputs):
        return baselines.head_forward(params, inputs)

    def backward(self, params, cache, G):
        return baselines.head_backward(params, cache, G)

    def param_count(self) -> int:
        if self.variant == "linear":
            return self.n_features * self.d_out + self.d_out
        return self.n_features * self.hidden + self.hidden + self.hidden * self.d_out + self.d_out

    def config(self):
        return {
            **super().config(),
            "variant": self.variant,
            "hidden": self.hidden,
            "feature_mean": [float(x) for x in self.standardizer.mean],
            "feature_scale": [float(x) for x in self.standardizer.scale],
        }


def build_metanet(kind: str, layers, d_out: int, records, cfg: TrainConfig) -> Metanet:
    if kind not in METANET_KINDS:
        raise ConfigError(f"unknown metanetwork kind {kind!r}; choose from {METANET_KINDS}")
    if isinstance(layers, str):
        layers = [layers]
    if not records:
        raise ConfigError("cannot build a metanetwork without training records")
    shapes = {n: records[0].layer(n).shape for n in layers}
    if kind in ("probex", "probex-linear"):
        act = "relu" if kind == "probex" else "identity"
        return ProbeXMetanet(layers, d_out, shapes, cfg.ranks, act, cfg.depth)
    if kind == "dense":
        return DenseMetanet(layers, d_out, shapes)
    variant = kind.split("-", 1)[1]
    hidden = None
    if variant == "mlp":
        budget = cfg.statnn_budget
        if budget is None:
            budget = sum(ProbeXDims(*shapes[n], d_out, *cfg.ranks).param_count() for n in layers)
        hidden = baselines.mlp_hidden_for_budget(baselines.N_STATS * len(layers), d_out, budget)
    net = StatNNMetanet(layers, d_out, variant, hidden)
    net.fit_standardizer(records)
    return net


@dataclass
class TrainedMetanet:
    net: Metanet
    params: dict[str, np.ndarray]
    task: str = "classify"
    class_names: list[str] | None = None  # alignment: classes seen in training

    @property
    def kind(self) -> str:
        return self.net.kind

    @property
    def layers(self) -> list[str]:
        return self.net.layers

    def predict(self, records) -> np.ndarray:
        if not records:
            return np.zeros((0, self.net.d_out))
        y, _ = self.net.forward(self.params, self.net.inputs(records))
        return y

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name, a in self.params.items():
            fname = name.replace("/", ".") + ".wzt"
            save_tensor(path / fname, a)
            shapes[name] = {"file": fname, "shape": list(a.shape)}
        meta = {"net": self.net.config(), "task": self.task, "class_names": self.class_names, "arrays": shapes}
        (path / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> TrainedMetanet:
        path = Path(path)
        try:
            meta = json.loads((path / "model.json").read_text())
        except FileNotFoundError as exc:
            raise FormatError(f"{path}: no model.json") from exc
        params = {k: load_tensor(path / d["file"], d["shape"]) for k, d in meta["arrays"].items()}
        c = meta["net"]
        kind = c["kind"]
        if kind in ("probex", "probex-linear"):
            net = ProbeXMetanet(c["layers"], c["d_out"], c["shapes"], c["ranks"], c["activation"], c["depth"])
        elif kind == "dense":
            net = DenseMetanet(c["layers"], c["d_out"], c["shapes"])
        elif kind.startswith("statnn-"):
            std = baselines.Standardizer(np.asarray(c["feature_mean"]), np.asarray(c["feature_scale"]))
            net = StatNNMetanet(c["layers"], c["d_out"], c["variant"], c["hidden"], std)
        else:
            raise FormatError(f"{path}: unknown metanetwork kind {kind!r}")
        return cls(net, params, meta.get("task", "classify"), meta.get("class_names"))


# ---------------------------------------------------------------------------
# training loop


def multilabel_accuracy(Y, bits) -> float:
    return float(np.mean((np.asarray(Y) > 0) == (np.asarray(bits) > 0)))


def top1_accuracy(Y, targets, table_vectors) -> float:
    E = np.asarray(Y, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    sims = (E / np.where(norms > 0, norms, 1.0)) @ table_vectors.T
    return float(np.mean(np.argmax(sims, axis=1) == targets))


def task_records(zoo, split: str, task: str) -> list:
    """Records usable for metanetwork training/selection: held-out classes are excluded when aligning."""
    recs = zoo.split(split)
    if task == "align":
        held = set(zoo.holdout_classes)
        recs = [r for r in recs if r.embedding_key not in held]
    return recs


def _targets(records, task, table):
    if task == "classify":
        return np.stack([r.label_bits for r in records]).astype(np.float64)
    missing = [r.model_id for r in records if r.embedding_key is None]
    if missing:
        raise DataError(f"models without embedding_key: {missing[:5]}")
    return np.array([table.index(r.embedding_key) for r in records])


def write_history(history: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_metric"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_metric"])])


def train(
    kind: str,
    zoo,
    layer,
    cfg: TrainConfig | None = None,
    table: EmbeddingTable | None = None,
    train_records=None,
    val_records=None,
    history_csv=None,
) -> tuple[TrainedMetanet, list[dict]]:
    """Train a metanetwork and return the parameters of its best validation epoch.

    The task follows ``cfg.loss``: ``multilabel_bce`` predicts ``label_bits``;
    ``contrastive_align`` maps weights onto ``table`` restricted to the classes
    present in the training records. ``train_records``/``val_records``
    override the zoo's train/val splits.
    """
    cfg = cfg or TrainConfig()
    task = "align" if cfg.loss == "contrastive_align" else "classify"
    tr = list(train_records) if train_records is not None else task_records(zoo, "train", task)
    va = list(val_records) if val_records is not None else task_records(zoo, "val", task)
    if not tr:
        raise ConfigError("training split is empty")
    if not va:
        raise ConfigError("validation split is empty")

    class_names = None
    if task == "align":
        if table is None:
            raise ConfigError("alignment needs an embedding table")
        seen = {r.embedding_key for r in tr}
        class_names = [n for n in table.names if n in seen]
        table = table.subset(class_names)
        d_out = table.dim
    else:
        d_out = len(tr[0].label_bits)

    net = build_metanet(kind, layer, d_out, tr, cfg)
    params = net.init(make_rng(cfg.seed, 0))
    x_tr, x_va = net.inputs(tr), net.inputs(va)
    t_tr, t_va = _targets(tr, task, table), _targets(va, task, table)

    def loss_and_grad(p, x, t):
        y, cache = net.forward(p, x)
        if task == "classify":
            loss, G = bce_loss_batch(y, t)
        else:
            loss, G = contrastive_loss_batch(y, t, table.vectors, cfg.temperature)
        return loss, net.backward(p, cache, G)

    def metric(p):
        y, _ = net.forward(p, x_va)
        if task == "classify":
            return multilabel_accuracy(y, t_va)
        return top1_accuracy(y, t_va, table.vectors)

    def select(x, idx):
        if isinstance(x, dict):
            return {k: v[idx] for k, v in x.items()}
        return x[idx]

    best = {k: v.copy() for k, v in params.items()}
    best_metric = -np.inf
    history: list[dict] = []
    state = AdamState()
    n = len(tr)
    try:
        for epoch in range(1, cfg.epochs + 1):
            if cfg.batch_size is None or cfg.batch_size >= n:
                batches = [slice(None)]
            else:
                order = make_rng(cfg.seed, 1, epoch).permutation(n)
                batches = [order[s : s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
            total = 0.0
            for b in batches:
                loss, grads = loss_and_grad(params, select(x_tr, b), t_tr[b])
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                total += loss * (n if isinstance(b, slice) else len(b))
                params, state = adam_step(params, grads, state, cfg)
            m = metric(params)
            history.append({"epoch": epoch, "train_loss": total / n, "val_metric": m})
            if m > best_metric:
                best_metric = m
                best = params
    except NumericError as exc:
        exc.history = history
        raise
    finally:
        if history_csv is not None:
            write_history(history, history_csv)
    return TrainedMetanet(net, best, task, class_names), history


def select_layer(kind: str, zoo, layers, cfg: TrainConfig | None = None, table=None, **kw):
    """Train one metanetwork per candidate layer; the highest validation metric wins, ties to the earlier layer.

    Returns ``(best_layer, trained, results)`` where ``results`` lists
    ``(layer, best_val_metric)`` per candidate.
    """
    if not layers:
        raise ConfigError("no candidate layers")
    best = None
    results = []
    for name in layers:
        model, hist = train(kind, zoo, name, cfg, table, **kw)
        score = max((h["val_metric"] for h in hist), default=-np.inf)
        results.append((name, score))
        if best is None or score > best[1]:
            best = (name, score, model)
    return best[0], best[2], results


def with_task(cfg: TrainConfig, task: str) -> TrainConfig:
    return replace(cfg, loss="contrastive_align" if task == "align" else "multilabel_bce")
