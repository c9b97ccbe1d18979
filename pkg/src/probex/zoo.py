"""Synthetic model populations organised into Model Trees.

Target models are small ReLU MLPs trained with plain SGD on an isotropic
Gaussian-mixture task. A *Model Tree* is a population fine-tuned from one
shared pre-trained root; a *Model Forest* is a population where every model
starts from its own random initialisation (each model is its own tree).

Two kinds of zoo are produced:

* classification zoos (``tree``, ``forest``, ``multitree:k``): each model is
  fine-tuned on a random ``subset_size`` of the ``universe_size`` classes and
  its ground truth is the binary membership vector ``label_bits``;
* an alignment zoo (``align``): each model is LoRA fine-tuned to recognise a
  single concept class from a handful of samples. The class mean is a fixed
  random linear image of the class embedding, which is what lets weights be
  aligned with the embedding table.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .linalg import make_rng, relu
from .tensorio import load_tensor, save_tensor, to_f32

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_LAYER = "fc1"

# fine-tuning learning-rate grid, scaled x300 so plain-SGD MLP targets move off their root
LR_GRID = (0.15, 0.09, 0.03, 0.027, 0.021, 0.015, 0.009)
LORA_STEPS = (450, 500, 550, 600, 650, 700)


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic Gaussian-mixture task and target-network shape.

    Mixture components ``0 .. universe_size-1`` form the fine-tuning universe
    (dataset A); the next ``pretrain_size`` components form the disjoint
    pre-training set (dataset B).
    """

    dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    n_components: int = 75
    universe_size: int = 50
    pretrain_size: int = 25
    subset_size: int = 25
    samples_per_class: int = 200
    mean_scale: float = 1.0
    noise: float = 1.0
    mixture_seed: int = 0
    pretrain_lr: float = 0.05
    batch_size: int = 64
    lr_grid: tuple[float, ...] = LR_GRID
    epoch_range: tuple[int, int] = (2, 9)

    def validate(self) -> None:
        if self.universe_size + self.pretrain_size > self.n_components:
            raise ConfigError(
                f"universe ({self.universe_size}) + pretrain ({self.pretrain_size}) classes "
                f"exceed the {self.n_components} mixture components"
            )
        if not 1 <= self.subset_size <= self.universe_size:
            raise ConfigError(f"subset_size {self.subset_size} must lie in [1, {self.universe_size}]")
        if self.pretrain_size < 1 or self.samples_per_class < 1 or self.dim < 1:
            raise ConfigError("pretrain_size, samples_per_class and dim must be positive")
        lo, hi = self.epoch_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad epoch range {self.epoch_range}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.dim, *self.hidden, self.universe_size]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def layer_names(self) -> list[str]:
        return [f"fc{i + 1}" for i in range(len(self.hidden) + 1)]

    def means(self) -> np.ndarray:
        rng = make_rng(self.mixture_seed, 0xA11)
        return self.mean_scale * rng.standard_normal((self.n_components, self.dim))

    def sample(self, classes, n_per_class: int, rng: np.random.Generator, means=None):
        """Draw ``n_per_class`` points for every component in ``classes``."""
        means = self.means() if means is None else means
        classes = np.asarray(classes, dtype=np.int64)
        y = np.repeat(classes, n_per_class)
        x = means[y] + self.noise * rng.standard_normal((y.size, self.dim))
        return x, y


# ---------------------------------------------------------------------------
# target networks


@dataclass
class TargetNet:
    """ReLU MLP; ``weights[i]`` has shape (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases differ in count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: bias {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} input {w.shape[1]} does not chain with previous output {self.weights[i - 1].shape[0]}"
                )

    @classmethod
    def random(cls, spec: TaskSpec, rng: np.random.Generator) -> TargetNet:
        ws, bs = [], []
        for out_dim, in_dim in spec.layer_shapes:
            a = 1.0 / np.sqrt(in_dim)
            ws.append(rng.uniform(-a, a, (out_dim, in_dim)))
            bs.append(rng.uniform(-a, a, out_dim))
        return cls(ws, bs)

    def copy(self) -> TargetNet:
        return TargetNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def layers(self, names) -> dict[str, np.ndarray]:
        return {n: w for n, w in zip(names, self.weights)}

    def logits(self, x: np.ndarray, deltas=None) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if deltas is not None and i in deltas:
                w = w + deltas[i]
            h = h @ w.T + b
            if i < last:
                h = relu(h)
        return h

    def accuracy(self, x: np.ndarray, y: np.ndarray, classes=None) -> float:
        z = self.logits(x)
        if classes is not None:
            classes = np.asarray(classes)
            pred = classes[np.argmax(z[:, classes], axis=1)]
        else:
            pred = np.argmax(z, axis=1)
        return float(np.mean(pred == y))


def _softmax_xent_grad(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(y.size), y] -= 1.0
    return p / y.size


def _backprop(net: TargetNet, x: np.ndarray, y: np.ndarray, deltas=None):
    """Gradients of mean softmax cross-entropy w.r.t. effective weights and biases."""
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    ws = [w + deltas[i] if deltas is not None and i in deltas else w for i, w in enumerate(net.weights)]
    for i, (w, b) in enumerate(zip(ws, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = relu(z) if i < last else z
        acts.append(h)
    g = _softmax_xent_grad(acts[-1], y)
    gw = [None] * len(ws)
    gb = [None] * len(ws)
    for i in range(last, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = (g @ ws[i]) * (pre[i - 1] > 0)
    return gw, gb


def sgd_train(net: TargetNet, x, y, lr: float, epochs: int, batch_size: int, rng) -> TargetNet:
    """Plain minibatch SGD on every weight and bias; returns a new network."""
    net = net.copy()
    n = y.size
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            gw, gb = _backprop(net, x[idx], y[idx])
            for i in range(len(net.weights)):
                net.weights[i] -= lr * gw[i]
                net.biases[i] -= lr * gb[i]
    return net


def lora_train(net: TargetNet, layer_idx, rank, x, y, lr, steps, batch_size, rng):
    """LoRA fine-tuning: only low-rank factors of the chosen layers are trained.

    Factors follow the usual initialisation (``B = 0``, ``A`` uniform fan-in).
    Returns ``{layer_index: (B, A)}``.
    """
    factors = {}
    for i in layer_idx:
        out_dim, in_dim = net.weights[i].shape
        a = 1.0 / np.sqrt(in_dim)
        factors[i] = [np.zeros((out_dim, rank)), rng.uniform(-a, a, (rank, in_dim))]
    n = y.size
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        deltas = {i: b @ a for i, (b, a) in factors.items()}
        gw, _ = _backprop(net, x[idx], y[idx], deltas)
        for i, (b, a) in factors.items():
            gb_, ga_ = gw[i] @ a.T, b.T @ gw[i]
            b -= lr * gb_
            a -= lr * ga_
    return {i: (b, a) for i, (b, a) in factors.items()}


def lora_reconstruct(b, a) -> np.ndarray:
    """Full weight matrix ``X = B A`` from LoRA factors."""
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0]:
        raise DimensionError(f"LoRA factors do not chain: B {b.shape}, A {a.shape}")
    return b @ a


def pretrain_root(spec: TaskSpec, seed: int, epochs: int = 1, stream: tuple[int, ...] = ()) -> TargetNet:
    """Random init followed by ``epochs`` of SGD on the pre-training classes."""
    spec.validate()
    if epochs < 1:
        raise ConfigError(f"pre-training needs at least one epoch, got {epochs}")
    rng = make_rng(seed, 0, *stream)
    net = TargetNet.random(spec, rng)
    classes = np.arange(spec.universe_size, spec.universe_size + spec.pretrain_size)
    x, y = spec.sample(classes, spec.samples_per_class, rng)
    # B-classes map onto the first pretrain_size logits of the fixed-width head
    return sgd_train(net, x, y - spec.universe_size, spec.pretrain_lr, epochs, spec.batch_size, rng)


# ---------------------------------------------------------------------------
# records and zoos


@dataclass
class ModelRecord:
    model_id: str
    tree_id: str
    layers: dict[str, np.ndarray]
    label_bits: np.ndarray
    hyperparams: dict = field(default_factory=dict)
    lora: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    embedding_key: str | None = None
    init_layers: dict[str, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.label_bits = np.asarray(self.label_bits, dtype=np.uint8)
        for name, (b, a) in self.lora.items():
            if b.shape[1] != a.shape[0]:
                raise DimensionError(f"{self.model_id}/{name}: LoRA B {b.shape} and A {a.shape} do not chain")

    @property
    def layer_names(self) -> list[str]:
        return sorted(set(self.layers) | set(self.lora))

    def layer(self, name: str) -> np.ndarray:
        """Weight matrix fed to metanetworks; LoRA layers are expanded to ``B A``."""
        if name in self.layers:
            return self.layers[name]
        if name in self.lora:
            return lora_reconstruct(*self.lora[name])
        raise ConfigError(f"model {self.model_id} has no layer {name!r} (has {self.layer_names})")


@dataclass
class Zoo:
    universe_size: int
    subset_size: int
    trees: list[str]
    splits: dict[str, list[str]]
    records: list[ModelRecord]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_id = {r.model_id: r for r in self.records}
        roster = set(self.trees)
        for r in self.records:
            if r.tree_id not in roster:
                raise ConfigError(f"record {r.model_id} names unknown tree {r.tree_id!r}")

    def __len__(self) -> int:
        return len(self.records)

    def get(self, model_id: str) -> ModelRecord:
        return self._by_id[model_id]

    def split(self, name: str) -> list[ModelRecord]:
        if name == "all":
            return list(self.records)
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}")
        return [self._by_id[i] for i in self.splits[name]]

    def subset(self, model_ids) -> Zoo:
        """A zoo restricted to ``model_ids`` (split lists are filtered accordingly)."""
        keep = set(model_ids)
        recs = [r for r in self.records if r.model_id in keep]
        trees = [t for t in self.trees if any(r.tree_id == t for r in recs)]
        splits = {k: [i for i in v if i in keep] for k, v in self.splits.items()}
        return Zoo(self.universe_size, self.subset_size, trees, splits, recs, self.seed, dict(self.meta))

    @property
    def holdout_classes(self) -> list[str]:
        return list(self.meta.get("holdout_classes", []))


def make_splits(model_ids, seed: int, ratios=(0.7, 0.1, 0.2)) -> dict[str, list[str]]:
    """Disjoint train/val/test split, reproducible from ``(seed, ratios)``."""
    if len(ratios) != 3 or min(ratios) < 0 or not np.isclose(sum(ratios), 1.0):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = list(model_ids)
    perm = make_rng(seed, 0x5911).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    order = [ids[i] for i in perm]
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


def _bits(classes, universe: int) -> np.ndarray:
    bits = np.zeros(universe, dtype=np.uint8)
    bits[np.asarray(classes, dtype=np.int64)] = 1
    return bits


def _finetune_one(args):
    spec, root, seed, stream, model_id, tree_id, keep_init = args
    rng = make_rng(seed, 1, *stream)
    init = TargetNet.random(spec, rng) if root is None else root
    subset = np.sort(rng.choice(spec.universe_size, size=spec.subset_size, replace=False))
    lr = float(spec.lr_grid[rng.integers(len(spec.lr_grid))])
    epochs = int(rng.integers(spec.epoch_range[0], spec.epoch_range[1] + 1))
    x, y = spec.sample(subset, spec.samples_per_class, rng)
    net = sgd_train(init, x, y, lr, epochs, spec.batch_size, rng)
    xt, yt = spec.sample(subset, max(1, spec.samples_per_class // 4), rng)
    acc = net.accuracy(xt, yt)
    names = spec.layer_names
    return ModelRecord(
        model_id=model_id,
        tree_id=tree_id,
        layers={n: to_f32(w) for n, w in net.layers(names).items()},
        label_bits=_bits(subset, spec.universe_size),
        hyperparams={"lr": lr, "epochs": epochs, "seed": int(seed), "stream": list(stream), "test_acc": acc},
        init_layers=init.layers(names) if keep_init else None,
    )


def _run(fn, jobs, threads: int | None):
    threads = resolve_threads(threads)
    if threads <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        # map preserves input order, so output is independent of thread count
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("PROBEX_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def spawn_population(
    root: TargetNet | None,
    n: int,
    spec: TaskSpec,
    seed: int,
    tree_id: str | None = None,
    stream: tuple[int, ...] = (),
    keep_init: bool = False,
    threads: int | None = 1,
) -> list[ModelRecord]:
    """Fine-tune ``n`` models, all from ``root`` (a tree) or each from a fresh random init (a forest)."""
    spec.validate()
    if n < 1:
        raise ConfigError(f"population size must be at least 1, got {n}")
    jobs = []
    for i in range(n):
        if root is None:
            tid = f"F{'-'.join(map(str, stream)) + '-' if stream else ''}{i:04d}"
            mid = tid
        else:
            tid = tree_id or "T0"
            mid = f"{tid}-{i:04d}"
        jobs.append((spec, root, seed, (*stream, i), mid, tid, keep_init))
    return _run(_finetune_one, jobs, threads)


def _assemble(records, spec_meta: dict, universe: int, subset: int, seed: int, ratios) -> Zoo:
    trees = sorted({r.tree_id for r in records})
    splits = make_splits([r.model_id for r in records], seed, ratios)
    return Zoo(universe, subset, trees, splits, records, seed, spec_meta)


def _spec_meta(spec: TaskSpec, mode: str) -> dict:
    return {
        "mode": mode,
        "task": "classify",
        "input_layer": DEFAULT_LAYER,
        "task_spec": {
            "dim": spec.dim,
            "hidden": list(spec.hidden),
            "n_components": spec.n_components,
            "universe_size": spec.universe_size,
            "pretrain_size": spec.pretrain_size,
            "subset_size": spec.subset_size,
            "samples_per_class": spec.samples_per_class,
            "mean_scale": spec.mean_scale,
            "noise": spec.noise,
            "mixture_seed": spec.mixture_seed,
        },
    }


def make_tree_zoo(n: int, spec: TaskSpec = TaskSpec(), seed: int = 0, ratios=(0.7, 0.1, 0.2), threads=1) -> Zoo:
    root = pretrain_root(spec, seed)
    recs = spawn_population(root, n, spec, seed, tree_id="T0", stream=(0,), threads=threads)
    return _assemble(recs, _spec_meta(spec, "tree"), spec.universe_size, spec.subset_size, seed, ratios)


def make_forest_zoo(n: int, spec: TaskSpec = TaskSpec(), seed: int = 0, ratios=(0.7, 0.1, 0.2), threads=1) -> Zoo:
    recs = spawn_population(None, n, spec, seed, threads=threads)
    return _assemble(recs, _spec_meta(spec, "forest"), spec.universe_size, spec.subset_size, seed, ratios)


def make_multitree_zoo(
    k: int, n: int, spec: TaskSpec = TaskSpec(), seed: int = 0, ratios=(0.7, 0.1, 0.2), threads=1
) -> Zoo:
    """``k`` independently pre-trained roots with ``n`` models split as evenly as possible."""
    if k < 1:
        raise ConfigError(f"tree count must be positive, got {k}")
    if n < k:
        raise ConfigError(f"need at least one model per tree, got n={n} for k={k}")
    recs = []
    for t in range(k):
        size = n // k + (1 if t < n % k else 0)
        root = pretrain_root(spec, seed, stream=(t,))
        recs += spawn_population(root, size, spec, seed, tree_id=f"T{t}", stream=(t,), threads=threads)
    return _assemble(recs, _spec_meta(spec, f"multitree:{k}"), spec.universe_size, spec.subset_size, seed, ratios)


# ---------------------------------------------------------------------------
# alignment zoo


@dataclass(frozen=True)
class AlignSpec:
    """Concept-learning zoo used for weight/text alignment."""

    n_classes: int = 50
    n_holdout: int = 10
    embed_dim: int = 16
    models_per_class: int = 20
    lora_rank: int = 16
    lora_layers: tuple[str, ...] = ("fc1", "fc2")
    concept_scale: float = 1.5
    concept_map: str = "mlp"  # "linear" or "mlp": how a class embedding becomes its data mean
    concept_hidden: int = 64
    images_range: tuple[int, int] = (5, 10)
    preserve_per_class: int = 2
    lr_grid: tuple[float, ...] = (5e-2, 3e-2, 1e-2, 9e-3, 7e-3, 5e-3, 3e-3)
    steps_grid: tuple[int, ...] = LORA_STEPS
    batch_size: int = 8


def class_names(n: int) -> list[str]:
    return [f"class_{i:03d}" for i in range(n)]


def make_embeddings(aspec: AlignSpec, seed: int) -> dict[str, np.ndarray]:
    rng = make_rng(seed, 0xE4B)
    e = rng.standard_normal((aspec.n_classes, aspec.embed_dim))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return dict(zip(class_names(aspec.n_classes), e))


def _concept_means(spec: TaskSpec, aspec: AlignSpec, emb: np.ndarray, seed: int) -> np.ndarray:
    """Class data means as a fixed random function of the class embeddings.

    ``linear`` uses a Gaussian projection; ``mlp`` a random one-hidden-layer
    ReLU network. Both are rescaled to per-coordinate RMS ``concept_scale``.
    """
    rng = make_rng(seed, 0xC0C)
    if aspec.concept_map == "linear":
        out = emb @ rng.standard_normal((spec.dim, aspec.embed_dim)).T
    elif aspec.concept_map == "mlp":
        w1 = rng.standard_normal((aspec.concept_hidden, aspec.embed_dim))
        b1 = rng.standard_normal(aspec.concept_hidden) * 0.5
        w2 = rng.standard_normal((spec.dim, aspec.concept_hidden))
        out = relu(emb @ w1.T + b1) @ w2.T
        out -= out.mean(axis=0)
    else:
        raise ConfigError(f"unknown concept_map {aspec.concept_map!r}")
    return aspec.concept_scale * out / np.sqrt(np.mean(out**2))


def _concept_one(args):
    spec, aspec, root, seed, i, cls, cname, mean, layer_idx = args
    rng = make_rng(seed, 3, i)
    n_img = int(rng.integers(aspec.images_range[0], aspec.images_range[1] + 1))
    lr = float(aspec.lr_grid[rng.integers(len(aspec.lr_grid))])
    steps = int(aspec.steps_grid[rng.integers(len(aspec.steps_grid))])
    xc = mean + spec.noise * rng.standard_normal((n_img, spec.dim))
    # concept samples go to the last logit; prior-preservation samples keep their B labels
    base = np.arange(spec.universe_size, spec.universe_size + spec.pretrain_size)
    xb, yb = spec.sample(base, aspec.preserve_per_class, rng)
    x = np.vstack([xc, xb])
    y = np.concatenate([np.full(n_img, spec.universe_size - 1), yb - spec.universe_size])
    factors = lora_train(root, layer_idx, aspec.lora_rank, x, y, lr, steps, aspec.batch_size, rng)
    names = spec.layer_names
    lora = {names[j]: (to_f32(b), to_f32(a)) for j, (b, a) in factors.items()}
    return ModelRecord(
        model_id=f"A0-{i:05d}",
        tree_id="A0",
        layers={},
        label_bits=_bits([cls], aspec.n_classes),
        hyperparams={"lr": lr, "steps": steps, "images": n_img, "seed": int(seed), "stream": [i]},
        lora=lora,
        embedding_key=cname,
    )


def make_alignment_zoo(
    aspec: AlignSpec = AlignSpec(),
    spec: TaskSpec = TaskSpec(),
    seed: int = 0,
    ratios=(0.7, 0.1, 0.2),
    threads=1,
) -> tuple[Zoo, dict[str, np.ndarray]]:
    """LoRA concept zoo plus its class embedding table.

    Returns ``(zoo, embeddings)``. ``zoo.meta["holdout_classes"]`` lists the
    classes whose models must never be used for metanetwork training.
    """
    spec.validate()
    if not 0 < aspec.n_holdout < aspec.n_classes:
        raise ConfigError("n_holdout must leave at least one training class")
    if aspec.n_classes > spec.universe_size:
        raise ConfigError("alignment classes exceed the head width of the target network")
    emb = make_embeddings(aspec, seed)
    names = class_names(aspec.n_classes)
    table = np.stack([emb[c] for c in names])
    means = _concept_means(spec, aspec, table, seed)
    root = pretrain_root(spec, seed, stream=(0xA1,))
    layer_idx = [spec.layer_names.index(n) for n in aspec.lora_layers]
    jobs = []
    i = 0
    for _ in range(aspec.models_per_class):
        for c, cname in enumerate(names):
            jobs.append((spec, aspec, root, seed, i, c, cname, means[c], layer_idx))
            i += 1
    recs = _run(_concept_one, jobs, threads)
    holdout = sorted(names[j] for j in make_rng(seed, 0x401D).permutation(aspec.n_classes)[: aspec.n_holdout])
    meta = _spec_meta(spec, "align")
    meta.update(
        task="align",
        holdout_classes=holdout,
        embed_dim=aspec.embed_dim,
        lora_rank=aspec.lora_rank,
        lora_layers=list(aspec.lora_layers),
    )
    zoo = _assemble(recs, meta, aspec.n_classes, 1, seed, ratios)
    return zoo, emb


def build_zoo(mode: str, n: int, seed: int, spec: TaskSpec = TaskSpec(), threads=1):
    """Dispatch on a mode string: ``tree``, ``forest``, ``multitree:k`` or ``align``.

    Returns ``(zoo, embeddings_or_None)``.
    """
    if n < 1:
        raise ConfigError(f"--n must be at least 1, got {n}")
    if mode == "tree":
        return make_tree_zoo(n, spec, seed, threads=threads), None
    if mode == "forest":
        return make_forest_zoo(n, spec, seed, threads=threads), None
    if mode.startswith("multitree:"):
        try:
            k = int(mode.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad mode {mode!r}") from exc
        return make_multitree_zoo(k, n, spec, seed, threads=threads), None
    if mode == "align":
        aspec = AlignSpec()
        per_class = max(1, n // aspec.n_classes)
        return make_alignment_zoo(replace(aspec, models_per_class=per_class), spec, seed, threads=threads)
    raise ConfigError(f"unknown zoo mode {mode!r}")


# ---------------------------------------------------------------------------
# persistence


def _bits_to_hex(bits: np.ndarray) -> str:
    value = 0
    for i, b in enumerate(bits):
        if b:
            value |= 1 << i
    return format(value, f"0{(len(bits) + 3) // 4}x")


def _hex_to_bits(text: str, universe: int) -> np.ndarray:
    value = int(text, 16)
    return np.array([(value >> i) & 1 for i in range(universe)], dtype=np.uint8)


def save_zoo(zoo: Zoo, path) -> Path:
    """Write tensors first and the manifest last, so a readable manifest implies a complete zoo."""
    root = Path(path)
    tdir = root / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    records = []
    for r in zoo.records:
        entry = {
            "id": r.model_id,
            "tree": r.tree_id,
            "label_bits": _bits_to_hex(r.label_bits),
            "hyperparams": r.hyperparams,
            "embedding_key": r.embedding_key,
            "layers": {},
        }
        for name, w in sorted(r.layers.items()):
            rel = f"tensors/{r.model_id}.{name}.wzt"
            save_tensor(root / rel, w)
            entry["layers"][name] = {"file": rel, "shape": list(w.shape)}
        if r.lora:
            entry["lora"] = {}
            for name, (b, a) in sorted(r.lora.items()):
                pair = {}
                for tag, m in (("B", b), ("A", a)):
                    rel = f"tensors/{r.model_id}.{name}.lora_{tag}.wzt"
                    save_tensor(root / rel, m)
                    pair[tag] = {"file": rel, "shape": list(m.shape)}
                entry["lora"][name] = pair
        records.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "universe_size": zoo.universe_size,
        "subset_size": zoo.subset_size,
        "seed": zoo.seed,
        "trees": list(zoo.trees),
        "splits": zoo.splits,
        "meta": zoo.meta,
        "records": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_zoo(path) -> Zoo:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{mpath}: no manifest") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: unsupported format_version {manifest.get('format_version')!r}")
    universe = int(manifest["universe_size"])
    recs = []
    for e in manifest["records"]:
        layers = {n: load_tensor(root / d["file"], d["shape"]) for n, d in e.get("layers", {}).items()}
        lora = {
            n: (load_tensor(root / d["B"]["file"], d["B"]["shape"]), load_tensor(root / d["A"]["file"], d["A"]["shape"]))
            for n, d in e.get("lora", {}).items()
        }
        recs.append(
            ModelRecord(
                model_id=e["id"],
                tree_id=e["tree"],
                layers=layers,
                label_bits=_hex_to_bits(e["label_bits"], universe),
                hyperparams=e.get("hyperparams", {}),
                lora=lora,
                embedding_key=e.get("embedding_key"),
            )
        )
    return Zoo(
        universe_size=universe,
        subset_size=int(manifest["subset_size"]),
        trees=list(manifest["trees"]),
        splits={k: list(v) for k, v in manifest["splits"].items()},
        records=recs,
        seed=int(manifest.get("seed", 0)),
        meta=manifest.get("meta", {}),
    )
