"""Downstream evaluations: multi-label accuracy, zero-shot, kNN, one-class AUC, retrieval."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

from .errors import ConfigError, DataError, DegenerateInputError, DimensionError

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    task: str
    metric: str
    aggregate: float
    aggregation: str  # how ``aggregate`` follows from ``per_class``
    per_class: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)

    def recompute(self) -> float:
        """Aggregate recomputed from the per-class entries."""
        keys = list(self.per_class)
        vals = np.array([self.per_class[k] for k in keys])
        if self.aggregation == "mean":
            return float(vals.mean())
        if self.aggregation == "count_weighted_mean":
            w = np.array([self.counts[k] for k in keys], dtype=np.float64)
            return float((vals * w).sum() / w.sum())
        raise ConfigError(f"unknown aggregation {self.aggregation!r}")

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def save_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", self.metric, "count"])
            for k, v in self.per_class.items():
                w.writerow([k, repr(float(v)), self.counts.get(k, "")])


def _records(zoo, split):
    recs = zoo.split(split) if isinstance(split, str) else list(split)
    if not recs:
        raise ConfigError(f"split {split!r} is empty")
    return recs


def _class_label(universe_idx: int) -> str:
    return f"class_{universe_idx:03d}"


# ---------------------------------------------------------------------------
# multi-label classification


def multilabel_report(Y, bits, config: dict | None = None, seed=None) -> EvalReport:
    Y = np.asarray(Y)
    bits = np.asarray(bits)
    if Y.shape != bits.shape:
        raise DimensionError(f"logits {Y.shape} and labels {bits.shape} differ")
    correct = (Y > 0) == (bits > 0)
    per_class = {_class_label(c): float(correct[:, c].mean()) for c in range(bits.shape[1])}
    counts = {k: int(bits.shape[0]) for k in per_class}
    rep = EvalReport("classify", "accuracy", 0.0, "mean", per_class, counts, dict(config or {}), seed)
    rep.aggregate = rep.recompute()
    return rep


def eval_multilabel(model, zoo, split="test") -> EvalReport:
    """Mean over classes of binary correctness at logit threshold 0."""
    recs = _records(zoo, split)
    bits = np.stack([r.label_bits for r in recs])
    return multilabel_report(model.predict(recs), bits, {"split": split if isinstance(split, str) else "custom"})


# ---------------------------------------------------------------------------
# alignment-based evaluations


def _normalize(E) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 1:
        E = E[None]
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("representation with zero norm")
    return E / norms


def zeroshot_predict(E, table, restrict_to) -> list[str]:
    """Class in ``restrict_to`` with the highest cosine similarity to each row of ``E``.

    Ties go to the earlier class in ``restrict_to``.
    """
    names = list(restrict_to)
    if not names:
        raise ConfigError("restrict_to is empty")
    T = np.stack([table.vectors[table.index(n)] for n in names])
    sims = _normalize(E) @ T.T
    return [names[i] for i in np.argmax(sims, axis=1)]


def eval_zeroshot(model, zoo, split, table, restrict_to=None) -> EvalReport:
    """Top-1 accuracy of nearest-embedding labelling; ``restrict_to`` defaults to the split's classes."""
    recs = _records(zoo, split)
    missing = [r.model_id for r in recs if r.embedding_key is None]
    if missing:
        raise DataError(f"models without embedding_key: {missing[:5]}")
    truth = [r.embedding_key for r in recs]
    if restrict_to is None:
        restrict_to = [n for n in table.names if n in set(truth)]
    restrict_to = list(restrict_to)
    outside = sorted(set(truth) - set(restrict_to))
    if outside:
        raise ConfigError(f"split contains classes outside restrict_to: {outside[:5]}")
    pred = zeroshot_predict(model.predict(recs), table, restrict_to)
    return _accuracy_report("zeroshot", truth, pred, restrict_to, {"split": split if isinstance(split, str) else "custom", "restrict_to": restrict_to})


def _accuracy_report(task, truth, pred, classes, config) -> EvalReport:
    per_class, counts = {}, {}
    for c in classes:
        idx = [i for i, t in enumerate(truth) if t == c]
        if idx:
            per_class[c] = float(np.mean([pred[i] == c for i in idx]))
            counts[c] = len(idx)
    rep = EvalReport(task, "top1", 0.0, "count_weighted_mean", per_class, counts, config)
    rep.aggregate = float(np.mean([p == t for p, t in zip(pred, truth)]))
    return rep


def cosine_distances(A, B) -> np.ndarray:
    return 1.0 - _normalize(A) @ _normalize(B).T


def _knn_score(D_cols: np.ndarray, k) -> np.ndarray:
    """Mean of the ``k`` smallest entries per row (``k=None`` means all)."""
    if k is None or k >= D_cols.shape[1]:
        return D_cols.mean(axis=1)
    part = np.partition(D_cols, k - 1, axis=1)[:, :k]
    return part.mean(axis=1)


def _check_k(k):
    if k is not None and (not isinstance(k, (int, np.integer)) or k < 1):
        raise ConfigError(f"k must be a positive integer or None (all), got {k!r}")


def knn_classify(train_reps, train_labels, test_reps, k=1, classes=None, report: EvalReport | None = None):
    """Per test rep, the class minimising the mean cosine distance to its ``k`` nearest members.

    Returns ``(predictions, scores)`` where ``scores`` is test x class. Ties in the
    score go to the earlier class.
    """
    _check_k(k)
    train_labels = list(train_labels)
    classes = list(classes) if classes is not None else sorted(set(train_labels))
    D = cosine_distances(test_reps, train_reps)
    lab = np.array(train_labels, dtype=object)
    used, cols = [], []
    for c in classes:
        mask = lab == c
        n = int(mask.sum())
        if n == 0:
            msg = f"class {c!r} has no training representations; skipped"
            report.warn(msg) if report else log.warning(msg)
            continue
        if k is not None and n < k:
            msg = f"class {c!r} has {n} < k={k} training representations; using all of them"
            report.warn(msg) if report else log.warning(msg)
        used.append(c)
        cols.append(_knn_score(D[:, mask], k))
    if not used:
        raise ConfigError("no class has training representations")
    S = np.stack(cols, axis=1)
    return [used[i] for i in np.argmin(S, axis=1)], S


def eval_knn(train_reps, train_labels, test_reps, test_labels, k=1, classes=None) -> EvalReport:
    rep = EvalReport("knn", "top1", 0.0, "count_weighted_mean", config={"k": "all" if k is None else k})
    pred, _ = knn_classify(train_reps, train_labels, test_reps, k, classes, rep)
    out = _accuracy_report("knn", list(test_labels), pred, sorted(set(test_labels)), rep.config)
    out.warnings = rep.warnings
    return out


def auc_lower_is_normal(distances, is_normal) -> float:
    """ROC AUC for separating normal from outlier when a lower distance means more normal."""
    y = np.asarray(is_normal, dtype=bool)
    if y.all() or not y.any():
        raise DegenerateInputError("AUC needs both normal and outlier samples")
    return float(roc_auc_score(y, -np.asarray(distances, dtype=np.float64)))


def eval_occ(train_reps, train_labels, test_reps, test_labels, normal_classes, k=1) -> EvalReport:
    """One-class AUC per normal class, averaged.

    Every test rep is scored by its mean cosine distance to the normal class's
    ``k`` nearest training reps; test reps of that class are the positives.
    """
    _check_k(k)
    rep = EvalReport("occ", "roc_auc", 0.0, "mean", config={"k": "all" if k is None else k, "normal_classes": list(normal_classes)})
    train_labels = np.array(list(train_labels), dtype=object)
    test_labels = np.array(list(test_labels), dtype=object)
    D = cosine_distances(test_reps, train_reps)
    for c in normal_classes:
        ref = train_labels == c
        pos = test_labels == c
        if not ref.any():
            rep.warn(f"class {c!r} has no training representations; excluded")
            continue
        if pos.sum() < 2:
            rep.warn(f"class {c!r} has {int(pos.sum())} test model(s); AUC undefined, excluded")
            continue
        if pos.all():
            rep.warn(f"class {c!r} has no outlier test models; excluded")
            continue
        rep.per_class[c] = auc_lower_is_normal(_knn_score(D[:, ref], k), pos)
        rep.counts[c] = int(pos.sum())
    if not rep.per_class:
        raise ConfigError("no class yielded a defined AUC")
    rep.aggregate = rep.recompute()
    return rep


def retrieve(pool_ids, pool_reps, query_rep, n: int, exclude=None) -> list[tuple[str, float]]:
    """``n`` nearest pool entries by cosine distance, ties by model id; ``exclude`` is skipped."""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    ids = list(pool_ids)
    d = cosine_distances(query_rep, pool_reps)[0]
    ranked = sorted((float(dist), mid) for mid, dist in zip(ids, d) if mid != exclude)
    if n > len(ranked):
        log.warning("asked for %d neighbours but only %d candidates exist; truncating", n, len(ranked))
    return [(mid, dist) for dist, mid in ranked[:n]]


# ---------------------------------------------------------------------------
# representations


def raw_reps(records, layer: str) -> np.ndarray:
    """Flattened weights of one layer: a metanetwork-free baseline representation."""
    return np.stack([r.layer(layer).ravel().astype(np.float64) for r in records])


def representations(model, records, rep: str = "aligned", layer: str | None = None) -> np.ndarray:
    if rep == "aligned":
        return model.predict(records)
    if rep == "raw":
        layer = layer or (model.layers[0] if model is not None else None)
        if layer is None:
            raise ConfigError("raw representations need a layer")
        return raw_reps(records, layer)
    raise ConfigError(f"unknown representation {rep!r}; choose 'aligned' or 'raw'")
