"""Stage 2: LambdaMART over gradient-boosted regression trees.

Trees are grown depth-wise on pre-binned features (at most 256 bins per
column). Each level histograms only the smaller child of every split and
obtains its sibling by subtraction from the parent histogram.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataio import Qrels
from .features import FEATURE_NAMES, N_FEATURES, FeatureMatrix
from .ranking import RankedList

logger = logging.getLogger(__name__)

MODEL_FORMAT = "tarscreen-lambdamart"
MODEL_VERSION = 1


class LtrError(ValueError):
    pass


def dcg_discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg(labels_in_rank_order: Sequence[int], k: int | None = None) -> float:
    """NDCG with gain ``2**label - 1``; 0 when the group has no positive label."""
    labels = np.asarray(labels_in_rank_order, dtype=np.float64)
    k = len(labels) if k is None else min(k, len(labels))
    gains = 2.0**labels - 1.0
    disc = dcg_discounts(k)
    ideal = np.sort(gains)[::-1][:k] @ disc
    if ideal == 0:
        return 0.0
    return float(gains[:k] @ disc / ideal)


def lambda_gradients(scores: np.ndarray, labels: np.ndarray, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of the |delta NDCG|-weighted pairwise logistic cost.

    The current ordering is by descending score, ties by row order. The
    returned gradient is d(cost)/d(score), so relevant rows get negative values.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels > 0
    if pos.all() or not pos.any():
        raise LtrError("lambda gradients need both relevant and non-relevant rows in a group")
    n = len(scores)
    order = np.argsort(-scores, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    disc = dcg_discounts(n)
    idcg = disc[: int(pos.sum())].sum()

    pi, ni = np.flatnonzero(pos), np.flatnonzero(~pos)
    gain_i = 2.0 ** labels[pi].astype(np.float64) - 1.0
    gain_j = 2.0 ** labels[ni].astype(np.float64) - 1.0
    delta = np.abs((gain_i[:, None] - gain_j[None, :]) * (disc[rank[pi]][:, None] - disc[rank[ni]][None, :])) / idcg
    rho = expit(-sigma * (scores[pi][:, None] - scores[ni][None, :]))
    lam = sigma * rho * delta
    curv = sigma * sigma * rho * (1.0 - rho) * delta

    grad = np.zeros(n)
    hess = np.zeros(n)
    grad[pi] = -lam.sum(axis=1)
    grad[ni] = lam.sum(axis=0)
    hess[pi] = curv.sum(axis=1)
    hess[ni] = curv.sum(axis=0)
    return grad, hess


@dataclass
class LtrParams:
    n_trees: int = 100
    learning_rate: float = 0.3
    max_depth: int = 6
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    max_bins: int = 256
    sigma: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: Mapping | None) -> LtrParams:
        obj = dict(obj or {})
        known = {k: obj.pop(k) for k in list(obj) if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class RegressionTree:
    """Binary tree in flat arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> RegressionTree:
        return cls(
            np.array(obj["feature"], dtype=np.int64),
            np.array(obj["threshold"], dtype=np.float64),
            np.array(obj["left"], dtype=np.int64),
            np.array(obj["right"], dtype=np.int64),
            np.array(obj["value"], dtype=np.float64),
            np.array(obj["gain"], dtype=np.float64),
        )


@dataclass
class LtrModel:
    trees: list[RegressionTree]
    learning_rate: float
    base_score: float = 0.0
    n_features: int = N_FEATURES
    params: dict = field(default_factory=dict)
    total_gain: float = 0.0
    training_topics: list[str] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LtrError(f"expected feature vectors of length {self.n_features}, got shape {X.shape}")
        leaf_sum = np.zeros(len(X))
        for tree in self.trees:
            leaf_sum += tree.predict(X)
        return self.base_score + self.learning_rate * leaf_sum

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "n_features": self.n_features,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "params": self.params,
            "total_gain": self.total_gain,
            "training_topics": self.training_topics,
            "trees": [t.to_dict() for t in self.trees],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, obj: Mapping) -> LtrModel:
        if obj.get("format") != MODEL_FORMAT:
            raise LtrError("not a LambdaMART model file")
        if obj.get("version") != MODEL_VERSION:
            raise LtrError(f"unsupported model version {obj.get('version')}")
        return cls(
            trees=[RegressionTree.from_dict(t) for t in obj["trees"]],
            learning_rate=obj["learning_rate"],
            base_score=obj["base_score"],
            n_features=obj["n_features"],
            params=obj.get("params", {}),
            total_gain=obj.get("total_gain", 0.0),
            training_topics=obj.get("training_topics", []),
        )

    @classmethod
    def load(cls, path: str | Path) -> LtrModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingGroup:
    topic_id: str
    doc_ids: list[str]
    features: np.ndarray
    labels: np.ndarray


@dataclass
class LtrTrainingSet:
    groups: list[TrainingGroup]

    @property
    def topic_ids(self) -> list[str]:
        return [g.topic_id for g in self.groups]

    @classmethod
    def build(cls, matrices: Iterable[FeatureMatrix], qrels: Qrels) -> LtrTrainingSet:
        """One group per topic, labelled from qrels restricted to the candidate set."""
        groups = []
        for m in matrices:
            rel = qrels.relevant(m.topic_id)
            labels = np.array([1 if d in rel else 0 for d in m.doc_ids], dtype=np.int64)
            groups.append(TrainingGroup(m.topic_id, list(m.doc_ids), m.values, labels))
        return cls.from_groups(groups)

    @classmethod
    def from_groups(cls, groups: Iterable[TrainingGroup]) -> LtrTrainingSet:
        kept = []
        for g in groups:
            if g.features.ndim != 2 or g.features.shape[1] != N_FEATURES:
                raise LtrError(f"group {g.topic_id}: feature vectors must have length {N_FEATURES}")
            n_pos = int((g.labels > 0).sum())
            if n_pos == 0 or n_pos == len(g.labels):
                logger.warning("dropping training group %s: needs both relevant and non-relevant rows", g.topic_id)
                continue
            kept.append(g)
        return cls(kept)


def _bin_cuts(col: np.ndarray, max_bins: int) -> np.ndarray:
    # built from distinct values so that duplicated rows do not move the cuts
    uniq = np.unique(col)
    if len(uniq) <= max_bins:
        return uniq
    return np.unique(np.quantile(uniq, np.linspace(0.0, 1.0, max_bins)))


class _Binned:
    def __init__(self, X: np.ndarray, max_bins: int):
        self.n_features = X.shape[1]
        self.max_bins = max_bins
        self.cuts = [_bin_cuts(X[:, f], max_bins) for f in range(self.n_features)]
        self.bins = np.empty(X.shape, dtype=np.int32)
        for f, cuts in enumerate(self.cuts):
            self.bins[:, f] = np.searchsorted(cuts, X[:, f], side="left")
        self.flat = self.bins + (np.arange(self.n_features, dtype=np.int32) * max_bins)[None, :]

    def histogram(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        size = self.n_features * self.max_bins
        idx = self.flat[rows].ravel()
        hg = np.bincount(idx, weights=np.repeat(g[rows], self.n_features), minlength=size)
        hh = np.bincount(idx, weights=np.repeat(h[rows], self.n_features), minlength=size)
        return np.stack([hg, hh]).reshape(2, self.n_features, self.max_bins)


def _best_split(hist: np.ndarray, G: float, H: float, params: LtrParams):
    gl = np.cumsum(hist[0], axis=1)[:, :-1]
    hl = np.cumsum(hist[1], axis=1)[:, :-1]
    gr, hr = G - gl, H - hl
    lam = params.reg_lambda
    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam))
    valid = (hl >= params.min_child_weight) & (hr >= params.min_child_weight)
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    f, b = divmod(flat, gain.shape[1])
    best = gain[f, b]
    if not np.isfinite(best) or best <= 0:
        return None
    return f, b, float(best)


def _grow_tree(binned: _Binned, g: np.ndarray, h: np.ndarray, params: LtrParams) -> tuple[RegressionTree, np.ndarray]:
    """Grow one tree; also returns the leaf value reached by every training row."""
    feature, threshold, left, right, value, gain = [-1], [0.0], [-1], [-1], [0.0], [0.0]
    all_rows = np.arange(len(g))
    # open node: (node id, rows, histogram, G, H)
    open_nodes = [(0, all_rows, binned.histogram(all_rows, g, h), float(g.sum()), float(h.sum()))]
    leaves: list[tuple[int, np.ndarray, float, float]] = []
    for _depth in range(params.max_depth):
        next_open = []
        for node, rows, hist, G, H in open_nodes:
            split = _best_split(hist, G, H, params) if len(rows) > 1 else None
            if split is None:
                leaves.append((node, rows, G, H))
                continue
            f, b, best = split
            mask = binned.bins[rows, f] <= b
            rows_l, rows_r = rows[mask], rows[~mask]
            if len(rows_l) <= len(rows_r):
                hist_l = binned.histogram(rows_l, g, h)
                hist_r = hist - hist_l
            else:
                hist_r = binned.histogram(rows_r, g, h)
                hist_l = hist - hist_r
            ids = []
            for child_rows, child_hist in ((rows_l, hist_l), (rows_r, hist_r)):
                cid = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
                gain.append(0.0)
                ids.append(cid)
                next_open.append((cid, child_rows, child_hist, float(g[child_rows].sum()), float(h[child_rows].sum())))
            feature[node] = f
            threshold[node] = float(binned.cuts[f][b])
            left[node], right[node] = ids
            gain[node] = best
        open_nodes = next_open
        if not open_nodes:
            break
    leaves.extend((node, rows, G, H) for node, rows, _, G, H in open_nodes)

    row_values = np.zeros(len(g))
    for node, rows, G, H in leaves:
        v = -G / (H + params.reg_lambda)
        value[node] = v
        row_values[rows] = v
    tree = RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value),
        np.array(gain),
    )
    return tree, row_values


def train(training: LtrTrainingSet, params: LtrParams | None = None) -> LtrModel:
    """Fit boosted trees to lambda gradients averaged over groups."""
    params = params or LtrParams()
    if not training.groups:
        raise LtrError("no valid training groups (each needs relevant and non-relevant documents)")
    X = np.vstack([grp.features for grp in training.groups]).astype(np.float64)
    bounds = np.cumsum([0] + [len(grp.labels) for grp in training.groups])
    labels = np.concatenate([grp.labels for grp in training.groups])
    n_groups = len(training.groups)

    model = LtrModel(
        trees=[],
        learning_rate=params.learning_rate,
        base_score=0.0,
        n_features=X.shape[1],
        params=asdict(params),
        training_topics=training.topic_ids,
    )
    if params.n_trees == 0:
        return model
    binned = _Binned(X, params.max_bins)
    pred = np.full(len(X), model.base_score)
    g = np.empty(len(X))
    h = np.empty(len(X))
    for t in range(params.n_trees):
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            g[lo:hi], h[lo:hi] = lambda_gradients(pred[lo:hi], labels[lo:hi], params.sigma)
        g /= n_groups
        h /= n_groups
        tree, row_values = _grow_tree(binned, g, h, params)
        model.trees.append(tree)
        model.total_gain += float(tree.gain.sum())
        pred += params.learning_rate * row_values
        if t % 20 == 0:
            logger.debug("tree %d: %d nodes", t, len(tree.feature))
    return model


def score(model: LtrModel, features: FeatureMatrix | Iterable[tuple[str, np.ndarray]], topic_id: str | None = None) -> RankedList:
    """Rank documents by model score, ties by doc id."""
    if isinstance(features, FeatureMatrix):
        doc_ids, X, topic_id = features.doc_ids, features.values, topic_id or features.topic_id
    else:
        pairs = list(features)
        if not pairs:
            return RankedList(topic_id or "")
        doc_ids = [d for d, _ in pairs]
        X = np.array([np.asarray(v, dtype=np.float64).ravel() for _, v in pairs])
    if not len(doc_ids):
        return RankedList(topic_id or "")
    if X.shape[1] != model.n_features:
        raise LtrError(f"expected feature vectors of length {model.n_features}, got {X.shape[1]}")
    preds = model.predict(X)
    return RankedList.from_scores(topic_id or "", zip(doc_ids, preds.tolist()))


@dataclass
class FeatureImportance:
    gains: np.ndarray
    names: list[str]

    def ranked(self) -> list[tuple[int, str, float]]:
        """(1-based feature id, name, total gain), descending gain, ties by id."""
        order = sorted(range(len(self.gains)), key=lambda i: (-self.gains[i], i))
        return [(i + 1, self.names[i], float(self.gains[i])) for i in order]

    def top(self, k: int = 15) -> list[tuple[int, str, float]]:
        return self.ranked()[:k]


def feature_importance(model: LtrModel) -> FeatureImportance:
    gains = np.zeros(model.n_features)
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(gains, tree.feature[internal], tree.gain[internal])
    names = FEATURE_NAMES if model.n_features == N_FEATURES else [f"f{i + 1}" for i in range(model.n_features)]
    return FeatureImportance(gains, list(names))
