"""Random forest classifier with Gini splits, bootstrap sampling and two-stage tuning.

Trees are grown iteratively from an explicit work stack and stored as flat
tuples of :class:`Split` / :class:`Leaf` nodes (root at index 0, children
referenced by index). Every tree draws its bootstrap and its per-node feature
subsets from streams keyed by ``(seed, tree index)``, so a forest does not
depend on how trees are distributed over workers.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from cad_predictor.config.models import RfConfig, RfTuningConfig
from cad_predictor.core.exceptions import (
    EmptyNodeError,
    FoldTooSmallError,
    GridEmptyError,
    NoClassVariationError,
    NoSplitsError,
)
from cad_predictor.core.rng import BOOTSTRAP_STREAM, FOREST_STREAM, TUNING_STREAM, derive_seed, make_rng

logger = logging.getLogger(__name__)

MIN_DECREASE = 1e-12
DEFAULT_DEPTH_GRID: Tuple[Optional[int], ...] = (2, 4, 8, 16, None)


def gini(counts: Sequence[float]) -> float:
    """Binary Gini impurity ``1 − p0² − p1²`` of (negative, positive) counts.

    Raises:
        EmptyNodeError: If the counts sum to zero.
    """
    negative, positive = float(counts[0]), float(counts[1])
    total = negative + positive
    if total <= 0:
        raise EmptyNodeError("Gini impurity of an empty node")
    p0, p1 = negative / total, positive / total
    return 1.0 - p0 * p0 - p1 * p1


@dataclass(frozen=True)
class Leaf:
    probability: float
    n_samples: int


@dataclass(frozen=True)
class Split:
    """``x[feature] <= threshold`` goes to ``left``; children are node indices."""

    feature: int
    threshold: float
    left: int
    right: int
    n_samples: int
    decrease: float


TreeNode = Union[Split, Leaf]


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    decrease: float


def best_split(
    X: np.ndarray, y: np.ndarray, samples: np.ndarray, features: Sequence[int], min_leaf: int = 1
) -> Optional[SplitCandidate]:
    """Best midpoint split of ``samples`` over the candidate ``features``.

    The decrease is ``G(parent) − (n_l/n)·G(left) − (n_r/n)·G(right)``. Ties
    go to the lower feature index, then the lower threshold. Returns None
    for pure or too-small nodes and when no split decreases impurity.
    """
    samples = np.asarray(samples, dtype=np.intp)
    n = samples.size
    if n < 2 * min_leaf or n < 2:
        return None
    labels = y[samples].astype(np.float64)
    positives = labels.sum()
    if positives == 0 or positives == n:
        return None
    parent = gini((n - positives, positives))

    features = np.sort(np.asarray(features, dtype=np.intp))
    values = X[np.ix_(samples, features)]
    order = np.argsort(values, axis=0, kind="stable")
    sorted_values = np.take_along_axis(values, order, axis=0)
    left_pos = np.cumsum(labels[order], axis=0)[:-1]

    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    right_pos = positives - left_pos
    gini_left = 1.0 - (left_pos / n_left) ** 2 - ((n_left - left_pos) / n_left) ** 2
    gini_right = 1.0 - (right_pos / n_right) ** 2 - ((n_right - right_pos) / n_right) ** 2
    decrease = parent - (n_left / n) * gini_left - (n_right / n) * gini_right

    valid = sorted_values[1:] > sorted_values[:-1]
    valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
    decrease = np.where(valid, decrease, -np.inf)

    # Feature-major flattening makes argmax honour the tie order.
    flat = decrease.T.ravel()
    best = int(np.argmax(flat))
    if not flat[best] > MIN_DECREASE:
        return None
    column, position = divmod(best, n - 1)
    low, high = sorted_values[position, column], sorted_values[position + 1, column]
    threshold = (low + high) / 2.0
    if not low <= threshold < high:
        threshold = low
    return SplitCandidate(feature=int(features[column]), threshold=float(threshold), decrease=float(flat[best]))


def features_per_split(config: RfConfig, n_features: int) -> int:
    fraction = config.mtry_fraction if config.mtry_fraction is not None else math.sqrt(n_features) / n_features
    return max(1, min(n_features, math.ceil(fraction * n_features - 1e-12)))


@dataclass(frozen=True)
class Tree:
    nodes: Tuple[TreeNode, ...]

    @property
    def n_samples(self) -> int:
        return self.nodes[0].n_samples

    @property
    def n_splits(self) -> int:
        return sum(isinstance(node, Split) for node in self.nodes)

    def depth(self) -> int:
        depths = {0: 0}
        for index, node in enumerate(self.nodes):
            if isinstance(node, Split):
                depths[node.left] = depths[node.right] = depths[index] + 1
        return max(depths.values())

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Leaf probability reached by every row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        position = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        feature = np.array([node.feature if isinstance(node, Split) else -1 for node in self.nodes])
        threshold = np.array([node.threshold if isinstance(node, Split) else 0.0 for node in self.nodes])
        left = np.array([node.left if isinstance(node, Split) else -1 for node in self.nodes])
        right = np.array([node.right if isinstance(node, Split) else -1 for node in self.nodes])
        value = np.array([node.probability if isinstance(node, Leaf) else np.nan for node in self.nodes])

        pending = feature[position] >= 0
        while pending.any():
            current = position[pending]
            go_left = X[rows[pending], feature[current]] <= threshold[current]
            position[pending] = np.where(go_left, left[current], right[current])
            pending = feature[position] >= 0
        return value[position]

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for node in self.nodes:
            if isinstance(node, Split):
                nodes.append(
                    {
                        "feature": node.feature,
                        "threshold": node.threshold,
                        "left": node.left,
                        "right": node.right,
                        "n": node.n_samples,
                        "decrease": node.decrease,
                    }
                )
            else:
                nodes.append({"probability": node.probability, "n": node.n_samples})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Tree":
        nodes: List[TreeNode] = []
        for item in data["nodes"]:
            if "feature" in item:
                nodes.append(
                    Split(item["feature"], item["threshold"], item["left"], item["right"], item["n"], item["decrease"])
                )
            else:
                nodes.append(Leaf(item["probability"], item["n"]))
        return cls(tuple(nodes))


def grow_tree(
    X: np.ndarray, y: np.ndarray, samples: np.ndarray, config: RfConfig, tree_seed: int
) -> Tree:
    """Grow one tree on ``samples`` (row indices, repeats allowed).

    Every node draws a fresh feature subset of size ``ceil(mtry_fraction·p)``.
    Growth stops at purity, ``max_depth``, ``min_leaf`` or when no split improves.
    """
    X = np.asarray(X, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.intp)
    if samples.size == 0:
        raise EmptyNodeError("Cannot grow a tree on an empty sample")
    rng = make_rng(tree_seed)
    p = X.shape[1]
    m = features_per_split(config, p)

    nodes: List[Optional[TreeNode]] = [None]
    stack = [(0, samples, 0)]
    while stack:
        index, node_samples, depth = stack.pop()
        labels = y[node_samples]
        probability = float(labels.mean())
        candidate = None
        if config.max_depth is None or depth < config.max_depth:
            features = rng.choice(p, size=m, replace=False)
            candidate = best_split(X, y, node_samples, features, config.min_leaf)
        if candidate is None:
            nodes[index] = Leaf(probability=probability, n_samples=int(node_samples.size))
            continue
        go_left = X[node_samples, candidate.feature] <= candidate.threshold
        left, right = len(nodes), len(nodes) + 1
        nodes.extend([None, None])
        nodes[index] = Split(
            feature=candidate.feature,
            threshold=candidate.threshold,
            left=left,
            right=right,
            n_samples=int(node_samples.size),
            decrease=candidate.decrease,
        )
        # Right first so the left subtree is expanded next.
        stack.append((right, node_samples[~go_left], depth + 1))
        stack.append((left, node_samples[go_left], depth + 1))
    return Tree(tuple(node for node in nodes if node is not None))


def _grow_trees(X: np.ndarray, y: np.ndarray, config: RfConfig, tree_ids: Sequence[int]) -> List[Tree]:
    n = X.shape[0]
    trees = []
    for t in tree_ids:
        bootstrap = make_rng(config.seed, BOOTSTRAP_STREAM, t).integers(0, n, size=n)
        trees.append(grow_tree(X, y, bootstrap, config, derive_seed(config.seed, FOREST_STREAM, t)))
    return trees


@dataclass(frozen=True)
class Forest:
    trees: Tuple[Tree, ...]
    n_features: int
    config: RfConfig
    feature_names: Tuple[str, ...] = ()

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict_proba(self, X)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Forest":
        return cls(
            trees=tuple(Tree.from_dict(tree) for tree in data["trees"]),
            n_features=int(data["n_features"]),
            config=RfConfig.model_validate(data["config"]),
            feature_names=tuple(data.get("feature_names", ())),
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Forest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    config: RfConfig,
    feature_names: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> Forest:
    """Train ``config.n_trees`` trees, each on a size-n bootstrap.

    Raises:
        NoClassVariationError: If ``y`` has a single class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.float64)
    if y.size == 0 or y.min() == y.max():
        raise NoClassVariationError("Random forest needs both classes")
    n_jobs = max(1, min(n_jobs, config.n_trees))
    chunks = [list(chunk) for chunk in np.array_split(np.arange(config.n_trees), n_jobs)]
    grown = Parallel(n_jobs=n_jobs)(delayed(_grow_trees)(X, y, config, chunk) for chunk in chunks if chunk)
    trees = tuple(tree for chunk in grown for tree in chunk)
    logger.debug(
        "Grew %d trees on %dx%d (mtry=%d)", len(trees), X.shape[0], X.shape[1], features_per_split(config, X.shape[1])
    )
    return Forest(trees=trees, n_features=X.shape[1], config=config, feature_names=tuple(feature_names or ()))


def predict_proba(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Mean leaf probability across trees, or the positive-vote fraction with ``hard_vote``."""
    total = np.zeros(np.asarray(X).shape[0])
    for tree in forest.trees:
        leaf = tree.predict_proba(X)
        total += (leaf >= 0.5) if forest.config.hard_vote else leaf
    return total / len(forest.trees)


def importance(forest: Forest) -> np.ndarray:
    """Mean decrease in Gini impurity per feature, normalized to sum 1.

    Each split contributes its decrease weighted by the fraction of the
    tree's bootstrap sample reaching it.

    Raises:
        NoSplitsError: If no tree has a split.
    """
    totals = np.zeros(forest.n_features)
    for tree in forest.trees:
        root = tree.n_samples
        for node in tree.nodes:
            if isinstance(node, Split):
                totals[node.feature] += node.n_samples / root * node.decrease
    totals /= len(forest.trees)
    mass = totals.sum()
    if mass <= 0.0:
        raise NoSplitsError("Forest has no splits to attribute importance to")
    return totals / mass


def default_mtry_grid(n_features: int) -> List[float]:
    """{0.05, 0.1, 0.2, √p/p, 0.33, 0.5, 1.0}, ascending and de-duplicated."""
    return sorted({0.05, 0.1, 0.2, math.sqrt(n_features) / n_features, 0.33, 0.5, 1.0})


@dataclass(frozen=True)
class TuningResult:
    """Chosen config plus the stage-1 (mtry × depth) surface and the stage-2 mtry curve."""

    config: RfConfig
    stage1: Tuple[Dict[str, Any], ...]
    stage2: Tuple[Dict[str, Any], ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "stage1": list(self.stage1),
            "stage2": list(self.stage2),
        }


def _tuning_folds(y: np.ndarray, n_folds: int, seed: int, stage: int) -> np.ndarray:
    n = y.size
    if n_folds > n:
        raise FoldTooSmallError(f"{n_folds} folds requested for {n} rows", context={"n_folds": n_folds, "n_rows": n})
    folds = np.empty(n, dtype=np.intp)
    folds[make_rng(seed, TUNING_STREAM, stage).permutation(n)] = np.arange(n) % n_folds
    for fold in range(n_folds):
        complement = y[folds != fold]
        if complement.min() == complement.max():
            raise FoldTooSmallError(f"Training complement of fold {fold} has a single class", context={"fold": fold})
    return folds


def _cv_error(
    X: np.ndarray, y: np.ndarray, folds: np.ndarray, config: RfConfig, criterion: str, n_jobs: int
) -> float:
    probabilities = np.empty(y.size)
    for fold in np.unique(folds):
        held_out = folds == fold
        forest = fit_forest(X[~held_out], y[~held_out], config, n_jobs=n_jobs)
        probabilities[held_out] = predict_proba(forest, X[held_out])
    if criterion == "deviance":
        clipped = np.clip(probabilities, 1e-6, 1.0 - 1e-6)
        return float(-2.0 * np.mean(y * np.log(clipped) + (1.0 - y) * np.log(1.0 - clipped)))
    return float(np.mean((probabilities >= 0.5) != (y == 1)))


def tune_two_stage(
    X: np.ndarray,
    y: np.ndarray,
    base: RfConfig,
    tuning: Optional[RfTuningConfig] = None,
    n_jobs: int = 1,
) -> TuningResult:
    """Cross-validate (mtry × depth), then mtry alone with unlimited depth.

    Both stages use ``tuning.tuning_trees`` trees per forest and fresh seeded
    folds. The stage-2 argmin is returned with ``n_trees`` restored from
    ``base``; ties go to the smaller mtry fraction.

    Raises:
        GridEmptyError: If either grid is empty.
    """
    tuning = tuning or RfTuningConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.float64)
    mtry_grid = sorted(set(tuning.mtry_grid)) if tuning.mtry_grid is not None else default_mtry_grid(X.shape[1])
    depth_grid = list(tuning.depth_grid)
    if not mtry_grid or not depth_grid:
        raise GridEmptyError("Tuning grids must be non-empty")

    def candidate(mtry: float, depth: Optional[int]) -> RfConfig:
        return base.model_copy(update={"n_trees": tuning.tuning_trees, "mtry_fraction": mtry, "max_depth": depth})

    folds = _tuning_folds(y, tuning.n_folds, base.seed, 1)
    stage1 = []
    for mtry in mtry_grid:
        for depth in depth_grid:
            error = _cv_error(X, y, folds, candidate(mtry, depth), tuning.criterion, n_jobs)
            stage1.append({"mtry_fraction": mtry, "max_depth": depth, "error": error})
            logger.debug("RF tuning stage 1: mtry=%.3g depth=%s error=%.4f", mtry, depth, error)

    folds = _tuning_folds(y, tuning.n_folds, base.seed, 2)
    stage2 = []
    for mtry in mtry_grid:
        error = _cv_error(X, y, folds, candidate(mtry, None), tuning.criterion, n_jobs)
        stage2.append({"mtry_fraction": mtry, "error": error})

    # First minimum over the ascending grid is the smallest tied mtry.
    best = min(range(len(stage2)), key=lambda i: (stage2[i]["error"], i))
    chosen = base.model_copy(update={"mtry_fraction": stage2[best]["mtry_fraction"], "max_depth": None})
    logger.info("RF tuning selected mtry_fraction=%.3g (CV error %.4f)", chosen.mtry_fraction, stage2[best]["error"])
    return TuningResult(config=chosen, stage1=tuple(stage1), stage2=tuple(stage2))
