"""
Target pseudo-labels.

The momentum (key) classifier labels each target sample; a confidence gate
decides which labels supervise the query classifier; spherical k-means,
anchored at per-class source centroids, refines the labels that go into the
target memory bank.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .encoders import EncoderPair, softmax
from .errors import ShapeError
from .numgrad import NORM_EPS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabelResult:
    label: int
    confidence: float
    cluster_label: int
    gated: bool


@dataclass
class ClusterState:
    centroids: np.ndarray
    assignment: np.ndarray
    iterations: int
    objective: List[float] = field(default_factory=list)

    def assign(self, features: np.ndarray) -> np.ndarray:
        """Nearest centroid by cosine similarity; ties go to the lowest index."""
        return np.argmax(np.asarray(features) @ self.centroids.T, axis=1)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, NORM_EPS)


# --- PSEUDO-LABELING ---

def pseudo_labels_from_logits(key_logits: np.ndarray, rho: float, gate_open: bool = True,
                              cluster_labels: Optional[Sequence[int]] = None) -> List[PseudoLabelResult]:
    probs = softmax(np.asarray(key_logits, dtype=np.float64))
    labels = np.argmax(probs, axis=1)
    confidence = probs[np.arange(len(labels)), labels]
    results = []
    for i, (label, conf) in enumerate(zip(labels, confidence)):
        cluster = int(cluster_labels[i]) if cluster_labels is not None else int(label)
        results.append(PseudoLabelResult(
            label=int(label),
            confidence=float(conf),
            cluster_label=cluster,
            gated=bool(gate_open and conf > rho),
        ))
    return results


def assign_pseudo_labels(pair: EncoderPair, x_key_view: np.ndarray, rho: float,
                         gate_open: bool = True) -> List[PseudoLabelResult]:
    """Argmax of the key classifier on the key view; gated iff confidence > rho."""
    out = pair.encode_key(x_key_view)
    return pseudo_labels_from_logits(out.logits.values, rho, gate_open)


def with_cluster_labels(results: Sequence[PseudoLabelResult], cluster_labels: Sequence[int]) -> List[PseudoLabelResult]:
    return [
        PseudoLabelResult(r.label, r.confidence, int(c), r.gated)
        for r, c in zip(results, cluster_labels)
    ]


# --- SPHERICAL K-MEANS ---

def _objective(features: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    return float(np.sum(np.einsum("ij,ij->i", features, centroids[assignment])))


def spherical_kmeans(features: np.ndarray, init_centroids: np.ndarray, iters: int) -> ClusterState:
    """
    Alternate cosine assignment and normalized-mean centroid updates.
    Empty clusters (and clusters whose members cancel out) keep their centroid.
    Stops after `iters` updates or once the assignment no longer changes.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError("spherical_kmeans needs at least one feature row")
    if iters < 1:
        raise ShapeError(f"iters must be at least 1, got {iters}")
    centroids = _normalize_rows(np.asarray(init_centroids, dtype=np.float64).copy())
    if centroids.shape[1] != features.shape[1]:
        raise ShapeError(f"centroid dim {centroids.shape[1]} does not match features {features.shape[1]}")

    state = ClusterState(centroids=centroids, assignment=np.zeros(len(features), dtype=np.int64), iterations=0)
    assignment = state.assign(features)
    state.objective.append(_objective(features, centroids, assignment))

    for it in range(1, iters + 1):
        updated = centroids.copy()
        for k in range(len(centroids)):
            members = features[assignment == k]
            if len(members) == 0:
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > NORM_EPS:
                updated[k] = mean / norm
        centroids = updated
        state.centroids = centroids
        state.iterations = it
        new_assignment = state.assign(features)
        state.objective.append(_objective(features, centroids, new_assignment))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

    state.assignment = assignment
    return state


def class_centroids(features: np.ndarray, labels: Sequence[int], num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class L2-normalized mean features and a mask of classes that had samples."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    centroids = np.zeros((num_classes, features.shape[1]))
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        members = features[labels == c]
        if len(members):
            centroids[c] = members.mean(axis=0)
            present[c] = True
    return _normalize_rows(centroids), present


def classifier_prototypes(pair: EncoderPair) -> np.ndarray:
    """
    Classifier weight rows mapped through the key projection head, normalized.
    Seeds the centroid of a class that has no source sample in the pool.
    """
    w = pair.theta_k["psi.cls.weight"].values.T  # (C, feat_dim)
    proj = w @ pair.theta_k["beta.proj.weight"].values + pair.theta_k["beta.proj.bias"].values
    return _normalize_rows(proj)


def refine_pseudo_labels(pair: EncoderPair, target_features: np.ndarray, classifier_labels: Sequence[int],
                         source_features: np.ndarray, source_labels: Sequence[int],
                         iters: int) -> Tuple[np.ndarray, Optional[ClusterState]]:
    """
    Spherical k-means over pooled target key features, initialized at the
    source class centroids so cluster k stands for class k. With iters == 0
    the classifier labels pass through unchanged.
    """
    if iters == 0:
        return np.asarray(classifier_labels, dtype=np.int64).copy(), None

    centroids, present = class_centroids(source_features, source_labels, pair.num_classes)
    if not present.all():
        missing = np.flatnonzero(~present)
        logger.debug(f"seeding centroids of classes {missing.tolist()} from classifier weights")
        centroids[missing] = classifier_prototypes(pair)[missing]
    state = spherical_kmeans(target_features, centroids, iters)
    return state.assignment.copy(), state
