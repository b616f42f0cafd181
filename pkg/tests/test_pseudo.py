"""Pseudo-labels, confidence gate and spherical k-means refinement."""
import itertools

import numpy as np
import pytest

from app.encoders import Architecture, EncoderPair
from app.errors import ShapeError
from app.pseudo import (assign_pseudo_labels, class_centroids, classifier_prototypes, pseudo_labels_from_logits,
                        refine_pseudo_labels, spherical_kmeans, with_cluster_labels)
from tests.conftest import unit_rows


def pair3(seed=0):
    return EncoderPair(Architecture(input_dim=4, hidden=(6,), proj_dim=3, num_classes=3),
                       rng=np.random.default_rng(seed))


def noisy_classes(rng, n_per_class, d=3, noise=0.1):
    labels = np.repeat(np.arange(d), n_per_class)
    x = np.eye(d)[labels] + rng.normal(0, noise, size=(len(labels), d))
    return x / np.linalg.norm(x, axis=1, keepdims=True), labels


# --- labels and gate ---

def test_label_is_argmax():
    (r,) = pseudo_labels_from_logits(np.array([[0.1, 2.0, 0.3]]), rho=0.95)
    assert r.label == 1
    assert 0.0 <= r.confidence <= 1.0


def test_gate_is_strict():
    logits = np.array([[np.log(0.96), np.log(0.04)]])
    (r,) = pseudo_labels_from_logits(logits, rho=0.95)
    assert r.gated
    (at_threshold,) = pseudo_labels_from_logits(logits, rho=r.confidence)
    assert not at_threshold.gated


def test_tie_goes_to_lowest_index():
    (r,) = pseudo_labels_from_logits(np.array([[1.0, 3.0, 3.0]]), rho=0.5)
    assert r.label == 1


def test_closed_gate_never_gates():
    results = pseudo_labels_from_logits(np.array([[10.0, 0.0], [0.0, 10.0]]), rho=0.5, gate_open=False)
    assert not any(r.gated for r in results)
    assert [r.label for r in results] == [0, 1]


def test_gate_monotone_in_rho(rng):
    logits = rng.normal(0, 3, size=(50, 4))
    previous = None
    for rho in (0.3, 0.5, 0.7, 0.9, 0.99):
        gated = {i for i, r in enumerate(pseudo_labels_from_logits(logits, rho)) if r.gated}
        if previous is not None:
            assert gated <= previous
        previous = gated


def test_argmax_invariant_to_positive_scaling(rng):
    logits = rng.normal(size=(20, 5))
    a = [r.label for r in pseudo_labels_from_logits(logits, 0.9)]
    b = [r.label for r in pseudo_labels_from_logits(logits * 7.5, 0.9)]
    assert a == b


def test_assign_uses_key_classifier(rng):
    pair = pair3()
    x = rng.standard_normal((5, 4))
    results = assign_pseudo_labels(pair, x, rho=0.95)
    expected = np.argmax(pair.encode_key(x).logits.values, axis=1)
    assert [r.label for r in results] == expected.tolist()
    assert [r.cluster_label for r in results] == expected.tolist()


def test_with_cluster_labels_keeps_classifier_label():
    results = pseudo_labels_from_logits(np.array([[2.0, 0.0]]), 0.5)
    (r,) = with_cluster_labels(results, [1])
    assert r.label == 0 and r.cluster_label == 1 and r.gated == results[0].gated


# --- spherical k-means ---

def test_single_cluster_centroid():
    state = spherical_kmeans(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.2]]), iters=5)
    assert np.allclose(state.centroids[0], [1 / np.sqrt(2), 1 / np.sqrt(2)])
    assert state.assignment.tolist() == [0, 0]


def test_antipodal_clusters_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = unit_rows(rng, 1, 3)[0]
        pts = np.concatenate([a + rng.normal(0, 0.05, (4, 3)), -a + rng.normal(0, 0.05, (4, 3))])
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        init = unit_rows(rng, 2, 3)
        state = spherical_kmeans(pts, init, iters=50)

        def objective(assign):
            total = 0.0
            for k in (0, 1):
                members = pts[np.array(assign) == k]
                if len(members):
                    total += np.linalg.norm(members.sum(axis=0))
            return total

        best = max(objective(a) for a in itertools.product((0, 1), repeat=len(pts)))
        assert objective(state.assignment) == pytest.approx(best, abs=1e-9)


def test_kmeans_reaches_fixed_point(rng):
    x, _ = noisy_classes(rng, 20, noise=0.4)
    state = spherical_kmeans(x, unit_rows(rng, 3, 3), iters=100)
    again = spherical_kmeans(x, state.centroids, iters=1)
    assert np.array_equal(again.assignment, state.assignment)


def test_kmeans_objective_non_decreasing(rng):
    x, _ = noisy_classes(rng, 30, noise=0.6)
    state = spherical_kmeans(x, unit_rows(rng, 3, 3), iters=20)
    assert all(b >= a - 1e-12 for a, b in zip(state.objective, state.objective[1:]))
    assert np.allclose(np.linalg.norm(state.centroids, axis=1), 1.0, atol=1e-9)
    assert state.assignment.min() >= 0 and state.assignment.max() < 3


def test_empty_cluster_keeps_centroid():
    x = np.array([[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)]])
    init = np.array([[1.0, 0.0], [-1.0, 0.0]])
    state = spherical_kmeans(x, init, iters=3)
    assert np.array_equal(state.centroids[1], [-1.0, 0.0])


def test_kmeans_argument_errors():
    with pytest.raises(ShapeError):
        spherical_kmeans(np.zeros((0, 2)), np.eye(2), iters=3)
    with pytest.raises(ShapeError):
        spherical_kmeans(np.eye(2), np.eye(2), iters=0)


# --- refinement ---

def test_class_centroids_marks_missing_classes():
    feats = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    centroids, present = class_centroids(feats, [0, 0], 3)
    assert present.tolist() == [True, False, False]
    assert np.allclose(centroids[0], [1 / np.sqrt(2), 1 / np.sqrt(2), 0.0])


def test_refine_identity_when_features_equal_centroids():
    pair = pair3()
    source = np.eye(3)
    labels, state = refine_pseudo_labels(pair, np.eye(3), [2, 2, 2], source, [0, 1, 2], iters=10)
    assert labels.tolist() == [0, 1, 2]
    assert state is not None


def test_refine_with_zero_iterations_is_bypass():
    labels, state = refine_pseudo_labels(pair3(), np.eye(3), [2, 0, 1], np.eye(3), [0, 1, 2], iters=0)
    assert labels.tolist() == [2, 0, 1]
    assert state is None


def test_refine_recovers_separable_classes(rng):
    pair = pair3()
    target, truth = noisy_classes(rng, 100, noise=0.15)
    source, source_labels = noisy_classes(rng, 30, noise=0.15)
    labels, _ = refine_pseudo_labels(pair, target, np.zeros(len(target), dtype=int), source, source_labels, iters=10)
    assert np.mean(labels == truth) >= 0.95


def test_missing_source_class_is_seeded_from_classifier():
    pair = pair3()
    protos = classifier_prototypes(pair)
    assert protos.shape == (3, 3)
    assert np.allclose(np.linalg.norm(protos, axis=1), 1.0)
    source = np.array([[1.0, 0.0, 0.0]])
    labels, state = refine_pseudo_labels(pair, np.array([[1.0, 0.0, 0.0]]), [0], source, [0], iters=1)
    assert labels.tolist() == [0]
    assert np.allclose(state.centroids[1:], protos[1:], atol=1e-12)
