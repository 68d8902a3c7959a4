"""Landmark structure over clean descriptors: K-means centroids, pseudo-labels,
ordered tuples for the pair-wise attack, and per-landmark ranking subsets with
ratings for the list-wise attack.

Landmarks are computed once on clean descriptors and stay frozen during the
attack; sampling operations are pure given a seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .container import load_container, save_container
from .errors import ConfigurationError, FormatError

LANDMARK_KIND = "landmark-model"


@dataclass
class LandmarkModel:
    centroids: np.ndarray  # (k, D)
    assignments: np.ndarray  # per-image centroid index (the pseudo-label)
    center_distances: np.ndarray  # (k, k) inter-centroid Euclidean distances
    inertia: float = 0.0

    @property
    def k(self):
        return self.centroids.shape[0]

    def members(self, cluster):
        return np.flatnonzero(self.assignments == cluster)


@dataclass
class TupleSet:
    tuples: list  # (anchor i, far-negative j, near-positive k) index triples
    skipped_anchors: int = 0


@dataclass
class RankingSubset:
    query_index: int
    member_indices: np.ndarray  # one reference per landmark
    ratings: np.ndarray  # integer relevance per member; farthest landmark highest
    ideal_order: np.ndarray  # permutation of member positions, ratings descending


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[i] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans_fit(descriptors, k, seed=0, max_iters=100):
    """Lloyd's algorithm with k-means++ seeding; deterministic given the seed."""
    x = np.asarray([getattr(d, "vector", d) for d in descriptors], dtype=np.float64)
    if k > len(np.unique(x, axis=0)):
        raise ConfigurationError(f"k={k} exceeds the number of distinct descriptors")
    rng = np.random.default_rng([seed, 0x63A])
    centroids = _kmeans_pp_init(x, k, rng)
    assignments = None
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            mask = assignments == c
            if mask.any():
                centroids[c] = x[mask].mean(axis=0)
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), assignments].sum())
    diffs = centroids[:, None, :] - centroids[None, :, :]
    center_distances = np.sqrt((diffs**2).sum(axis=2))
    np.fill_diagonal(center_distances, 0.0)
    return LandmarkModel(
        centroids=centroids,
        assignments=assignments,
        center_distances=center_distances,
        inertia=inertia,
    )


def farthest_cluster(lm, cluster):
    """Index of the cluster farthest from `cluster`; ties to the lowest index."""
    return int(np.argmax(lm.center_distances[cluster]))


def build_tuples(lm, per_anchor=1, seed=0):
    """Ordered (i, j, k) triples: k shares i's cluster, j is in the farthest one."""
    rng = np.random.default_rng([seed, 0x709])
    tuples = []
    skipped = 0
    for c in range(lm.k):
        if len(lm.members(c)) == 0:
            raise ConfigurationError(f"cluster {c} is empty")
    for i in range(len(lm.assignments)):
        ci = int(lm.assignments[i])
        positives = lm.members(ci)
        positives = positives[positives != i]
        if len(positives) == 0:
            skipped += 1
            continue
        negatives = lm.members(farthest_cluster(lm, ci))
        for _ in range(per_anchor):
            k = int(rng.choice(positives))
            j = int(rng.choice(negatives))
            tuples.append((i, j, k))
    if skipped:
        warnings.warn(f"build_tuples: skipped {skipped} singleton-cluster anchors", stacklevel=2)
    return TupleSet(tuples=tuples, skipped_anchors=skipped)


def landmark_ratings(lm, query_cluster):
    """Rating per landmark: 1-based rank in ascending distance from the query's
    landmark, so the farthest landmark carries the highest rating (the reversed
    cluster-center ranking)."""
    dists = lm.center_distances[query_cluster]
    asc = np.argsort(dists, kind="stable")
    ratings = np.empty(lm.k, dtype=np.int64)
    ratings[asc] = np.arange(1, lm.k + 1)
    return ratings


def sample_ranking_subset(lm, query_index, seed=0):
    """One reference sampled per landmark, rated by reversed center ranking."""
    rng = np.random.default_rng([seed, 0x5AB, int(query_index)])
    qc = int(lm.assignments[query_index])
    ratings_by_cluster = landmark_ratings(lm, qc)
    members, ratings = [], []
    skipped = 0
    for c in range(lm.k):
        pool = lm.members(c)
        pool = pool[pool != query_index]
        if len(pool) == 0:
            skipped += 1
            continue
        members.append(int(rng.choice(pool)))
        ratings.append(int(ratings_by_cluster[c]))
    if skipped:
        warnings.warn(f"sample_ranking_subset: {skipped} empty landmarks skipped", stacklevel=2)
    members = np.asarray(members, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.int64)
    ideal_order = np.argsort(-ratings, kind="stable")
    return RankingSubset(
        query_index=int(query_index),
        member_indices=members,
        ratings=ratings,
        ideal_order=ideal_order,
    )


def save_landmarks(lm, path):
    save_container(
        path,
        {"kind": LANDMARK_KIND, "inertia": lm.inertia},
        [lm.centroids, lm.assignments.astype(np.float64), lm.center_distances],
    )


def load_landmarks(path):
    header, arrays = load_container(path)
    if header.get("kind") != LANDMARK_KIND:
        raise FormatError(f"{path}: kind {header.get('kind')!r} is not a landmark model")
    centroids, assignments, center_distances = arrays
    return LandmarkModel(
        centroids=centroids,
        assignments=assignments.astype(np.int64),
        center_distances=center_distances,
        inertia=float(header.get("inertia", 0.0)),
    )
