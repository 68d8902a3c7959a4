"""Retrieval metrics: average precision, precision@k, dropping rate."""

from __future__ import annotations

import warnings

import numpy as np

from .errors import MetricError


def average_precision(ranked_references, relevant_set):
    """Mean over relevant items of precision at each relevant item's rank."""
    if not relevant_set:
        raise MetricError("average precision undefined for an empty relevant set")
    hits = 0
    precisions = []
    for rank, ref in enumerate(ranked_references, start=1):
        if ref in relevant_set:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return 0.0
    return float(np.sum(precisions) / len(relevant_set))


def precision_at_k(ranked_references, relevant_set, k=10):
    if k < 1:
        raise MetricError(f"precision@k needs k >= 1, got {k}")
    if k > len(ranked_references):
        warnings.warn(
            f"precision@{k} over a list of {len(ranked_references)}; using the full list",
            stacklevel=2,
        )
    prefix = ranked_references[:k]
    return sum(1 for r in prefix if r in relevant_set) / k


def dropping_rate(clean, attacked):
    """(clean - attacked) / clean, in percent."""
    if clean <= 0:
        raise MetricError("dropping rate undefined for clean metric <= 0")
    return (clean - attacked) / clean * 100.0


def rank_references(query_desc, reference_descs):
    """Indices of references by ascending distance; ties broken by index."""
    dists = np.linalg.norm(reference_descs - query_desc, axis=1)
    return np.argsort(dists, kind="stable")
