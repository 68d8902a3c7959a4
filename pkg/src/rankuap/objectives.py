"""The three attack losses: label-wise hinge on classifier logits, pair-wise
triplet corruption, and the list-wise lambda-weighted NDCG gradient surrogate.

Sign conventions: the label-wise and pair-wise losses are minimized; the
list-wise surrogate is built so that ascending its gradient increases NDCG
measured against the reversed-ideal ratings (farthest landmark rated highest),
which is what corrupts the true ranking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, MetricError


@dataclass(frozen=True)
class LabelWise:
    name = "label"


@dataclass(frozen=True)
class PairWise:
    alpha: float = 0.1
    name = "pair"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"pair-wise margin must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class ListWise:
    name = "list"


def objective_from_name(name, alpha=0.1):
    if name == "label":
        return LabelWise()
    if name == "pair":
        return PairWise(alpha=alpha)
    if name == "list":
        return ListWise()
    raise ConfigurationError(f"unknown objective: {name!r}")


# ---------------------------------------------------------------------------
# Label-wise (classifier hinge)
# ---------------------------------------------------------------------------


def labelwise_loss(logits, t):
    """[Z_t - max_{i != t} Z_i]_+ ; ties send the subgradient to the lowest rival."""
    if logits.data.shape[0] < 2:
        raise ConfigurationError("label-wise loss needs at least 2 classes")
    t = int(t)
    rivals = np.delete(logits.data, t)
    rival_local = int(np.argmax(rivals))  # first maximal -> lowest index
    rival = rival_local if rival_local < t else rival_local + 1
    return ad.relu(ad.sub(ad.index(logits, t), ad.index(logits, rival)))


# ---------------------------------------------------------------------------
# Pair-wise (triplet corruption)
# ---------------------------------------------------------------------------


def pairwise_loss(anchor_adv, far_neg, near_pos, alpha=0.1):
    """[alpha + d(f_j, f') - d(f_k, f')]_+ summed over the tuple batch.

    `far_neg`/`near_pos` are clean descriptor vectors, either a single (D,) pair
    or matching (B, D) batches; `anchor_adv` is the differentiable perturbed
    anchor descriptor.
    """
    far_neg = np.atleast_2d(np.asarray(far_neg, dtype=np.float64))
    near_pos = np.atleast_2d(np.asarray(near_pos, dtype=np.float64))
    if far_neg.shape != near_pos.shape:
        raise ConfigurationError("far_neg and near_pos batches must match")
    terms = []
    for fj, fk in zip(far_neg, near_pos):
        gap = ad.sub(
            ad.euclidean_distance(ad.constant(fj), anchor_adv),
            ad.euclidean_distance(ad.constant(fk), anchor_adv),
        )
        terms.append(ad.relu(ad.add(ad.Tensor(float(alpha)), gap)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# ---------------------------------------------------------------------------
# Ranking math (DCG / NDCG / swap deltas / lambda weights)
# ---------------------------------------------------------------------------


def dcg(ratings_in_list_order):
    """Sum_i (2^y_i - 1) / log2(i + 1) with positions indexed from 1."""
    total = 0.0
    for i, y in enumerate(ratings_in_list_order, start=1):
        if y < 0:
            raise MetricError("DCG needs non-negative ratings")
        total += (2.0**y - 1.0) / np.log2(i + 1)
    return float(total)


def ndcg(ratings_in_list_order):
    ideal = dcg(sorted(ratings_in_list_order, reverse=True))
    if ideal == 0.0:
        raise MetricError("NDCG undefined: all ratings are zero")
    return dcg(ratings_in_list_order) / ideal


def delta_ndcg_swap(ratings_in_list_order, pos_a, pos_b):
    """|NDCG change if positions a and b swap|, touching only the two terms."""
    ratings = list(ratings_in_list_order)
    n = len(ratings)
    if not (0 <= pos_a < n and 0 <= pos_b < n) or pos_a == pos_b:
        raise IndexError(f"invalid swap positions ({pos_a}, {pos_b}) for length {n}")
    ideal = dcg(sorted(ratings, reverse=True))
    if ideal == 0.0:
        raise MetricError("NDCG undefined: all ratings are zero")
    gain_a = 2.0 ** ratings[pos_a] - 1.0
    gain_b = 2.0 ** ratings[pos_b] - 1.0
    disc_a = 1.0 / np.log2(pos_a + 2)
    disc_b = 1.0 / np.log2(pos_b + 2)
    return float(abs((gain_a - gain_b) * (disc_a - disc_b)) / ideal)


def lambda_weight(d_j, d_k, delta):
    """-delta / (1 + e^(d_j - d_k)); the LambdaRank-style pair weight."""
    if delta < 0:
        raise MetricError("lambda weight needs a non-negative NDCG delta")
    return float(-delta / (1.0 + np.exp(d_j - d_k)))


# ---------------------------------------------------------------------------
# List-wise surrogate gradient
# ---------------------------------------------------------------------------


def listwise_surrogate(subset, query_adv, member_descs):
    """Scalar surrogate whose gradient ascends NDCG against the subset ratings.

    Enumerates all member pairs whose current distance order disagrees with the
    ideal (rating-descending) order and accumulates lambda-weighted distance
    residuals. Returns None when the subset has fewer than 2 members or no
    pair disagrees.
    """
    member_descs = np.asarray(member_descs, dtype=np.float64)
    m = len(subset.member_indices)
    if m < 2 or member_descs.shape[0] != m:
        return None
    dists = [ad.euclidean_distance(query_adv, ad.constant(v)) for v in member_descs]
    dvals = np.array([d.item() for d in dists])
    order = np.argsort(dvals, kind="stable")  # current list, nearest first
    pos = np.empty(m, dtype=np.int64)
    pos[order] = np.arange(m)

    # pairs whose current distance order disagrees with the rating order
    mask = (subset.ratings[:, None] > subset.ratings[None, :]) & (
        dvals[:, None] > dvals[None, :]
    )
    if not mask.any():
        return None
    gains = 2.0 ** subset.ratings.astype(np.float64) - 1.0
    disc = 1.0 / np.log2(pos + 2.0)
    ideal = dcg(sorted(subset.ratings, reverse=True))
    delta = np.abs((gains[:, None] - gains[None, :]) * (disc[:, None] - disc[None, :])) / ideal
    lam = np.where(mask, -delta / (1.0 + np.exp(dvals[:, None] - dvals[None, :])), 0.0)
    coeff = lam.sum(axis=1) - lam.sum(axis=0)
    return ad.dot_const(ad.stack1d(dists), coeff)


def listwise_gradient(subset, query_adv, member_descs, wrt):
    """Gradient of the list-wise surrogate with respect to the leaf `wrt`."""
    surrogate = listwise_surrogate(subset, query_adv, member_descs)
    if surrogate is None:
        return np.zeros_like(wrt.data)
    wrt.zero_grad()
    ad.backward(surrogate)
    return np.array(wrt.grad) if wrt.grad is not None else np.zeros_like(wrt.data)
