import numpy as np
import pytest

from rankuap import autodiff as ad
from rankuap.errors import ConfigurationError, MetricError
from rankuap.landmarks import RankingSubset
from rankuap.objectives import (
    LabelWise,
    ListWise,
    PairWise,
    dcg,
    delta_ndcg_swap,
    labelwise_loss,
    lambda_weight,
    listwise_gradient,
    listwise_surrogate,
    ndcg,
    objective_from_name,
    pairwise_loss,
)


def brute_force_swap_delta(ratings, a, b):
    """Reference: recompute NDCG before and after swapping two positions."""
    before = ndcg(ratings)
    swapped = list(ratings)
    swapped[a], swapped[b] = swapped[b], swapped[a]
    return abs(ndcg(swapped) - before)


def make_subset(ratings):
    ratings = np.asarray(ratings, dtype=np.int64)
    return RankingSubset(
        query_index=0,
        member_indices=np.arange(len(ratings)),
        ratings=ratings,
        ideal_order=np.argsort(-ratings, kind="stable"),
    )


class TestObjectiveKinds:
    def test_from_name(self):
        assert isinstance(objective_from_name("label"), LabelWise)
        assert isinstance(objective_from_name("pair"), PairWise)
        assert isinstance(objective_from_name("list"), ListWise)

    def test_from_name_unknown(self):
        with pytest.raises(ConfigurationError):
            objective_from_name("pointwise")

    def test_pairwise_margin_validation(self):
        with pytest.raises(ConfigurationError):
            PairWise(alpha=-0.5)


class TestLabelWise:
    def test_hinge_value(self):
        logits = ad.Tensor(np.array([2.0, 0.5, 1.0]))
        assert labelwise_loss(logits, 0).item() == pytest.approx(1.0)

    def test_zero_when_target_below_rival(self):
        logits = ad.Tensor(np.array([0.1, 3.0, 1.0]))
        assert labelwise_loss(logits, 0).item() == 0.0

    def test_rival_excludes_target(self):
        # the target itself is the global maximum; the rival is the runner-up
        logits = ad.Tensor(np.array([5.0, 1.0, 4.0]))
        assert labelwise_loss(logits, 0).item() == pytest.approx(1.0)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            labelwise_loss(ad.Tensor(np.array([1.0])), 0)

    def test_gradient_direction(self):
        logits = ad.Tensor(np.array([2.0, 0.5, 1.0]), requires_grad=True)
        ad.backward(labelwise_loss(logits, 0))
        # pushes the target logit down and the strongest rival up
        assert logits.grad[0] == 1.0
        assert logits.grad[2] == -1.0
        assert logits.grad[1] == 0.0


class TestPairWise:
    def test_single_pair_value(self):
        anchor = ad.Tensor(np.array([0.0, 0.0]))
        far = np.array([3.0, 0.0])
        near = np.array([0.0, 1.0])
        # [alpha + d(far) - d(near)]_+ = 0.1 + 3 - 1
        loss = pairwise_loss(anchor, far, near, alpha=0.1)
        assert loss.item() == pytest.approx(2.1)

    def test_zero_when_corrupted(self):
        anchor = ad.Tensor(np.array([3.0, 0.0]))
        loss = pairwise_loss(anchor, np.array([3.0, 0.1]), np.array([0.0, 0.0]), alpha=0.1)
        assert loss.item() == 0.0

    def test_batch_sums_terms(self):
        anchor = ad.Tensor(np.zeros(2))
        far = np.array([[3.0, 0.0], [2.0, 0.0]])
        near = np.array([[0.0, 1.0], [0.0, 1.0]])
        single = (
            pairwise_loss(anchor, far[0], near[0]).item()
            + pairwise_loss(anchor, far[1], near[1]).item()
        )
        assert pairwise_loss(anchor, far, near).item() == pytest.approx(single)

    def test_batch_shape_mismatch(self):
        anchor = ad.Tensor(np.zeros(2))
        with pytest.raises(ConfigurationError):
            pairwise_loss(anchor, np.zeros((2, 2)), np.zeros((3, 2)))


class TestRankingMath:
    def test_dcg_hand_value(self):
        assert dcg([3, 2, 1]) == pytest.approx(9.3928, abs=1e-3)

    def test_ndcg_reversed_hand_value(self):
        assert ndcg([1, 2, 3]) == pytest.approx(0.6806, abs=1e-3)

    def test_dcg_empty(self):
        assert dcg([]) == 0.0

    def test_ndcg_perfect_order(self):
        assert ndcg([3, 2, 1]) == pytest.approx(1.0)

    def test_dcg_negative_rating(self):
        with pytest.raises(MetricError):
            dcg([1, -1])

    def test_ndcg_all_zero(self):
        with pytest.raises(MetricError):
            ndcg([0, 0, 0])

    def test_swap_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 11))
            ratings = rng.integers(0, 5, size=n)
            if ratings.max() == 0:
                ratings[0] = 1
            a, b = rng.choice(n, size=2, replace=False)
            assert delta_ndcg_swap(ratings, int(a), int(b)) == pytest.approx(
                brute_force_swap_delta(ratings, int(a), int(b)), abs=1e-9
            )

    def test_swap_invalid_positions(self):
        with pytest.raises(IndexError):
            delta_ndcg_swap([1, 2], 0, 0)
        with pytest.raises(IndexError):
            delta_ndcg_swap([1, 2], 0, 5)

    def test_lambda_weight_hand_value(self):
        expected = -0.2 / (1.0 + np.exp(0.5 - 0.3))
        assert lambda_weight(0.5, 0.3, 0.2) == pytest.approx(expected)

    def test_lambda_weight_negative_delta(self):
        with pytest.raises(MetricError):
            lambda_weight(0.1, 0.2, -0.5)

    def test_lambda_weight_sign(self):
        assert lambda_weight(1.0, 0.0, 0.3) < 0


class TestListwiseSurrogate:
    def test_none_below_two_members(self):
        subset = make_subset([1])
        q = ad.Tensor(np.zeros(2), requires_grad=True)
        assert listwise_surrogate(subset, q, np.zeros((1, 2))) is None

    def test_none_when_fully_corrupted(self):
        # member with the highest rating is already nearest: nothing to push
        subset = make_subset([2, 1])
        q = ad.Tensor(np.zeros(2), requires_grad=True)
        members = np.array([[0.1, 0.0], [5.0, 0.0]])
        assert listwise_surrogate(subset, q, members) is None

    def test_ascent_increases_rating_ndcg(self):
        """Gradient ascent steps on the query must raise NDCG measured
        against the subset ratings."""
        rng = np.random.default_rng(7)
        subset = make_subset([1, 4, 2, 3])
        members = rng.normal(size=(4, 8))
        q = rng.normal(size=8)

        def rating_ndcg(qv):
            d = np.linalg.norm(members - qv, axis=1)
            return ndcg(subset.ratings[np.argsort(d, kind="stable")])

        before = rating_ndcg(q)
        assert before < 1.0
        for _ in range(300):
            leaf = ad.Tensor(q, requires_grad=True)
            surrogate = listwise_surrogate(subset, leaf, members)
            if surrogate is None:
                break
            ad.backward(surrogate)
            step = leaf.grad / np.linalg.norm(leaf.grad)
            q = q + 0.05 * step
        assert rating_ndcg(q) == pytest.approx(1.0)

    def test_gradient_wrapper_zero_when_none(self):
        subset = make_subset([1])
        leaf = ad.Tensor(np.zeros(2), requires_grad=True)
        grad = listwise_gradient(subset, leaf, np.zeros((1, 2)), leaf)
        assert np.array_equal(grad, np.zeros(2))

    def test_gradient_matches_pair_reconstruction(self):
        """The leaf gradient equals the lambda-weighted sum over disagreeing
        pairs reconstructed independently from the public ranking math."""
        rng = np.random.default_rng(11)
        subset = make_subset([3, 1, 2])
        members = rng.normal(size=(3, 4))
        q0 = rng.normal(size=4)
        leaf = ad.Tensor(q0, requires_grad=True)
        surrogate = listwise_surrogate(subset, leaf, members)
        assert surrogate is not None
        ad.backward(surrogate)

        d = np.linalg.norm(members - q0, axis=1)
        order = np.argsort(d, kind="stable")
        pos = np.empty(len(d), dtype=np.int64)
        pos[order] = np.arange(len(d))
        expected = np.zeros(4)
        for a in range(3):
            for b in range(3):
                if subset.ratings[a] <= subset.ratings[b] or d[a] <= d[b]:
                    continue
                delta = delta_ndcg_swap(subset.ratings[order], int(pos[a]), int(pos[b]))
                lam = lambda_weight(d[a], d[b], delta)
                expected += lam * ((q0 - members[a]) / d[a] - (q0 - members[b]) / d[b])
        np.testing.assert_allclose(leaf.grad, expected, rtol=1e-10, atol=1e-12)
