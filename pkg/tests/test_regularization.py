import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dadet.errors import ContractError, ModeError
from dadet.regularization import (
    TripletFeatures,
    feature_distance,
    image_triplet_loss,
    object_triplet_loss,
)

finite_floats = st.floats(-5.0, 5.0, allow_nan=False)


class TestFeatureDistance:
    def test_identity_of_indiscernibles(self):
        a = torch.randn(3, 4)
        assert float(feature_distance(a, a)) == 0.0

    def test_unit_offset(self):
        a = torch.randn(2, 5)
        assert float(feature_distance(a, a + 1.0)) == pytest.approx(1.0, rel=1e-6)

    def test_arithmetic(self):
        a = torch.tensor([0.0, 0.0])
        b = torch.tensor([3.0, 4.0])
        assert float(feature_distance(a, b)) == pytest.approx(12.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            feature_distance(torch.zeros(2), torch.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite_floats, min_size=1, max_size=8),
           st.lists(finite_floats, min_size=1, max_size=8))
    def test_symmetry(self, xs, ys):
        n = min(len(xs), len(ys))
        a = torch.tensor(xs[:n], dtype=torch.float64)
        b = torch.tensor(ys[:n], dtype=torch.float64)
        assert float(feature_distance(a, b)) == float(feature_distance(b, a))


def _triplet(d_pos: float, d_neg: float, margin: float = 1.0) -> TripletFeatures:
    # One-element features realize any desired pair of squared distances.
    anchor = torch.zeros(1, dtype=torch.float64)
    return TripletFeatures(
        anchor=anchor,
        positive=torch.tensor([d_pos**0.5], dtype=torch.float64),
        negative=torch.tensor([d_neg**0.5], dtype=torch.float64),
        margin=margin,
    )


class TestImageTripletLoss:
    def test_satisfied_margin_gives_zero(self):
        assert float(image_triplet_loss(_triplet(0.2, 1.5))) == 0.0

    def test_positive_equals_negative_leaves_margin(self):
        t = TripletFeatures(torch.randn(4), torch.ones(4), torch.ones(4), margin=1.0)
        assert float(image_triplet_loss(t)) == pytest.approx(1.0)

    def test_violating_order_pays_hinge(self):
        assert float(image_triplet_loss(_triplet(0.9, 0.4))) == pytest.approx(1.5, rel=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            TripletFeatures(torch.zeros(2), torch.zeros(3), torch.zeros(2))

    def test_margin_must_be_positive(self):
        with pytest.raises(ContractError):
            TripletFeatures(torch.zeros(2), torch.zeros(2), torch.zeros(2), margin=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 4.0), st.floats(0.0, 4.0), st.floats(0.05, 2.0))
    def test_satisfied_ordering_equivalence(self, d_pos, d_neg, margin):
        loss = float(image_triplet_loss(_triplet(d_pos, d_neg, margin)))
        t = _triplet(d_pos, d_neg, margin)
        d_st = float(feature_distance(t.anchor, t.positive))
        d_sa = float(feature_distance(t.anchor, t.negative))
        assert (loss == 0.0) == (d_st + margin <= d_sa)
        assert loss >= 0.0


class TestObjectTripletLoss:
    def test_identical_feature_sets_leave_margin(self):
        rows = torch.randn(5, 6)
        t = TripletFeatures(rows, rows.clone(), rows.clone(), margin=1.0)
        assert float(object_triplet_loss(t)) == pytest.approx(1.0)

    def test_mean_of_per_proposal_hinges(self):
        # Rows engineered for hinges {0, 0, 1.5} with margin 1.
        anchor = torch.zeros(3, 1, dtype=torch.float64)
        positive = torch.tensor([[0.2], [0.3], [0.9]], dtype=torch.float64) ** 0.5
        negative = torch.tensor([[1.5], [2.0], [0.4]], dtype=torch.float64) ** 0.5
        t = TripletFeatures(anchor, positive, negative, margin=1.0)
        assert float(object_triplet_loss(t)) == pytest.approx(0.5, rel=1e-9)

    def test_zero_proposals_is_zero_by_convention(self):
        t = TripletFeatures(torch.zeros(0, 4), torch.zeros(0, 4), torch.zeros(0, 4))
        assert float(object_triplet_loss(t)) == 0.0

    def test_unaligned_mode_is_an_error(self):
        rows = torch.zeros(2, 3)
        t = TripletFeatures(rows, rows, rows)
        with pytest.raises(ModeError):
            object_triplet_loss(t, aligned_mode=False)


class TestGradients:
    def test_zero_loss_region_has_zero_gradients(self):
        anchor = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
        positive = (0.05 * torch.ones(2, 3, dtype=torch.float64)).requires_grad_(True)
        negative = (3.0 * torch.ones(2, 3, dtype=torch.float64)).requires_grad_(True)
        loss = object_triplet_loss(TripletFeatures(anchor, positive, negative))
        assert float(loss.detach()) == 0.0
        loss.backward()
        for member in (anchor, positive, negative):
            assert torch.equal(member.grad, torch.zeros_like(member))

    @pytest.mark.parametrize("loss_fn", [image_triplet_loss, object_triplet_loss])
    def test_analytic_gradient_matches_central_differences(self, loss_fn):
        torch.manual_seed(11)
        members = [
            torch.randn(2, 3, dtype=torch.float64, requires_grad=True) for _ in range(3)
        ]

        def evaluate():
            return loss_fn(TripletFeatures(*members, margin=0.7))

        loss = evaluate()
        loss.backward()
        eps = 1e-6
        for member in members:
            flat = member.data.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                with torch.no_grad():
                    flat[i] = orig + eps
                    up = float(evaluate())
                    flat[i] = orig - eps
                    down = float(evaluate())
                    flat[i] = orig
                numeric = (up - down) / (2 * eps)
                assert float(member.grad.reshape(-1)[i]) == pytest.approx(
                    numeric, rel=1e-4, abs=1e-8
                )
