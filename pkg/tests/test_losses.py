import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dsva.losses import (
    LossConfig,
    cosine_discrimination,
    joint_loss,
    supervised_ce_loss,
    weighted_cosine,
)
from dsva.saliency import SaliencyMap

from oracles import central_difference, scalar_cosine


def test_identity_antipodal_orthogonal():
    F = torch.randn(3, 5, 4)
    assert float(cosine_discrimination(F, F)) == pytest.approx(1.0, abs=1e-6)
    assert float(cosine_discrimination(F, -F)) == pytest.approx(-1.0, abs=1e-6)
    e1, e2 = torch.eye(4)[:1], torch.eye(4)[1:2]
    assert float(cosine_discrimination(e1, e2)) == 0.0


def test_zero_norm_is_zero_with_warning():
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        v = cosine_discrimination(torch.zeros(1, 4), torch.ones(1, 4))
    assert float(v) == 0.0


def test_zero_norm_gradient_is_finite():
    Fa = torch.zeros(2, 3, requires_grad=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cosine_discrimination(torch.ones(2, 3), Fa).backward()
    assert torch.isfinite(Fa.grad).all()


def test_batch_average_of_flattened_samples():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 6, 3, generator=gen), torch.randn(4, 6, 3, generator=gen)
    per = [scalar_cosine(a[i].reshape(-1).tolist(), b[i].reshape(-1).tolist()) for i in range(4)]
    assert float(cosine_discrimination(a, b)) == pytest.approx(np.mean(per), abs=1e-6)


def test_weighted_cosine_hand_example():
    # Independent scalar oracle: weights 0.8 and 0.2 scale the two one-dimensional tokens.
    expected = scalar_cosine([1 * 0.8, 1 * 0.2], [1 * 0.8, -1 * 0.2])
    assert expected == pytest.approx(0.60 / 0.68, abs=1e-12)
    Fx = torch.tensor([[[1.0], [1.0]]])
    Fa = torch.tensor([[[1.0], [-1.0]]])
    S = SaliencyMap(torch.tensor([[0.8, 0.2]]), layer=1, gamma=100.0)
    assert float(weighted_cosine(Fx, Fa, S)) == pytest.approx(expected, abs=1e-6)
    assert float(weighted_cosine(Fx, Fa, S)) == pytest.approx(0.8824, abs=1e-4)


@pytest.mark.parametrize("gamma", [1.0, 7.0, 100.0])
def test_uniform_saliency_equals_unweighted(gamma):
    gen = torch.Generator().manual_seed(1)
    a, b = torch.randn(2, 9, 5, generator=gen), torch.randn(2, 9, 5, generator=gen)
    S = SaliencyMap(torch.full((2, 9), 1 / 10), layer=1, gamma=gamma)
    assert float(weighted_cosine(a, b, S)) == pytest.approx(float(cosine_discrimination(a, b)), abs=1e-6)


def test_token_count_mismatch():
    S = SaliencyMap(torch.rand(1, 4), layer=1)
    with pytest.raises(ValueError):
        weighted_cosine(torch.rand(1, 5, 2), torch.rand(1, 5, 2), S)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gamma_invariance(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 16, 8, generator=gen), torch.randn(2, 16, 8, generator=gen)
    w = torch.rand(2, 16, generator=gen)
    l1 = weighted_cosine(a, b, SaliencyMap(w, 1, gamma=1.0))
    l100 = weighted_cosine(a, b, SaliencyMap(w, 1, gamma=100.0))
    assert abs(float(l1) - float(l100)) < 1e-6


def test_weighting_has_an_effect():
    gen = torch.Generator().manual_seed(3)
    found = False
    for _ in range(20):
        a, b = torch.randn(1, 16, 8, generator=gen), torch.randn(1, 16, 8, generator=gen)
        w = torch.rand(1, 16, generator=gen)
        d = float(weighted_cosine(a, b, SaliencyMap(w, 1)) - weighted_cosine(a, b, SaliencyMap(w**2, 1)))
        found |= abs(d) > 1e-3
    assert found


@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_finite_differences(weighted):
    gen = torch.Generator().manual_seed(4)
    Fx = torch.randn(2, 12, 6, generator=gen)
    Fa = torch.randn(2, 12, 6, generator=gen)
    w = torch.rand(2, 12, generator=gen)

    def loss(fa, dtype=torch.float32):
        fx = Fx.to(dtype)
        if weighted:
            return weighted_cosine(fx, fa, SaliencyMap(w.to(dtype), 1, gamma=100.0))
        return cosine_discrimination(fx, fa)

    Fg = Fa.clone().requires_grad_(True)
    loss(Fg).backward()
    grad = Fg.grad.reshape(-1).double()
    coords = torch.randperm(Fa.numel(), generator=gen)[:64].tolist()
    fd = central_difference(lambda z: float(loss(torch.from_numpy(z), torch.float64)), Fa.double().numpy(), coords, 1e-6)
    fd = torch.from_numpy(fd)
    assert float((grad[coords] - fd).norm() / fd.norm()) < 1e-2


def test_joint_loss_values():
    assert float(joint_loss(torch.tensor(0.2), torch.tensor(0.4), 0.5)) == pytest.approx(0.3)
    a, b = torch.tensor(0.123), torch.tensor(-0.77)
    assert torch.equal(joint_loss(a, b, 1.0), a)
    assert torch.equal(joint_loss(a, b, 0.0), b)
    assert joint_loss(a, None, 0.3) is a


@pytest.mark.parametrize("lam", [-0.1, 1.5])
def test_joint_loss_range(lam):
    with pytest.raises(ValueError):
        joint_loss(torch.tensor(0.0), torch.tensor(0.0), lam)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_joint_loss_affine_in_lambda(a, b):
    a64, b64 = torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    mid = float(joint_loss(a64, b64, 0.5))
    ends = (float(joint_loss(a64, b64, 0.0)) + float(joint_loss(a64, b64, 1.0))) / 2
    assert abs(mid - ends) < 1e-7


def test_ce_uniform_logits():
    v = supervised_ce_loss(torch.zeros(1, 10), torch.tensor([3]))
    assert float(v) == pytest.approx(-math.log(10), abs=1e-4)


def test_ce_confident_correct_is_near_zero():
    logits = torch.tensor([[50.0, 0.0, 0.0]])
    assert abs(float(supervised_ce_loss(logits, torch.tensor([0])))) < 1e-6


def test_ce_batch_mean():
    gen = torch.Generator().manual_seed(5)
    logits = torch.randn(2, 4, generator=gen)
    labels = torch.tensor([1, 3])
    each = [float(supervised_ce_loss(logits[i : i + 1], labels[i : i + 1])) for i in range(2)]
    assert float(supervised_ce_loss(logits, labels)) == pytest.approx(np.mean(each), abs=1e-6)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        supervised_ce_loss(torch.zeros(1, 3), torch.tensor([3]))


def test_loss_config_validation():
    LossConfig().validate(6, 6)
    with pytest.raises(ValueError):
        LossConfig(lam=2.0).validate()
    with pytest.raises(ValueError):
        LossConfig(facet_I="x").validate()
    with pytest.raises(ValueError):
        LossConfig(layer_I=7).validate(6, 6)
