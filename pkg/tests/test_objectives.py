import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oodseg import objectives as obj

mpmath.mp.dps = 40


# -- high-precision references, written independently of torch --------------


def mp_sigmoid(x):
    return 1 / (1 + mpmath.exp(-x))


def ref_dice(probs, masks, smooth=1):
    out = []
    for p, m in zip(probs, masks):
        p = [mpmath.mpf(float(v)) for v in p.ravel()]
        m = [mpmath.mpf(float(v)) for v in m.ravel()]
        inter = mpmath.fsum(a * b for a, b in zip(p, m))
        out.append(1 - (2 * inter + smooth) / (mpmath.fsum(p) + mpmath.fsum(m) + smooth))
    return mpmath.fsum(out) / len(out)


def ref_bce(logits, masks):
    terms = []
    for x, y in zip(logits.ravel(), masks.ravel()):
        x, y = mpmath.mpf(float(x)), mpmath.mpf(float(y))
        s = mp_sigmoid(x)
        terms.append(-(y * mpmath.log(s) + (1 - y) * mpmath.log(1 - s)))
    return mpmath.fsum(terms) / len(terms)


def ref_seg(logits, masks):
    probs = np.vectorize(lambda v: float(mp_sigmoid(mpmath.mpf(float(v)))))(logits)
    return ref_dice(probs, masks) + ref_bce(logits, masks)


def ref_log_softmax(row):
    row = [mpmath.mpf(float(v)) for v in row]
    lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in row))
    return [v - lse for v in row]


def ref_vrex(risks, lam, reduction):
    r = [mpmath.mpf(float(v)) for v in risks]
    mean = mpmath.fsum(r) / len(r)
    var = mpmath.fsum((v - mean) ** 2 for v in r) / len(r)
    base = mean if reduction == "mean" else mpmath.fsum(r)
    return lam * var + base


def t64(a):
    return torch.tensor(a, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_dice_loss_matches_reference(rng):
    probs = rng.uniform(size=(3, 1, 3, 2, 2))
    masks = (rng.uniform(size=probs.shape) > 0.5).astype(float)
    got = obj.dice_loss(t64(probs), t64(masks)).item()
    assert abs(got - float(ref_dice(probs, masks))) <= 1e-10


def test_bce_loss_matches_reference(rng):
    logits = rng.normal(scale=3, size=(2, 1, 3, 3, 2))
    masks = (rng.uniform(size=logits.shape) > 0.5).astype(float)
    got = obj.bce_loss(t64(logits), t64(masks)).item()
    assert abs(got - float(ref_bce(logits, masks))) <= 1e-10


def test_seg_loss_is_dice_plus_bce(rng):
    logits = rng.normal(size=(2, 1, 2, 3, 2))
    masks = (rng.uniform(size=logits.shape) > 0.4).astype(float)
    got = obj.seg_loss(t64(logits), t64(masks)).item()
    assert abs(got - float(ref_seg(logits, masks))) <= 1e-10


def test_dice_loss_perfect_and_disjoint():
    m = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
    m[0, 0, 0] = 1
    assert obj.dice_loss(m, m).item() == pytest.approx(0.0, abs=1e-15)
    # disjoint: 1 - 1/(4+4+1)
    assert obj.dice_loss(m, 1 - m).item() == pytest.approx(1 - 1 / 9, abs=1e-15)


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        obj.dice_loss(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 2, 2, 3))


@pytest.mark.parametrize("reduction", ["mean", "sum"])
@pytest.mark.parametrize("lam", [0.0, 0.5, 10.0])
def test_vrex_total_matches_reference(rng, lam, reduction):
    risks = rng.uniform(0.1, 2.0, size=4)
    got = obj.vrex_total(t64(risks), lam, reduction).item()
    assert abs(got - float(ref_vrex(risks, lam, reduction))) <= 1e-10


def test_vrex_rejects_bad_reduction():
    with pytest.raises(ValueError):
        obj.vrex_total(t64([1.0, 2.0]), 1.0, "max")


def test_population_variance_not_sample_variance():
    assert obj.population_variance(t64([1.0, 3.0])).item() == 1.0


def test_domain_loss_matches_reference(rng):
    logits = rng.normal(scale=2, size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    got = obj.domain_loss(t64(logits), torch.tensor(labels)).item()
    ref = -mpmath.fsum(ref_log_softmax(row)[y] for row, y in zip(logits, labels)) / len(labels)
    assert abs(got - float(ref)) <= 1e-10


def test_domain_loss_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        obj.domain_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_confusion_loss_matches_reference(rng):
    logits = rng.normal(scale=2, size=(4, 3))
    got = obj.confusion_loss(t64(logits)).item()
    ref = -mpmath.fsum(v for row in logits for v in ref_log_softmax(row)) / logits.size
    assert abs(got - float(ref)) <= 1e-10


def test_confusion_loss_needs_two_domains():
    with pytest.raises(ValueError):
        obj.confusion_loss(torch.zeros(3, 1))


@pytest.mark.parametrize("n_d", [2, 3, 5])
def test_confusion_minimum_is_log_n_at_uniform_rows(n_d):
    logits = torch.full((4, n_d), 0.7, dtype=torch.float64)
    assert obj.confusion_loss(logits).item() == pytest.approx(math.log(n_d), abs=1e-15)
    assert obj.uniform_confusion_minimum(n_d) == math.log(n_d)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_confusion_never_below_log_n(row):
    logits = t64([row])
    assert obj.confusion_loss(logits).item() >= math.log(len(row)) - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.integers(1, 6), st.floats(0, 1e4))
def test_vrex_equal_risks_returns_that_risk(r, n, lam):
    risks = t64([r] * n)
    assert obj.vrex_total(risks, lam, "mean").item() == pytest.approx(r, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=2, max_size=5), st.floats(0, 100))
def test_vrex_at_least_mean(risks, lam):
    total = obj.vrex_total(t64(risks), lam, "mean").item()
    assert total >= np.mean(risks) - 1e-9


def test_vrex_lambda_zero_is_exactly_the_mean():
    r = t64([0.3, 0.7, 1.1])
    assert obj.vrex_total(r, 0.0).item() == r.mean().item()


def test_risk_vector_orders_and_detaches():
    rv = obj.RiskVector({2: torch.tensor(0.5, requires_grad=True), 0: torch.tensor(1.5)})
    assert rv.env_ids == (0, 2)
    assert rv.stack().tolist() == [1.5, 0.5]
    assert rv.detached() == {0: 1.5, 2: 0.5}
    with pytest.raises(ValueError):
        obj.RiskVector({})


def test_split_risks_groups_by_environment(rng):
    logits = t64(rng.normal(size=(4, 1, 2, 2, 2)))
    masks = t64((rng.uniform(size=(4, 1, 2, 2, 2)) > 0.5).astype(float))
    env = torch.tensor([0, 1, 0, 1])
    rv = obj.split_risks(logits, masks, env)
    assert rv[0].item() == pytest.approx(obj.seg_loss(logits[[0, 2]], masks[[0, 2]]).item())
    assert rv[1].item() == pytest.approx(obj.seg_loss(logits[[1, 3]], masks[[1, 3]]).item())


def test_worst_env_risk_and_chance():
    assert obj.worst_env_risk(t64([0.2, 0.9, 0.4])).item() == 0.9
    assert obj.chance_accuracy(3) == pytest.approx(100 / 3)


def test_combined_total_decomposes():
    risks, l_d, l_c = t64([0.4, 0.8]), t64(0.6), t64(1.1)
    w = obj.LossWeights(lambda_vrex=2.0, alpha=0.5, beta=3.0)
    assert obj.combined_total(risks, 2.0, l_d, l_c, 0.5, 3.0).item() == pytest.approx(
        2.0 * 0.04 + 1.2 + 0.3 + 3.3)
    # lambda 0 combined equals the domain-prediction objective
    assert obj.combined_total(risks, 0.0, l_d, l_c, 0.5, 3.0).item() == \
        obj.domain_prediction_total(risks, l_d, l_c, w).item()


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        obj.LossWeights(lambda_vrex=-1)


def test_irmv1_penalty_zero_at_optimal_scale():
    # per-sample squared error minimized at scale 1 gives zero gradient
    scale = torch.ones((), dtype=torch.float64, requires_grad=True)
    x = t64([1.0, 2.0])
    risks = [((scale * x - x) ** 2).mean()]
    assert obj.irmv1_penalty(risks, scale).item() == 0.0
    risks = [((scale * x - 2 * x) ** 2).mean()]
    # d/ds mean((s x - 2x)^2) at s=1 = mean(2 (x - 2x) x) = -5
    assert obj.irmv1_penalty(risks, scale).item() == pytest.approx(25.0)
