import numpy as np
import pytest

from warmcap.nn import Parameter
from warmcap.training.optim import AdamW, ParamGroup, adamw_step, split_groups


def reference_adamw(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Decoupled weight decay Adam written out step by step."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_first_step_is_a_signed_step(rng):
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    out = p.copy()
    adamw_step(out, g, np.zeros(5), np.zeros(5), 1, lr=0.1, weight_decay=0.0)
    assert np.allclose(out, p - 0.1 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_zero_gradient_only_decays(rng):
    p = rng.normal(size=4)
    out = p.copy()
    adamw_step(out, np.zeros(4), np.zeros(4), np.zeros(4), 1, lr=0.1, weight_decay=0.01)
    assert np.allclose(out, p * (1 - 0.1 * 0.01), atol=1e-15)


def test_matches_reference_over_several_steps(rng):
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(6)]
    param = Parameter(p0.copy())
    opt = AdamW([ParamGroup("all", [("w", param)], lr=0.03)])
    for g in grads:
        param.grad = g
        opt.step()
    assert np.allclose(param.data, reference_adamw(p0, grads, 0.03), atol=1e-13)


def test_converges_on_a_quadratic(rng):
    target = rng.normal(size=6)
    x = Parameter(np.zeros(6))
    opt = AdamW([ParamGroup("x", [("x", x)], lr=0.05, weight_decay=0.0)])
    for _ in range(2000):
        x.grad = 2 * (x.data - target)
        opt.step()
    assert np.max(np.abs(x.data - target)) < 1e-3


def test_parameters_without_gradients_are_untouched(rng):
    a, b = Parameter(rng.normal(size=2)), Parameter(rng.normal(size=2))
    before = b.data.copy()
    opt = AdamW([ParamGroup("g", [("a", a), ("b", b)], lr=0.1)])
    a.grad = np.ones(2)
    opt.step()
    assert np.array_equal(b.data, before)
    opt.zero_grad()
    assert a.grad is None


def test_groups_use_their_own_learning_rates(rng):
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    opt = AdamW([ParamGroup("slow", [("a", a)], 1e-5, 0.0), ParamGroup("fast", [("b", b)], 1e-4, 0.0)])
    a.grad = b.grad = np.ones(1)
    opt.step()
    assert a.data[0] == pytest.approx(-1e-5, rel=1e-6)
    assert b.data[0] == pytest.approx(-1e-4, rel=1e-6)


def test_split_groups_first_match_wins():
    named = [("encoder.w", Parameter(np.zeros(1))), ("decoder.w", Parameter(np.zeros(1)))]
    groups = split_groups(named, [("enc", lambda n: n.startswith("encoder."), 1e-5), ("rest", lambda n: True, 1e-4)])
    assert [(g.name, [n for n, _ in g.params]) for g in groups] == [("enc", ["encoder.w"]), ("rest", ["decoder.w"])]
    with pytest.raises(ValueError, match="matches no group"):
        split_groups(named, [("enc", lambda n: n.startswith("encoder."), 1e-5)])


def test_learning_rate_must_be_positive():
    with pytest.raises(ValueError):
        AdamW([ParamGroup("g", [], 0.0)])
