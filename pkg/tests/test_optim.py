"""Adam / gradient-descent updates against hand-evaluated recurrences."""

import numpy as np

from flowmoe.nn import AdamState, MultiAdam, ParamSet, adam_step, sgd_step


def _ps(**kw):
    ps = ParamSet()
    for k, v in kw.items():
        ps.add(k, v)
    return ps


def test_adam_zero_gradient_keeps_parameters():
    ps = _ps(w=np.array([1.0, -2.0]))
    adam_step(ps, {"w": np.zeros(2)}, AdamState(), 1e-3)
    assert np.array_equal(ps["w"].data, [1.0, -2.0])


def test_adam_first_step_matches_hand_recurrence():
    # fresh state, constant gradient g: m_hat = g, v_hat = g^2,
    # so the update is exactly lr * g / (|g| + eps)
    g = np.array([2.0, -0.5, 1e-3])
    ps = _ps(w=np.array([1.0, 1.0, 1.0]))
    adam_step(ps, {"w": g.copy()}, AdamState(), 0.1)
    expected = 1.0 - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(ps["w"].data, expected, rtol=0, atol=1e-15)
    # per-coordinate magnitude ~ lr for any sizeable constant gradient
    assert np.all(np.abs(1.0 - ps["w"].data[:2]) > 0.1 * (1 - 1e-7))


def test_adam_five_steps_deterministic():
    grads = [np.random.default_rng(s).normal(size=4) for s in range(5)]

    def run():
        ps = _ps(w=np.zeros(4))
        st = AdamState()
        for g in grads:
            adam_step(ps, {"w": g}, st, 1e-2)
        return ps["w"].data

    assert np.array_equal(run(), run())


def test_adam_untracked_parameter_untouched():
    ps = _ps(a=np.ones(2), b=np.ones(2))
    adam_step(ps, {"a": np.full(2, 0.5)}, AdamState(), 0.1)
    assert np.array_equal(ps["b"].data, [1.0, 1.0])
    assert not np.array_equal(ps["a"].data, [1.0, 1.0])


def test_sgd_zero_rate_is_identity():
    ps = _ps(w=np.array([3.0]))
    sgd_step(ps, {"w": np.array([5.0])}, 0.0)
    assert np.array_equal(ps["w"].data, [3.0])


def test_sgd_scalar_arithmetic():
    ps = _ps(w=np.array([1.0]))
    sgd_step(ps, {"w": np.array([2.0])}, 0.1)
    assert np.allclose(ps["w"].data, [0.8], rtol=0, atol=1e-15)


def test_sgd_quadratic_descent_matches_closed_form():
    # L(w) = c/2 w^2 with alpha below 1/c: iterates follow (1 - alpha c)^t
    # and the loss decreases monotonically
    c, alpha, w0, steps = 4.0, 0.2, 3.0, 100
    ps = _ps(w=np.array([w0]))
    losses = []
    for _ in range(steps):
        w = ps["w"].data[0]
        losses.append(0.5 * c * w * w)
        sgd_step(ps, {"w": np.array([c * w])}, alpha)
    expected_w = w0 * (1 - alpha * c) ** steps
    assert np.allclose(ps["w"].data, [expected_w], rtol=1e-12)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_multi_adam_matches_per_set_adam():
    g1 = np.array([1.0, -1.0])
    g2 = np.array([0.5])
    a, b = _ps(w=np.zeros(2)), _ps(w=np.zeros(1))
    opt = MultiAdam({"a": a, "b": b})
    for _ in range(3):
        opt.apply({"a": {"w": g1}, "b": {"w": g2}}, 1e-2)

    ref_a, ref_b = _ps(w=np.zeros(2)), _ps(w=np.zeros(1))
    st_a, st_b = AdamState(), AdamState()
    for _ in range(3):
        adam_step(ref_a, {"w": g1}, st_a, 1e-2)
        adam_step(ref_b, {"w": g2}, st_b, 1e-2)
    assert np.array_equal(a["w"].data, ref_a["w"].data)
    assert np.array_equal(b["w"].data, ref_b["w"].data)
