import numpy as np
import pytest

from abmt import tensor as ops
from abmt.exceptions import ContractError, DimensionError
from abmt.optim import Adam, AdamState, adam_step, default_milestones, step_decay_lr
from abmt.tensor import Tensor, backward


def _param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_zero_gradient_without_decay_leaves_params_unchanged():
    p = _param([1.0, -2.0, 3.0])
    p.grad = np.zeros(3)
    state = AdamState.for_param(p, weight_decay=0.0)
    adam_step([p], [state])
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_first_step_moves_each_coordinate_by_lr():
    p = _param([0.5, -0.5, 2.0])
    p.grad = np.array([0.3, -1.5, 0.2])
    state = AdamState.for_param(p, lr=0.01, weight_decay=0.0)
    before = p.data.copy()
    adam_step([p], [state])
    step = np.abs(p.data - before)
    np.testing.assert_allclose(step, 0.01, rtol=1e-6)
    assert np.all(np.sign(before - p.data) == np.sign([0.3, -1.5, 0.2]))


def test_ten_steps_match_reference_recurrence():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
    p = _param([1.0, -0.7, 0.3, 2.5])
    state = AdamState.for_param(p, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)

    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 11):
        backward(ops.mul(ops.sum(ops.mul(p, p)), 0.5))
        adam_step([p], [state])

        g = ref + wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        ref = ref - lr * m_hat / (np.sqrt(v_hat) + eps)

    assert state.t == 10
    assert np.max(np.abs(p.data - ref)) < 1e-10


def test_step_zeroes_gradients():
    p = _param([1.0, 2.0])
    p.grad = np.array([1.0, 1.0])
    adam_step([p], [AdamState.for_param(p)])
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_missing_gradient_is_a_contract_error():
    p = _param([1.0])
    with pytest.raises(ContractError):
        adam_step([p], [AdamState.for_param(p)])


def test_misaligned_states():
    p = _param([1.0])
    p.grad = np.ones(1)
    with pytest.raises(ContractError):
        adam_step([p], [])
    with pytest.raises(DimensionError):
        adam_step([p], [AdamState(m=np.zeros(2), v=np.zeros(2))])


class TestAdam:
    def test_states_created_per_name(self):
        opt = Adam(lr=0.1)
        params = {"a.weight": _param([1.0]), "b.weight": _param([2.0, 3.0])}
        for p in params.values():
            p.grad = np.ones_like(p.data)
        opt.step(params)
        assert set(opt.states) == {"a.weight", "b.weight"}
        assert all(s.t == 1 for s in opt.states.values())

    def test_reset_drops_matching_prefix_only(self):
        opt = Adam()
        params = {"classifier_a.weight": _param([1.0]), "stem.weight": _param([1.0])}
        for p in params.values():
            p.grad = np.ones(1)
        opt.step(params)
        assert opt.reset("classifier") == ["classifier_a.weight"]
        assert list(opt.states) == ["stem.weight"]

    def test_replaced_parameter_shape_gets_fresh_state(self):
        opt = Adam()
        p = _param([1.0])
        p.grad = np.ones(1)
        opt.step({"classifier_a.weight": p})
        bigger = _param([[1.0, 2.0], [3.0, 4.0]])
        bigger.grad = np.ones((2, 2))
        opt.step({"classifier_a.weight": bigger})
        assert opt.states["classifier_a.weight"].t == 1

    def test_set_lr_updates_existing_states(self):
        opt = Adam(lr=0.1)
        p = _param([1.0])
        p.grad = np.ones(1)
        opt.step({"w": p})
        opt.set_lr(0.01)
        assert opt.lr == 0.01
        assert opt.states["w"].lr == 0.01


def test_default_milestones():
    assert default_milestones(80) == [40, 70]
    assert default_milestones(40) == [20, 35]


def test_step_decay_lr():
    assert step_decay_lr(0.1, 0, [2, 4]) == pytest.approx(0.1)
    assert step_decay_lr(0.1, 2, [2, 4]) == pytest.approx(0.01)
    assert step_decay_lr(0.1, 5, [2, 4]) == pytest.approx(0.001)
    assert step_decay_lr(0.1, 50, None) == pytest.approx(0.1)
