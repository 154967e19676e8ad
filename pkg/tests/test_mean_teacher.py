import numpy as np
import pytest

from abmt.config import EncoderConfig
from abmt.encoder import build_encoder, init_dynamic_classifiers
from abmt.exceptions import ContractError, DimensionError, ParameterError
from abmt.mean_teacher import (
    TeacherState,
    ema_update,
    feature_divergence,
    init_teacher,
    record_divergence,
    sync_classifiers,
)


def _student(seed=0, **overrides):
    values = dict(d_in=4, d_hidden=6, d_feat=5, num_classes=3)
    values.update(overrides)
    return build_encoder(EncoderConfig(**values), seed=seed)


def _parts(n=9, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3, 4))


def _shift(state, amount):
    for p in state.params.values():
        p.data = p.data + amount


def test_init_teacher_copies_student():
    student = _student()
    teacher = init_teacher(student, alpha=0.999)
    assert teacher.step == 0
    for name, p in student.params.items():
        np.testing.assert_array_equal(teacher.params.params[name].data, p.data)
        assert not teacher.params.params[name].requires_grad


def test_student_mutation_leaves_teacher_unchanged():
    student = _student()
    teacher = init_teacher(student)
    before = teacher.params.params["stem.weight"].data.copy()
    student.params["stem.weight"].data += 3.0
    np.testing.assert_array_equal(teacher.params.params["stem.weight"].data, before)


def test_alpha_outside_unit_interval():
    with pytest.raises(ParameterError):
        init_teacher(_student(), alpha=1.5)
    with pytest.raises(ParameterError):
        TeacherState(params=_student(), alpha=-0.1)


def test_alpha_zero_copies_student():
    student = _student()
    teacher = init_teacher(student, alpha=0.0)
    _shift(student, 0.5)
    ema_update(teacher, student)
    for name, p in student.params.items():
        np.testing.assert_array_equal(teacher.params.params[name].data, p.data)
    assert teacher.step == 1


def test_alpha_one_keeps_teacher():
    student = _student()
    teacher = init_teacher(student, alpha=1.0)
    original = {k: v.data.copy() for k, v in teacher.params.params.items()}
    _shift(student, 0.5)
    ema_update(teacher, student)
    for name, values in original.items():
        np.testing.assert_array_equal(teacher.params.params[name].data, values)


def test_default_alpha_scalar_example():
    student = _student()
    teacher = init_teacher(student, alpha=0.999)
    for p in teacher.params.params.values():
        p.data = np.ones_like(p.data)
    for p in student.params.values():
        p.data = np.zeros_like(p.data)
    ema_update(teacher, student)
    assert teacher.params.params["stem.bias"].data[0] == pytest.approx(0.999, abs=1e-15)


def test_ema_is_linear():
    alpha = 0.9
    student = _student()
    teacher = init_teacher(student, alpha=alpha)
    theta0 = {k: v.data.copy() for k, v in teacher.params.params.items()}

    rng = np.random.default_rng(1)
    theta1 = {k: rng.normal(size=v.shape) for k, v in student.params.items()}
    theta2 = {k: rng.normal(size=v.shape) for k, v in student.params.items()}
    for values in (theta1, theta2):
        for k, p in student.params.items():
            p.data = values[k].copy()
        ema_update(teacher, student)

    for k, p in teacher.params.params.items():
        expected = alpha**2 * theta0[k] + alpha * (1 - alpha) * theta1[k] + (1 - alpha) * theta2[k]
        assert np.max(np.abs(p.data - expected)) < 1e-14
    assert teacher.step == 2


def test_teacher_stays_within_student_trajectory():
    student = _student()
    teacher = init_teacher(student, alpha=0.7)
    start = teacher.params.params["trunk.0.fc1.weight"].data.copy()
    low, high = start.copy(), start.copy()
    rng = np.random.default_rng(2)
    for _ in range(6):
        for p in student.params.values():
            p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
        current = student.params["trunk.0.fc1.weight"].data
        low, high = np.minimum(low, current), np.maximum(high, current)
        ema_update(teacher, student)
    values = teacher.params.params["trunk.0.fc1.weight"].data
    assert np.all(values >= low - 1e-12)
    assert np.all(values <= high + 1e-12)


def test_ema_shape_mismatch():
    student = _student()
    teacher = init_teacher(student)
    other = _student(num_classes=5)
    with pytest.raises(ContractError):
        ema_update(teacher, other)
    deeper = _student(branch_a_blocks=2)
    with pytest.raises(ContractError):
        ema_update(teacher, deeper)


def test_sync_classifiers_matches_new_shapes():
    student = _student()
    teacher = init_teacher(student)
    rows = np.eye(5)[:4]

    init_dynamic_classifiers(student, rows, rows)
    sync_classifiers(teacher, student)
    np.testing.assert_array_equal(teacher.params.params["classifier_m.weight"].data, rows)
    assert teacher.params.num_classes == 4
    assert not teacher.params.params["classifier_a.weight"].requires_grad
    ema_update(teacher, student)


class TestFeatureDivergence:
    def test_identical_inputs(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert feature_divergence(x, x) == 0.0

    def test_unit_row_differences(self):
        x = np.zeros((5, 3))
        y = np.zeros((5, 3))
        y[np.arange(5), [0, 1, 2, 0, 1]] = 1.0
        assert feature_divergence(x, y) == pytest.approx(5.0)

    def test_matches_row_norm_sum(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
        expected = sum(float(np.linalg.norm(x[i] - y[i])) for i in range(7))
        assert abs(feature_divergence(x, y) - expected) < 1e-10

    def test_pseudometric(self):
        rng = np.random.default_rng(2)
        x, y, z = (rng.normal(size=(6, 3)) for _ in range(3))
        assert feature_divergence(x, y) == pytest.approx(feature_divergence(y, x))
        assert feature_divergence(x, z) <= feature_divergence(x, y) + feature_divergence(y, z) + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            feature_divergence(np.zeros((2, 3)), np.zeros((3, 3)))


def test_record_divergence_at_init():
    student = _student()
    teacher = init_teacher(student)
    trace = record_divergence(teacher, student, _parts(), epoch=0, batch_size=4)
    assert trace.teacher_student_distance == 0.0
    assert trace.cross_branch_distance > 0.0
    assert trace.to_dict()["epoch"] == 0


def test_symmetric_control_has_no_cross_branch_distance_at_init():
    student = _student(asymmetric=False)
    trace = record_divergence(init_teacher(student), student, _parts(), epoch=0)
    assert trace.cross_branch_distance == 0.0


def test_record_divergence_after_student_moves():
    student = _student()
    teacher = init_teacher(student)
    _shift(student, 0.05)
    trace = record_divergence(teacher, student, _parts(), epoch=3)
    assert trace.teacher_student_distance > 0.0
    assert trace.epoch == 3
