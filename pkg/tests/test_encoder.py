"""
Tests for the two-branch encoder, dynamic classifiers and checkpoints.
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from abmt.checkpoint import checkpoint_metadata, load_checkpoint, save_checkpoint
from abmt.config import EncoderConfig
from abmt.encoder import (
    build_encoder,
    count_parameters,
    encode_dataset,
    forward,
    init_dynamic_classifiers,
    signature,
)
from abmt.exceptions import ContractError, DegenerateClusteringError, DimensionError
from abmt.optim import Adam


def small_config(**overrides):
    values = dict(d_in=4, d_hidden=6, d_feat=5, num_classes=3)
    values.update(overrides)
    return EncoderConfig(**values)


def batch(n=6, parts=3, d_in=4, seed=0):
    return np.random.default_rng(seed).normal(size=(n, parts, d_in))


class TestBuild(unittest.TestCase):
    def test_same_seed_is_bitwise_identical(self):
        a = build_encoder(small_config(), seed=7)
        b = build_encoder(small_config(), seed=7)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = build_encoder(small_config(), seed=1)
        b = build_encoder(small_config(), seed=2)
        assert not np.array_equal(a.params["stem.weight"].data, b.params["stem.weight"].data)

    def test_branch_m_has_one_more_block(self):
        state = build_encoder(small_config(branch_a_blocks=1), seed=0)
        assert "branch_a.0.fc1.weight" in state.params
        assert "branch_a.1.fc1.weight" not in state.params
        assert "branch_m.1.fc1.weight" in state.params
        assert "branch_m.2.fc1.weight" not in state.params

    def test_parameter_count_matches_closed_form(self):
        for config in (small_config(), small_config(trunk_blocks=2, branch_a_blocks=2), small_config(asymmetric=False)):
            state = build_encoder(config, seed=0)
            assert state.num_parameters() == count_parameters(config)

    def test_symmetric_branches_start_identical(self):
        state = build_encoder(small_config(asymmetric=False), seed=3)
        for name, p in state.params.items():
            if name.startswith("branch_a"):
                np.testing.assert_array_equal(p.data, state.params["branch_m" + name[len("branch_a"):]].data)
        np.testing.assert_array_equal(
            state.params["classifier_a.weight"].data, state.params["classifier_m.weight"].data
        )

    def test_copy_is_independent(self):
        state = build_encoder(small_config(), seed=0)
        clone = state.copy(requires_grad=False)
        state.params["stem.weight"].data += 1.0
        assert not np.array_equal(clone.params["stem.weight"].data, state.params["stem.weight"].data)
        assert not clone.params["stem.weight"].requires_grad


class TestForward(unittest.TestCase):
    def setUp(self):
        self.config = small_config()
        self.state = build_encoder(self.config, seed=0)

    def test_output_shapes_and_probabilities(self):
        out = forward(self.state, batch())
        assert out.f_a.shape == (6, 5)
        assert out.f_m.shape == (6, 5)
        assert out.p_a.shape == (6, 3)
        assert out.p_m.shape == (6, 3)
        assert np.max(np.abs(np.exp(out.p_a.data).sum(axis=1) - 1.0)) < 1e-12
        assert np.max(np.abs(np.exp(out.p_m.data).sum(axis=1) - 1.0)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            forward(self.state, np.zeros((2, 3, 5)))
        with pytest.raises(DimensionError):
            forward(self.state, np.zeros((2, 4)))

    def test_forward_is_deterministic(self):
        x = batch()
        first = forward(self.state, x)
        second = forward(self.state, x)
        np.testing.assert_array_equal(first.f_a.data, second.f_a.data)
        np.testing.assert_array_equal(first.p_m.data, second.p_m.data)

    def test_part_permutation_invariance(self):
        x = batch()
        shuffled = x[:, [2, 0, 1], :]
        a = forward(self.state, x)
        b = forward(self.state, shuffled)
        np.testing.assert_allclose(a.f_a.data, b.f_a.data, atol=1e-12)
        np.testing.assert_allclose(a.f_m.data, b.f_m.data, atol=1e-12)

    def test_branch_independence(self):
        x = batch()
        before = forward(self.state, x)
        for name, p in self.state.params.items():
            if name.startswith("branch_m") or name.startswith("classifier_m"):
                p.data[...] = 0.0
        after = forward(self.state, x)
        np.testing.assert_array_equal(before.f_a.data, after.f_a.data)
        np.testing.assert_array_equal(before.p_a.data, after.p_a.data)
        assert not np.array_equal(before.f_m.data, after.f_m.data)

    def test_symmetric_encoder_on_identical_parts(self):
        state = build_encoder(small_config(asymmetric=False), seed=5)
        part = batch(n=4, parts=1, seed=9)
        x = np.repeat(part, 3, axis=1)
        out = forward(state, x)
        np.testing.assert_array_equal(out.f_a.data, out.f_m.data)

    def test_forward_builds_graph_to_parameters(self):
        out = forward(self.state, batch())
        assert out.f_a.requires_grad
        assert out.p_m.requires_grad


class TestSignature(unittest.TestCase):
    def test_width_and_unit_halves(self):
        state = build_encoder(small_config(), seed=0)
        sig = signature(forward(state, batch()))
        assert sig.shape == (6, 10)
        assert not sig.requires_grad
        np.testing.assert_allclose(np.linalg.norm(sig.data[:, :5], axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(sig.data[:, 5:], axis=1), 1.0, atol=1e-12)

    def test_symmetric_width(self):
        state = build_encoder(small_config(asymmetric=False), seed=0)
        assert signature(forward(state, batch())).shape == (6, 5)

    def test_identical_inputs_identical_signatures(self):
        state = build_encoder(small_config(), seed=0)
        x = np.repeat(batch(n=1), 2, axis=0)
        sig = signature(forward(state, x)).data
        np.testing.assert_array_equal(sig[0], sig[1])

    def test_frozen_output_signs_the_same(self):
        state = build_encoder(small_config(), seed=0)
        out = forward(state, batch())
        np.testing.assert_array_equal(signature(out).data, signature(out.freeze()).data)


class TestDynamicClassifiers(unittest.TestCase):
    def setUp(self):
        self.state = build_encoder(small_config(), seed=0)

    def _unit_rows(self, k, seed=0):
        rows = np.random.default_rng(seed).normal(size=(k, 5))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    def test_rows_follow_cluster_count(self):
        init_dynamic_classifiers(self.state, self._unit_rows(4), self._unit_rows(4, 1))
        assert self.state.num_classes == 4
        assert self.state.config.num_classes == 4
        assert forward(self.state, batch()).p_m.shape == (6, 4)

        init_dynamic_classifiers(self.state, self._unit_rows(7), self._unit_rows(7, 1))
        assert self.state.params["classifier_a.weight"].shape == (7, 5)
        assert self.state.params["classifier_m.weight"].shape == (7, 5)

    def test_matching_cluster_mean_wins(self):
        x = batch(n=1)
        f_a = forward(self.state, x).f_a.data[0]
        direction = f_a / np.linalg.norm(f_a)
        # orthonormal basis whose first vector is the sample's feature direction
        basis, _ = np.linalg.qr(np.column_stack([direction, np.eye(5)[:, :2]]))
        first = basis[:, 0] * np.sign(basis[:, 0] @ direction)
        means = np.stack([basis[:, 1], basis[:, 2], first])
        init_dynamic_classifiers(self.state, means, means)
        out = forward(self.state, x)
        assert int(np.argmax(out.p_a.data[0])) == 2

    def test_fewer_than_two_clusters(self):
        with pytest.raises(DegenerateClusteringError):
            init_dynamic_classifiers(self.state, self._unit_rows(1), self._unit_rows(1))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            init_dynamic_classifiers(self.state, np.ones((3, 4)), np.ones((3, 4)))
        with pytest.raises(DimensionError):
            init_dynamic_classifiers(self.state, self._unit_rows(3), self._unit_rows(4))

    def test_optimizer_classifier_moments_reset(self):
        opt = Adam()
        for p in self.state.params.values():
            p.grad = np.ones_like(p.data)
        opt.step(self.state.params)
        init_dynamic_classifiers(self.state, self._unit_rows(3), self._unit_rows(3), optimizer=opt)
        assert "classifier_a.weight" not in opt.states
        assert "classifier_m.weight" not in opt.states
        assert "stem.weight" in opt.states


def test_encode_dataset_matches_single_forward():
    state = build_encoder(small_config(), seed=0)
    x = batch(n=11)
    encoded = encode_dataset(state, x, batch_size=4)
    whole = forward(state, x)
    np.testing.assert_allclose(encoded.f_a, whole.f_a.data, atol=1e-12)
    np.testing.assert_allclose(encoded.f_m, whole.f_m.data, atol=1e-12)
    np.testing.assert_allclose(encoded.signatures, signature(whole).data, atol=1e-12)


def test_encode_dataset_rejects_bad_batch_size():
    with pytest.raises(ContractError):
        encode_dataset(build_encoder(small_config(), seed=0), batch(), batch_size=0)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def test_round_trip_is_bitwise(self):
        state = build_encoder(small_config(branch_a_blocks=2), seed=11)
        path = save_checkpoint(state, Path(self.temp_dir) / "model.npz", extra={"epoch": 3})
        loaded = load_checkpoint(path)
        assert loaded.config == state.config
        assert loaded.rng_seed == 11
        assert loaded.params.keys() == state.params.keys()
        for name in state.params:
            np.testing.assert_array_equal(loaded.params[name].data, state.params[name].data)
        np.testing.assert_array_equal(forward(loaded, batch()).p_a.data, forward(state, batch()).p_a.data)
        assert checkpoint_metadata(path)["extra"] == {"epoch": 3}

    def test_suffix_added(self):
        state = build_encoder(small_config(), seed=0)
        path = save_checkpoint(state, Path(self.temp_dir) / "model")
        assert path.suffix == ".npz"
        assert path.exists()

    def test_load_without_gradients(self):
        path = save_checkpoint(build_encoder(small_config(), seed=0), Path(self.temp_dir) / "m.npz")
        loaded = load_checkpoint(path, requires_grad=False)
        assert not any(p.requires_grad for p in loaded.params.values())

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(Path(self.temp_dir) / "absent.npz")

    def test_foreign_archive(self):
        path = Path(self.temp_dir) / "foreign.npz"
        np.savez(path, weights=np.ones(3))
        with pytest.raises(ContractError):
            load_checkpoint(path)
