"""
Tests for run configuration loading and validation.
"""

import tempfile
import unittest
from pathlib import Path

import pytest
import yaml

from abmt.config import (
    ClusterConfig,
    EncoderConfig,
    LossWeights,
    TrainConfig,
    apply_overrides,
    iter_field_keys,
    load_config,
    parse_flat_config,
)
from abmt.exceptions import ParameterError


class TestDefaults(unittest.TestCase):
    def test_loss_weights(self):
        w = LossWeights()
        assert (w.lambda_ce_s, w.lambda_tri_s) == (0.5, 0.5)
        assert (w.lambda_ce_t, w.lambda_sce_t, w.lambda_stri_t) == (0.5, 0.5, 1.0)
        assert w.triplet_margin == 0.3

    def test_cluster_defaults(self):
        c = ClusterConfig()
        assert (c.k1, c.k2, c.lambda_rerank, c.min_pts) == (20, 6, 0.3, 4)
        assert c.eps_mode == "core_quantile"

    def test_train_defaults(self):
        config = TrainConfig()
        assert config.alpha == 0.999
        assert config.lr == 0.00035
        assert config.batch_size == 16
        assert config.eval_ranks == [1, 5, 10]

    def test_full_scale(self):
        config = TrainConfig.full_scale(epochs_adapt=2)
        assert config.epochs_pretrain == 80
        assert config.batch_size == 64
        assert config.epochs_adapt == 2


class TestEncoderConfig(unittest.TestCase):
    def test_asymmetric_depth_defaults_to_one_more_block(self):
        config = EncoderConfig(branch_a_blocks=2)
        assert config.depth_m == 3
        assert (config.pool_a, config.pool_m) == ("mean", "max")
        assert config.signature_width == 2 * config.d_feat

    def test_symmetric_branches_share_depth_and_pooling(self):
        config = EncoderConfig(branch_a_blocks=2, branch_m_blocks=4, asymmetric=False)
        assert config.depth_m == 2
        assert (config.pool_a, config.pool_m) == ("mean", "mean")
        assert config.signature_width == config.d_feat

    def test_explicit_m_depth(self):
        assert EncoderConfig(branch_m_blocks=4).depth_m == 4

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_out=3)


def test_k2_larger_than_k1_rejected():
    with pytest.raises(ValueError):
        ClusterConfig(k1=4, k2=6)


def test_ablation_switch_propagates_to_encoder():
    config = TrainConfig(use_asymmetric_branches=False)
    assert config.encoder.asymmetric is False
    assert config.encoder.depth_m == config.encoder.branch_a_blocks


def test_bad_eval_ranks():
    with pytest.raises(ValueError):
        TrainConfig(eval_ranks=[0, 5])


class TestFlatGrammar(unittest.TestCase):
    def test_parse_types_and_nesting(self):
        text = "\n".join(
            [
                "# adaptation settings",
                "epochs_adapt = 3",
                "cluster.min_pts = 5   # trailing comment",
                "",
                "lr_decay_epochs = [2, 3]",
                "use_cross_branch = false",
                "cluster.kmeans_k = null",
            ]
        )
        data = parse_flat_config(text)
        assert data == {
            "epochs_adapt": 3,
            "cluster": {"min_pts": 5, "kmeans_k": None},
            "lr_decay_epochs": [2, 3],
            "use_cross_branch": False,
        }

    def test_line_without_equals(self):
        with pytest.raises(ParameterError):
            parse_flat_config("epochs_adapt 3")

    def test_empty_key(self):
        with pytest.raises(ParameterError):
            parse_flat_config(" = 3")

    def test_nesting_under_scalar(self):
        with pytest.raises(ParameterError):
            parse_flat_config("alpha = 0.9\nalpha.x = 1")


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def test_load_yaml(self):
        path = Path(self.temp_dir) / "run.yaml"
        with open(path, "w") as f:
            yaml.dump({"epochs_adapt": 2, "cluster": {"k1": 8, "k2": 3}}, f)
        config = load_config(str(path))
        assert config.epochs_adapt == 2
        assert config.cluster.k1 == 8

    def test_load_flat(self):
        path = Path(self.temp_dir) / "run.cfg"
        path.write_text("alpha = 0.99\nencoder.d_feat = 8\n")
        config = load_config(str(path))
        assert config.alpha == 0.99
        assert config.encoder.d_feat == 8

    def test_empty_yaml_gives_defaults(self):
        path = Path(self.temp_dir) / "empty.yml"
        path.write_text("")
        assert load_config(str(path)) == TrainConfig()

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_config(str(Path(self.temp_dir) / "nope.yaml"))

    def test_invalid_value_is_parameter_error(self):
        path = Path(self.temp_dir) / "bad.cfg"
        path.write_text("alpha = 1.5\n")
        with pytest.raises(ParameterError):
            load_config(str(path))

    def test_unknown_key_is_parameter_error(self):
        path = Path(self.temp_dir) / "bad.yaml"
        path.write_text("epochz: 3\n")
        with pytest.raises(ParameterError):
            load_config(str(path))


def test_apply_overrides_returns_validated_copy():
    base = TrainConfig()
    updated = apply_overrides(base, {"cluster.min_pts": 6, "epochs_adapt": 1})
    assert updated.cluster.min_pts == 6
    assert updated.epochs_adapt == 1
    assert base.cluster.min_pts == 4

    with pytest.raises(ParameterError):
        apply_overrides(base, {"cluster.k2": 50})


def test_iter_field_keys_flattens_sections():
    keys = [key for key, _ in iter_field_keys(TrainConfig)]
    assert "cluster.min_pts" in keys
    assert "loss_weights.lambda_stri_t" in keys
    assert "encoder.d_feat" in keys
    assert "cluster" not in keys
    assert len(keys) == len(set(keys))
