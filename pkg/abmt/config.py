"""
ABMT Configuration - validated run settings and config file loading.

Settings are pydantic models. Files are either YAML (nested mappings) or the
flat grammar::

    # comment
    epochs_adapt = 20
    cluster.min_pts = 4
    encoder.d_feat = 32

Scalar values in the flat grammar are parsed with ``yaml.safe_load`` so
``true``, ``0.3``, ``[20, 35]`` and ``null`` all come out typed.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple, Type

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ParameterError

logger = logging.getLogger("abmt.config")

PoolMode = Literal["mean", "max"]


class EncoderConfig(BaseModel):
    """Dimensions and structure of the two-branch part encoder."""

    model_config = ConfigDict(extra="forbid")

    d_in: int = Field(16, ge=1)
    d_hidden: int = Field(32, ge=1)
    d_feat: int = Field(32, ge=1)
    trunk_blocks: int = Field(1, ge=0)
    branch_a_blocks: int = Field(1, ge=1)
    # None means branch_a_blocks + 1 (asymmetric) or branch_a_blocks (symmetric)
    branch_m_blocks: Optional[int] = Field(None, ge=1)
    pooling_a: PoolMode = "mean"
    pooling_m: PoolMode = "max"
    num_classes: int = Field(2, ge=1)
    asymmetric: bool = True
    temperature: float = Field(1.0, gt=0)
    normalize_classifier_input: bool = False

    @property
    def depth_m(self) -> int:
        if not self.asymmetric:
            return self.branch_a_blocks
        if self.branch_m_blocks is None:
            return self.branch_a_blocks + 1
        return self.branch_m_blocks

    @property
    def pool_a(self) -> PoolMode:
        return self.pooling_a if self.asymmetric else "mean"

    @property
    def pool_m(self) -> PoolMode:
        return self.pooling_m if self.asymmetric else "mean"

    @property
    def signature_width(self) -> int:
        return 2 * self.d_feat if self.asymmetric else self.d_feat

    def architecture(self) -> Dict[str, Any]:
        """Everything that fixes the forward pass apart from input width and class count."""
        return {
            "d_hidden": self.d_hidden,
            "d_feat": self.d_feat,
            "trunk_blocks": self.trunk_blocks,
            "branch_a_blocks": self.branch_a_blocks,
            "depth_m": self.depth_m,
            "pool_a": self.pool_a,
            "pool_m": self.pool_m,
            "asymmetric": self.asymmetric,
            "temperature": self.temperature,
            "normalize_classifier_input": self.normalize_classifier_input,
        }


class LossWeights(BaseModel):
    """Weights of the source and target objectives."""

    model_config = ConfigDict(extra="forbid")

    lambda_ce_s: float = Field(0.5, ge=0)
    lambda_tri_s: float = Field(0.5, ge=0)
    lambda_ce_t: float = Field(0.5, ge=0)
    lambda_sce_t: float = Field(0.5, ge=0)
    lambda_stri_t: float = Field(1.0, ge=0)
    triplet_margin: float = Field(0.3, ge=0)


class ClusterConfig(BaseModel):
    """Pseudo-label generation: re-ranking, DBSCAN and the K-Means ablation."""

    model_config = ConfigDict(extra="forbid")

    eps: float = Field(0.002, gt=0)
    eps_mode: Literal["core_quantile", "pair_quantile", "absolute"] = "core_quantile"
    eps_quantile: float = Field(0.6, gt=0, le=1)
    min_pts: int = Field(4, ge=2)
    k1: int = Field(20, ge=1)
    k2: int = Field(6, ge=1)
    lambda_rerank: float = Field(0.3, ge=0, le=1)
    clamp_k1: bool = True
    rerank_with_source: bool = False
    kmeans_k: Optional[int] = Field(None, ge=2)
    kmeans_images_per_cluster: int = Field(12, ge=1)
    kmeans_max_iter: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_k2(self) -> "ClusterConfig":
        if self.k2 > self.k1:
            raise ValueError(f"k2 ({self.k2}) must not exceed k1 ({self.k1})")
        return self


class SynthConfig(BaseModel):
    """Parameters of the synthetic source/target generator."""

    model_config = ConfigDict(extra="forbid")

    n_ids: int = Field(20, ge=4)
    imgs_per_id: int = Field(16, ge=4)
    n_cams: int = Field(4, ge=2)
    parts: int = Field(4, ge=1)
    d_in: int = Field(16, ge=1)
    domain_shift: float = Field(0.8, ge=0)
    noise: float = Field(0.3, ge=0)
    part_scale: float = Field(0.5, ge=0)
    cam_scale: float = Field(1.0, ge=0)
    clutter_scale: float = Field(1.25, ge=0)


class TrainConfig(BaseModel):
    """Everything a pre-training or adaptation run needs besides data and seed."""

    model_config = ConfigDict(extra="forbid")

    epochs_pretrain: int = Field(40, ge=1)
    iters_pretrain: int = Field(50, ge=1)
    epochs_adapt: int = Field(20, ge=1)
    iters_adapt: int = Field(100, ge=1)
    lr: float = Field(0.00035, gt=0)
    lr_decay_epochs: Optional[List[int]] = None
    lr_decay_gamma: float = Field(0.1, gt=0, le=1)
    weight_decay: float = Field(0.0005, ge=0)
    batch_identities: int = Field(4, ge=2)
    instances_per_identity: int = Field(4, ge=1)
    alpha: float = Field(0.999, ge=0, le=1)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    use_asymmetric_branches: bool = True
    use_cross_branch: bool = True
    clustering_method: Literal["dbscan_rerank", "kmeans"] = "dbscan_rerank"
    source_pretrain: bool = True
    literal_soft_triplet: bool = False
    part_erasing_prob: float = Field(0.5, ge=0, le=1)
    equal_augmentation: bool = False
    max_skipped_fraction: float = Field(0.5, ge=0, le=1)
    eval_batch_size: int = Field(256, ge=1)
    eval_ranks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    dump_labels: bool = False

    @model_validator(mode="after")
    def _sync_encoder(self) -> "TrainConfig":
        if self.encoder.asymmetric != self.use_asymmetric_branches:
            self.encoder = self.encoder.model_copy(
                update={"asymmetric": self.use_asymmetric_branches}
            )
        if any(r < 1 for r in self.eval_ranks):
            raise ValueError("eval_ranks must be >= 1")
        return self

    @property
    def batch_size(self) -> int:
        return self.batch_identities * self.instances_per_identity

    @classmethod
    def full_scale(cls, **overrides: Any) -> "TrainConfig":
        """Epoch/iteration/batch sizes used for the full-size benchmarks."""
        values: Dict[str, Any] = {
            "epochs_pretrain": 80,
            "iters_pretrain": 200,
            "epochs_adapt": 40,
            "iters_adapt": 400,
            "batch_identities": 16,
            "instances_per_identity": 4,
        }
        values.update(overrides)
        return cls(**values)


def parse_flat_config(text: str) -> Dict[str, Any]:
    """
    Parse the flat ``key = value`` grammar into a nested mapping.

    Raises:
        ParameterError: a non-empty, non-comment line has no ``=`` or an empty key
    """
    nested: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParameterError(f"line {lineno}: empty key")
        _set_dotted(nested, key, yaml.safe_load(value) if value else None)
    return nested


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    *sections, leaf = dotted.split(".")
    for section in sections:
        target = target.setdefault(section, {})
        if not isinstance(target, dict):
            raise ParameterError(f"'{dotted}' nests under a non-section key")
    target[leaf] = value


def _validate(data: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**data)
    except ValidationError as e:
        raise ParameterError(f"Invalid configuration: {e}") from e


def load_config(path: str) -> TrainConfig:
    """Load a TrainConfig from a YAML file or a flat ``key = value`` file."""
    config_file = Path(path)
    if not config_file.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    text = config_file.read_text(encoding="utf-8")
    if config_file.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    else:
        data = parse_flat_config(text)

    config = _validate(data)
    logger.info(f"📁 Loaded config from {path}")
    return config


def apply_overrides(config: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    """Return a validated copy of ``config`` with dotted-key overrides applied."""
    data = config.model_dump()
    for key, value in overrides.items():
        _set_dotted(data, key, value)
    updated = _validate(data)
    if overrides:
        logger.debug(f"⚙️  Applied {len(overrides)} config overrides: {sorted(overrides)}")
    return updated


def iter_field_keys(model: Type[BaseModel] = TrainConfig, prefix: str = "") -> Iterator[Tuple[str, Any]]:
    """Yield ``(dotted_key, field_info)`` for every leaf field of a config model."""
    for name, info in model.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            yield from iter_field_keys(annotation, f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}", info
