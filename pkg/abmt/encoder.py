"""
ABMT Encoder - shared trunk plus two asymmetric branches over part vectors.

Every sample is a P x d_in matrix of part vectors. The stem and trunk run on
each part independently, then each branch projects to ``d_feat``, applies its
own residual blocks per part and pools over the part axis:

- branch A: ``branch_a_blocks`` blocks, mean pooling (average features F_a)
- branch M: one block deeper by default, max pooling (max features F_m)

Each branch has a bias-free classifier whose row count tracks the current
number of pseudo-label clusters.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as ops
from .config import EncoderConfig
from .exceptions import ContractError, DegenerateClusteringError, DimensionError
from .tensor import Tensor, no_grad

logger = logging.getLogger("abmt.encoder")


@dataclass
class EncoderState:
    """All learnable parameters of one network (student or teacher)."""

    config: EncoderConfig
    params: Dict[str, Tensor]
    rng_seed: int

    @property
    def num_classes(self) -> int:
        return self.params["classifier_a.weight"].shape[0]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, requires_grad: Optional[bool] = None) -> "EncoderState":
        """Deep copy; ``requires_grad`` overrides the flag of every copied tensor."""
        params = {
            name: Tensor(p.data, requires_grad=p.requires_grad if requires_grad is None else requires_grad)
            for name, p in self.params.items()
        }
        return EncoderState(config=self.config.model_copy(), params=params, rng_seed=self.rng_seed)


@dataclass
class EncoderOutput:
    """Features and log-probabilities of both branches for one batch."""

    f_a: Tensor
    f_m: Tensor
    p_a: Tensor
    p_m: Tensor
    asymmetric: bool = True

    def freeze(self) -> "FrozenOutput":
        return FrozenOutput(
            f_a=self.f_a.numpy(),
            f_m=self.f_m.numpy(),
            p_a=self.p_a.numpy(),
            p_m=self.p_m.numpy(),
            asymmetric=self.asymmetric,
        )


@dataclass(frozen=True)
class FrozenOutput:
    """Graph-free snapshot of an EncoderOutput (how teacher outputs travel)."""

    f_a: np.ndarray
    f_m: np.ndarray
    p_a: np.ndarray
    p_m: np.ndarray
    asymmetric: bool = True


@dataclass
class EncodedSet:
    """Features of a whole dataset, computed without gradients."""

    f_a: np.ndarray
    f_m: np.ndarray
    signatures: np.ndarray = field(repr=False)


def _uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _linear_params(rng: np.random.Generator, prefix: str, fan_out: int, fan_in: int) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.weight": _uniform(rng, fan_out, fan_in),
        f"{prefix}.bias": rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out),
    }


def _block_params(rng: np.random.Generator, prefix: str, width: int) -> Dict[str, np.ndarray]:
    values = _linear_params(rng, f"{prefix}.fc1", width, width)
    values.update(_linear_params(rng, f"{prefix}.fc2", width, width))
    return values


def _branch_params(rng: np.random.Generator, name: str, config: EncoderConfig, blocks: int) -> Dict[str, np.ndarray]:
    values = _linear_params(rng, f"{name}.proj", config.d_feat, config.d_hidden)
    for i in range(blocks):
        values.update(_block_params(rng, f"{name}.{i}", config.d_feat))
    return values


def build_encoder(config: EncoderConfig, seed: int) -> EncoderState:
    """
    Initialize an encoder deterministically from ``seed``.

    Layers use uniform fan-in init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``;
    classifiers start as small random matrices until dynamic initialization.
    With ``config.asymmetric`` false, branch M is an exact copy of branch A.
    """
    rng = np.random.default_rng(seed)
    values: Dict[str, np.ndarray] = {}
    values.update(_linear_params(rng, "stem", config.d_hidden, config.d_in))
    for i in range(config.trunk_blocks):
        values.update(_block_params(rng, f"trunk.{i}", config.d_hidden))

    branch_a = _branch_params(rng, "branch_a", config, config.branch_a_blocks)
    values.update(branch_a)
    if config.asymmetric:
        values.update(_branch_params(rng, "branch_m", config, config.depth_m))
    else:
        values.update({"branch_m" + k[len("branch_a"):]: v.copy() for k, v in branch_a.items()})

    classifier_a = rng.normal(0.0, 0.01, size=(config.num_classes, config.d_feat))
    classifier_m = classifier_a.copy() if not config.asymmetric else rng.normal(
        0.0, 0.01, size=(config.num_classes, config.d_feat)
    )
    values["classifier_a.weight"] = classifier_a
    values["classifier_m.weight"] = classifier_m

    params = {name: Tensor(v, requires_grad=True) for name, v in values.items()}
    state = EncoderState(config=config, params=params, rng_seed=seed)
    logger.debug(
        f"🔧 Built encoder (seed={seed}, asymmetric={config.asymmetric}, "
        f"blocks a/m={config.branch_a_blocks}/{config.depth_m}, params={state.num_parameters()})"
    )
    return state


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count of ``build_encoder(config, seed)``."""
    dh, df = config.d_hidden, config.d_feat
    stem = config.d_in * dh + dh
    trunk = config.trunk_blocks * 2 * (dh * dh + dh)
    proj = dh * df + df
    branch_blocks = (config.branch_a_blocks + config.depth_m) * 2 * (df * df + df)
    classifiers = 2 * config.num_classes * df
    return stem + trunk + 2 * proj + branch_blocks + classifiers


def _residual(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ops.relu(ops.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    out = ops.linear(hidden, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
    return ops.relu(x + out)


def _branch(h: Tensor, state: EncoderState, name: str, blocks: int, n: int, parts: int) -> Tensor:
    p = state.params
    x = ops.relu(ops.linear(h, p[f"{name}.proj.weight"], p[f"{name}.proj.bias"]))
    for i in range(blocks):
        x = _residual(x, p, f"{name}.{i}")
    return ops.reshape(x, (n, parts, state.config.d_feat))


def _classify(features: Tensor, weight: Tensor, config: EncoderConfig) -> Tensor:
    x = ops.l2_normalize(features) if config.normalize_classifier_input else features
    logits = ops.linear(x, weight)
    if config.temperature != 1.0:
        logits = logits / config.temperature
    return ops.log_softmax(logits)


def forward(state: EncoderState, batch: Union[Tensor, np.ndarray]) -> EncoderOutput:
    """
    Run the encoder on an N x P x d_in batch.

    Raises:
        DimensionError: batch is not N x P x d_in for this config
    """
    x = ops.as_tensor(batch)
    config = state.config
    if x.ndim != 3 or x.shape[2] != config.d_in:
        raise DimensionError(f"encoder expects N x P x {config.d_in}, got {x.shape}")
    n, parts, _ = x.shape
    if state.params["classifier_a.weight"].shape != state.params["classifier_m.weight"].shape:
        raise DimensionError("classifier_a and classifier_m disagree on the class count")

    p = state.params
    h = ops.reshape(x, (n * parts, config.d_in))
    h = ops.relu(ops.linear(h, p["stem.weight"], p["stem.bias"]))
    for i in range(config.trunk_blocks):
        h = _residual(h, p, f"trunk.{i}")

    f_a = ops.pool(_branch(h, state, "branch_a", config.branch_a_blocks, n, parts), config.pool_a)
    f_m = ops.pool(_branch(h, state, "branch_m", config.depth_m, n, parts), config.pool_m)
    return EncoderOutput(
        f_a=f_a,
        f_m=f_m,
        p_a=_classify(f_a, p["classifier_a.weight"], config),
        p_m=_classify(f_m, p["classifier_m.weight"], config),
        asymmetric=config.asymmetric,
    )


def normalize_rows(x: np.ndarray, eps_norm: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, eps_norm)


def signature(output: Union[EncoderOutput, FrozenOutput]) -> Tensor:
    """
    Appearance signature: normalized F_a concatenated with normalized F_m.

    A symmetric encoder signs with branch A alone, so the width is ``d_feat``.
    No graph is recorded.
    """
    f_a = output.f_a.data if isinstance(output.f_a, Tensor) else output.f_a
    f_m = output.f_m.data if isinstance(output.f_m, Tensor) else output.f_m
    if not output.asymmetric:
        return Tensor(normalize_rows(f_a))
    return Tensor(np.concatenate([normalize_rows(f_a), normalize_rows(f_m)], axis=1))


def init_dynamic_classifiers(
    state: EncoderState,
    means_a: Union[Tensor, np.ndarray],
    means_m: Union[Tensor, np.ndarray],
    optimizer=None,
) -> EncoderState:
    """
    Replace both classifiers with the normalized cluster means.

    Args:
        state: Encoder to update in place
        means_a: K x d_feat normalized cluster means of branch A features
        means_m: K x d_feat normalized cluster means of branch M features
        optimizer: Optional ``Adam`` whose classifier moments are dropped

    Returns:
        The updated state

    Raises:
        DegenerateClusteringError: fewer than two clusters
        DimensionError: means do not match ``d_feat`` or each other
    """
    a = np.array(means_a.data if isinstance(means_a, Tensor) else means_a, dtype=np.float64)
    m = np.array(means_m.data if isinstance(means_m, Tensor) else means_m, dtype=np.float64)
    if a.ndim != 2 or a.shape != m.shape or a.shape[1] != state.config.d_feat:
        raise DimensionError(
            f"cluster means {a.shape} / {m.shape} do not fit d_feat={state.config.d_feat}"
        )
    k = a.shape[0]
    if k < 2:
        raise DegenerateClusteringError(f"dynamic classifiers need at least 2 clusters, got {k}")

    requires_grad = state.params["classifier_a.weight"].requires_grad
    state.params["classifier_a.weight"] = Tensor(a, requires_grad=requires_grad)
    state.params["classifier_m.weight"] = Tensor(m, requires_grad=requires_grad)
    state.config = state.config.model_copy(update={"num_classes": k})
    if optimizer is not None:
        optimizer.reset("classifier")
    logger.debug(f"🎯 Dynamic classifiers initialized with {k} classes")
    return state


def _batches(n: int, batch_size: int) -> Iterator[Tuple[int, int]]:
    for start in range(0, n, batch_size):
        yield start, min(n, start + batch_size)


def encode_dataset(state: EncoderState, parts: np.ndarray, batch_size: int = 256) -> EncodedSet:
    """Forward a whole N x P x d_in array without gradients, in batches."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    f_a: List[np.ndarray] = []
    f_m: List[np.ndarray] = []
    sigs: List[np.ndarray] = []
    with no_grad():
        for start, stop in _batches(len(parts), batch_size):
            out = forward(state, parts[start:stop])
            f_a.append(out.f_a.data)
            f_m.append(out.f_m.data)
            sigs.append(signature(out).data)
    if not f_a:
        width = state.config.signature_width
        empty = np.zeros((0, state.config.d_feat))
        return EncodedSet(f_a=empty, f_m=empty.copy(), signatures=np.zeros((0, width)))
    return EncodedSet(
        f_a=np.concatenate(f_a), f_m=np.concatenate(f_m), signatures=np.concatenate(sigs)
    )
