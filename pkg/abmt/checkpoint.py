"""
ABMT Checkpoints - save and restore an EncoderState as a ``.npz`` archive.

The archive maps parameter names to float64 arrays and stores the encoder
config plus the init seed as a JSON string under ``__config__``.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .config import EncoderConfig
from .encoder import EncoderState
from .exceptions import ContractError
from .tensor import Tensor

logger = logging.getLogger("abmt.checkpoint")

_META_KEY = "__config__"


def save_checkpoint(
    state: EncoderState, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write every parameter array and the config echo to ``path``.

    Args:
        state: Encoder to save
        path: Target file; ``.npz`` is appended by numpy if missing
        extra: Optional JSON-serializable metadata stored next to the config

    Returns:
        The path actually written
    """
    target = Path(path)
    if target.suffix != ".npz":
        target = target.with_suffix(".npz")
    target.parent.mkdir(parents=True, exist_ok=True)

    meta = {"encoder": state.config.model_dump(), "rng_seed": state.rng_seed, "extra": extra or {}}
    arrays = {name: p.data for name, p in state.params.items()}
    np.savez(target, **arrays, **{_META_KEY: np.array(json.dumps(meta, sort_keys=True))})
    logger.info(f"💾 Saved checkpoint with {len(arrays)} tensors to {target}")
    return target


def load_checkpoint(path: Union[str, Path], requires_grad: bool = True) -> EncoderState:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        FileNotFoundError: the file does not exist
        ContractError: the archive has no config entry
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with np.load(source, allow_pickle=False) as archive:
        if _META_KEY not in archive.files:
            raise ContractError(f"{path} is not an ABMT checkpoint (no {_META_KEY} entry)")
        meta = json.loads(str(archive[_META_KEY]))
        params = {
            name: Tensor(archive[name], requires_grad=requires_grad)
            for name in archive.files
            if name != _META_KEY
        }

    state = EncoderState(
        config=EncoderConfig(**meta["encoder"]), params=params, rng_seed=int(meta["rng_seed"])
    )
    logger.info(f"📂 Loaded checkpoint from {source} ({state.num_parameters()} parameters)")
    return state


def checkpoint_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    """Return the JSON metadata block of a checkpoint without building tensors."""
    with np.load(Path(path), allow_pickle=False) as archive:
        return json.loads(str(archive[_META_KEY]))
