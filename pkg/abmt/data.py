"""
ABMT Data - part-feature datasets, the synthetic source/target generator,
dataset files, PK batch sampling and part erasing.

Dataset file format::

    # domain=target
    <n> <P> <d_in> <n_cams>
    <identity> <camera> <train|query|gallery> <P*d_in reals>
    ...

Reals are written with ``repr`` so a write/read cycle reproduces every value.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .exceptions import BatchError, DimensionError, ParameterError
from .tensor import Tensor

logger = logging.getLogger("abmt.data")

SPLITS = ("train", "query", "gallery")
DOMAINS = ("source", "target")


@dataclass
class Dataset:
    """Samples as parallel arrays: parts (N x P x d_in), ids, cams and split tags."""

    parts: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    splits: np.ndarray
    domain: str = "source"
    n_cams: int = 2

    def __post_init__(self) -> None:
        self.parts = np.asarray(self.parts, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U7")
        n = len(self.parts)
        if self.parts.ndim != 3:
            raise DimensionError(f"parts must be N x P x d_in, got {self.parts.shape}")
        if not (len(self.ids) == len(self.cams) == len(self.splits) == n):
            raise DimensionError("ids, cams and splits must have one entry per sample")
        unknown = set(self.splits.tolist()) - set(SPLITS)
        if unknown:
            raise ParameterError(f"unknown split tags: {sorted(unknown)}")
        if self.domain not in DOMAINS:
            raise ParameterError(f"unknown domain: {self.domain}")

    def __len__(self) -> int:
        return len(self.parts)

    @property
    def num_parts(self) -> int:
        return self.parts.shape[1]

    @property
    def d_in(self) -> int:
        return self.parts.shape[2]

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.ids)

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ParameterError(f"unknown split: {split}")
        mask = self.splits == split
        return Dataset(
            parts=self.parts[mask],
            ids=self.ids[mask],
            cams=self.cams[mask],
            splits=self.splits[mask],
            domain=self.domain,
            n_cams=self.n_cams,
        )


def identity_dims(d_in: int) -> int:
    """Leading coordinates that carry identity; the rest carry camera and clutter."""
    return max(1, d_in // 2)


def _domain_samples(
    rng: np.random.Generator,
    n_ids: int,
    imgs_per_id: int,
    n_cams: int,
    parts: int,
    d_in: int,
    noise: float,
    part_scale: float,
    cam_scale: float,
    clutter_scale: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d_id = identity_dims(d_in)
    # d_in == 1 leaves no nuisance coordinates, so nuisance shares the identity one
    nuisance = slice(d_id, d_in) if d_id < d_in else slice(0, d_in)
    d_nuis = nuisance.stop - nuisance.start

    identity = np.zeros((n_ids, parts, d_in))
    identity[:, :, :d_id] = rng.normal(0.0, 1.0, size=(n_ids, 1, d_id)) + rng.normal(
        0.0, part_scale, size=(n_ids, parts, d_id)
    )
    cam_bias = rng.normal(0.0, cam_scale, size=(n_cams, 1, d_nuis))

    samples = np.empty((n_ids * imgs_per_id, parts, d_in))
    ids = np.repeat(np.arange(n_ids), imgs_per_id)
    cams = np.tile(np.arange(imgs_per_id) % n_cams, n_ids)
    for row, (person, cam) in enumerate(zip(ids, cams)):
        sample = identity[person].copy()
        sample[:, nuisance] += cam_bias[cam] + rng.normal(0.0, clutter_scale, size=(parts, d_nuis))
        samples[row] = sample + rng.normal(0.0, noise, size=(parts, d_in))
    return samples, ids, cams


def _domain_transform(rng: np.random.Generator, d_in: int) -> Tuple[np.ndarray, np.ndarray]:
    """``(A, t)`` with ``A = R - I`` for a Haar-random orthogonal ``R``; shift 1 gives ``R x + t``."""
    q, r = np.linalg.qr(rng.normal(size=(d_in, d_in)))
    orthogonal = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return orthogonal - np.eye(d_in), rng.normal(0.0, 1.0, size=d_in)


def target_split_tags(imgs_per_id: int) -> np.ndarray:
    """Per-identity tags: half train, a quarter of the rest (at least 1) query, the rest gallery."""
    n_train = imgs_per_id // 2
    rest = imgs_per_id - n_train
    n_query = max(1, rest // 4)
    return np.array(["train"] * n_train + ["query"] * n_query + ["gallery"] * (rest - n_query))


def synth_dataset(
    n_ids: int,
    imgs_per_id: int,
    n_cams: int,
    parts: int,
    d_in: int,
    domain_shift: float,
    noise: float,
    seed: int,
    part_scale: float = 0.5,
    cam_scale: float = 1.0,
    clutter_scale: float = 1.25,
) -> Tuple[Dataset, Dataset]:
    """
    Generate a labeled source domain and a shifted target domain.

    Identity (a base vector plus per-part offsets) lives in the leading
    ``identity_dims(d_in)`` coordinates. Camera bias and per-image clutter live
    in the remaining ones. Noise covers every coordinate. Image ``j`` of an
    identity is taken by camera ``j mod n_cams``. Target identities and
    cameras are new and every target part vector ``x`` becomes
    ``x + domain_shift * (A x + t)`` with ``A = R - I`` for a random orthogonal
    ``R``, which mixes target clutter into the identity coordinates.

    Returns:
        (source, target); source is all ``train``, target is split per identity
    """
    if n_ids < 4 or imgs_per_id < 4 or n_cams < 2:
        raise ParameterError(
            f"need n_ids >= 4, imgs_per_id >= 4, n_cams >= 2; got {n_ids}, {imgs_per_id}, {n_cams}"
        )
    if parts < 1 or d_in < 1:
        raise ParameterError(f"need parts >= 1 and d_in >= 1; got {parts}, {d_in}")
    if min(noise, domain_shift, part_scale, cam_scale, clutter_scale) < 0:
        raise ParameterError("noise, domain_shift and the scales must be non-negative")

    rng = np.random.default_rng(seed)
    args = (n_ids, imgs_per_id, n_cams, parts, d_in, noise, part_scale, cam_scale, clutter_scale)

    src_parts, src_ids, src_cams = _domain_samples(rng, *args)
    source = Dataset(
        parts=src_parts,
        ids=src_ids,
        cams=src_cams,
        splits=np.full(len(src_ids), "train"),
        domain="source",
        n_cams=n_cams,
    )

    tgt_parts, tgt_ids, tgt_cams = _domain_samples(rng, *args)
    transform, translation = _domain_transform(rng, d_in)
    tgt_parts = tgt_parts + domain_shift * (tgt_parts @ transform.T + translation)
    target = Dataset(
        parts=tgt_parts,
        ids=tgt_ids + n_ids,
        cams=tgt_cams,
        splits=np.tile(target_split_tags(imgs_per_id), n_ids),
        domain="target",
        n_cams=n_cams,
    )
    logger.info(
        f"🧪 Synthesized {len(source)} source / {len(target)} target samples "
        f"({n_ids} ids each, shift={domain_shift}, noise={noise}, seed={seed})"
    )
    return source, target


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    n, p, d = dataset.parts.shape
    lines = [f"# domain={dataset.domain}", f"{n} {p} {d} {dataset.n_cams}"]
    for parts, identity, cam, split in zip(dataset.parts, dataset.ids, dataset.cams, dataset.splits):
        values = " ".join(repr(float(v)) for v in parts.reshape(-1))
        lines.append(f"{identity} {cam} {split} {values}")
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"💾 Wrote {n} {dataset.domain} samples to {target}")
    return target


def read_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset file written by ``write_dataset``.

    Raises:
        FileNotFoundError: the file does not exist
        ParameterError: malformed header or record
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    domain = "source"
    records = []
    for raw in source.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "domain":
                domain = value.strip()
            continue
        if line:
            records.append(line)
    if not records:
        raise ParameterError(f"{path}: missing header line")

    try:
        n, p, d, n_cams = (int(v) for v in records[0].split())
    except ValueError as e:
        raise ParameterError(f"{path}: bad header {records[0]!r}") from e
    if len(records) - 1 != n:
        raise ParameterError(f"{path}: header announces {n} samples, found {len(records) - 1}")

    parts = np.empty((n, p, d))
    ids = np.empty(n, dtype=np.int64)
    cams = np.empty(n, dtype=np.int64)
    splits = []
    for row, record in enumerate(records[1:]):
        fields = record.split()
        if len(fields) != 3 + p * d:
            raise ParameterError(f"{path}: record {row} has {len(fields)} fields, expected {3 + p * d}")
        ids[row], cams[row] = int(fields[0]), int(fields[1])
        splits.append(fields[2])
        parts[row] = np.array([float(v) for v in fields[3:]]).reshape(p, d)

    return Dataset(parts=parts, ids=ids, cams=cams, splits=np.array(splits), domain=domain, n_cams=n_cams)


def sample_pk_batch(labels: np.ndarray, p: int, k_inst: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw ``p`` distinct labels and ``k_inst`` samples of each.

    Samples are drawn with replacement only for labels with fewer than
    ``k_inst`` members. Label -1 (outliers) is never drawn. When fewer than
    ``p`` labels are eligible, every eligible label is used.

    Raises:
        BatchError: fewer than two eligible labels
    """
    labels = np.asarray(labels, dtype=np.int64)
    eligible = np.unique(labels[labels >= 0])
    if eligible.size < 2:
        raise BatchError(f"PK sampling needs at least 2 labels, got {eligible.size}")
    if eligible.size < p:
        logger.debug(f"📋 Only {eligible.size} labels available for p={p}")
    chosen = rng.choice(eligible, size=min(p, eligible.size), replace=False)

    batch = []
    for label in chosen:
        members = np.flatnonzero(labels == label)
        batch.append(rng.choice(members, size=k_inst, replace=members.size < k_inst))
    return np.concatenate(batch)


def part_erasing(
    batch: Union[Tensor, np.ndarray], prob: float, rng: np.random.Generator
) -> Union[Tensor, np.ndarray]:
    """With probability ``prob`` per sample, zero one uniformly chosen part vector."""
    if not 0.0 <= prob <= 1.0:
        raise ParameterError(f"erasing probability must lie in [0, 1], got {prob}")
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if data.ndim != 3:
        raise DimensionError(f"part_erasing expects N x P x d_in, got {data.shape}")
    erased = data.copy()
    n, parts, _ = erased.shape
    for i in range(n):
        if rng.random() < prob:
            erased[i, rng.integers(parts)] = 0.0
    return Tensor(erased) if isinstance(batch, Tensor) else erased
