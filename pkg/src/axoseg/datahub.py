"""Dataset registry: manifest ingestion, splits, and aggregation rules.

A dataset lives in a directory with a JSON manifest describing the imaging
domain (modality, pixel size, provenance flags) and listing samples as
relative paths: one image plus optional axon/myelin mask PNGs. Sample ids
are namespaced "<domain-id>/<stem>" at ingest so cross-source collisions
are impossible by construction.

Aggregation follows two rules: the aggregated test set is the exact union
of the source test sets, and every source must contribute at least one
sample to the aggregated validation pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    DuplicateSampleError,
    EmptyValidationPoolError,
    MissingFileError,
    NonBinaryMaskError,
    OverlappingMasksError,
)

MODALITIES = ("TEM", "SEM", "BF", "CARS", "SYNTH")


@dataclass(frozen=True)
class DomainDescriptor:
    id: str
    modality: str
    species: str
    pathology: str
    organ: str
    pixel_size_um: float
    annotated: bool = True
    public: bool = True

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(
                f"domain '{self.id}': unknown modality '{self.modality}' "
                f"(expected one of {MODALITIES})"
            )
        if not self.pixel_size_um > 0:
            raise DataError(
                f"domain '{self.id}': pixel_size_um must be > 0, got {self.pixel_size_um}"
            )


@dataclass(frozen=True)
class Sample:
    sample_id: str  # "<domain-id>/<stem>"
    domain_id: str
    image_path: Path
    axon_mask_path: Optional[Path]
    myelin_mask_path: Optional[Path]
    height: int
    width: int

    @property
    def annotated(self) -> bool:
        return self.axon_mask_path is not None and self.myelin_mask_path is not None


@dataclass
class Dataset:
    descriptor: DomainDescriptor
    samples: List[Sample]
    root: Path

    @property
    def id(self) -> str:
        return self.descriptor.id

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def get(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise DataError(f"sample '{sample_id}' not in dataset '{self.id}'")


# ---------------------------------------------------------------------------
# PNG conventions (masks: 8-bit, foreground 255, background 0)


def load_image_array(path: Path) -> np.ndarray:
    """Raw pixel array from an 8/16-bit grayscale or RGB image file."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr


def load_mask_array(path: Path, sample_id: str = "?") -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise NonBinaryMaskError(
            f"sample '{sample_id}': mask {path.name} must be single-channel, "
            f"got shape {arr.shape}"
        )
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        bad = [int(v) for v in values if v not in (0, 255)]
        raise NonBinaryMaskError(
            f"sample '{sample_id}': mask {path.name} contains non-binary values {bad[:5]}"
        )
    return arr == 255


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image_u8(path: Path, image_u8: np.ndarray) -> None:
    Image.fromarray(image_u8.astype(np.uint8), mode="L").save(path)


def load_sample_arrays(sample: Sample) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """(image, axon mask, myelin mask) for one sample; masks None if absent."""
    image = load_image_array(sample.image_path)
    if not sample.annotated:
        return image, None, None
    axon = load_mask_array(sample.axon_mask_path, sample.sample_id)
    myelin = load_mask_array(sample.myelin_mask_path, sample.sample_id)
    return image, axon, myelin


# ---------------------------------------------------------------------------
# ingest


def ingest(manifest_path) -> Dataset:
    """Validate a manifest and return the registered dataset.

    Every referenced file must exist; masks must be binary, disjoint, and
    dimensioned exactly like their image. Errors name the offending sample.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    if "descriptor" not in doc or "samples" not in doc:
        raise DataError(f"manifest {manifest_path} must contain 'descriptor' and 'samples'")
    try:
        descriptor = DomainDescriptor(**doc["descriptor"])
    except TypeError as e:
        raise DataError(f"manifest {manifest_path}: bad descriptor: {e}") from e

    samples: List[Sample] = []
    seen = set()
    for entry in doc["samples"]:
        stem = entry["id"]
        sid = f"{descriptor.id}/{stem}"
        if sid in seen:
            raise DuplicateSampleError(f"duplicate sample id '{sid}' in manifest")
        seen.add(sid)

        image_path = root / entry["image"]
        if not image_path.exists():
            raise MissingFileError(f"sample '{sid}': image file missing: {image_path}")
        with Image.open(image_path) as img:
            width, height = img.size

        mask_paths = []
        for key in ("axon_mask", "myelin_mask"):
            rel = entry.get(key)
            if rel is None:
                mask_paths.append(None)
                continue
            p = root / rel
            if not p.exists():
                raise MissingFileError(f"sample '{sid}': {key} file missing: {p}")
            mask_paths.append(p)
        axon_path, myelin_path = mask_paths

        masks = {}
        for key, p in (("axon", axon_path), ("myelin", myelin_path)):
            if p is None:
                continue
            with Image.open(p) as img:
                if img.size != (width, height):
                    raise DimensionMismatchError(
                        f"sample '{sid}': {key} mask is {img.size[0]}x{img.size[1]} "
                        f"but image is {width}x{height}"
                    )
            masks[key] = load_mask_array(p, sid)
        if "axon" in masks and "myelin" in masks:
            if (masks["axon"] & masks["myelin"]).any():
                n = int((masks["axon"] & masks["myelin"]).sum())
                raise OverlappingMasksError(
                    f"sample '{sid}': axon and myelin masks overlap on {n} pixels"
                )

        samples.append(
            Sample(
                sample_id=sid,
                domain_id=descriptor.id,
                image_path=image_path,
                axon_mask_path=axon_path,
                myelin_mask_path=myelin_path,
                height=height,
                width=width,
            )
        )
    return Dataset(descriptor=descriptor, samples=samples, root=root)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSet:
    domain_id: str
    train: List[str]
    val: List[str]
    test: List[str]
    seed: int
    ratios: Tuple[float, float, float]

    @property
    def all_ids(self) -> List[str]:
        return self.train + self.val + self.test


def _split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    exact = [r * n for r in ratios]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(n - sum(sizes)):
        i = int(np.argmax(remainders))
        sizes[i] += 1
        remainders[i] = -1.0
    while min(sizes) == 0:  # n >= 3 guarantees this terminates
        sizes[sizes.index(0)] += 1
        sizes[int(np.argmax(sizes))] -= 1
    return sizes


def split(dataset: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitSet:
    """Deterministic shuffled train/val/test partition of a dataset."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset)
    if n < 3:
        raise DataError(
            f"dataset '{dataset.id}' has {n} samples; need >= 3 to build a split"
        )
    ids = sorted(dataset.sample_ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train, n_val, n_test = _split_sizes(n, ratios)
    return SplitSet(
        domain_id=dataset.id,
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=seed,
        ratios=tuple(ratios),
    )


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class AggregatedDataset:
    sources: List[str]
    train: List[str]
    val: List[str]
    test: List[str]
    domain_of: Dict[str, str] = field(default_factory=dict)

    @property
    def all_ids(self) -> List[str]:
        return self.train + self.val + self.test


def aggregate(split_sets: Sequence[SplitSet]) -> AggregatedDataset:
    """Pool source splits: test = exact union of source tests, and every
    source's validation samples join the aggregated validation pool, which
    keeps each domain represented during checkpoint selection."""
    if len(split_sets) < 2:
        raise ConfigError(f"aggregation needs >= 2 sources, got {len(split_sets)}")
    seen: Dict[str, str] = {}
    for ss in split_sets:
        if not ss.val:
            raise EmptyValidationPoolError(
                f"source '{ss.domain_id}' contributes no validation samples; "
                f"every source must be represented in the aggregated validation set"
            )
        for sid in ss.all_ids:
            if sid in seen:
                raise DuplicateSampleError(
                    f"sample id '{sid}' appears in sources "
                    f"'{seen[sid]}' and '{ss.domain_id}'"
                )
            seen[sid] = ss.domain_id
    agg = AggregatedDataset(
        sources=[ss.domain_id for ss in split_sets],
        train=[sid for ss in split_sets for sid in ss.train],
        val=[sid for ss in split_sets for sid in ss.val],
        test=[sid for ss in split_sets for sid in ss.test],
        domain_of=seen,
    )
    return agg


@dataclass(frozen=True)
class LeakageFinding:
    sample_id: str
    splits: Tuple[str, ...]


def verify_no_leakage(agg: AggregatedDataset) -> List[LeakageFinding]:
    """Report every sample id present in more than one of train/val/test."""
    membership: Dict[str, List[str]] = {}
    for name, ids in (("train", agg.train), ("val", agg.val), ("test", agg.test)):
        for sid in ids:
            membership.setdefault(sid, []).append(name)
    return [
        LeakageFinding(sample_id=sid, splits=tuple(names))
        for sid, names in sorted(membership.items())
        if len(names) > 1
    ]
