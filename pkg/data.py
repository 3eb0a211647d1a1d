"""
Volume containers, patch/mask geometry, the synthetic planted-connectome
generator, and dataset ingestion (volume codec + CSV manifests).

Voxel layout everywhere is (H, W, D, C) in C order, so the flat index of
voxel (x, y, z, c) is ((x * W) + y) * D * C + z * C + c. Tokens follow the
x-major patch-grid order idx = (gx * (W/P) + gy) * (D/P) + gz, and the
voxels inside a token are flattened in (px, py, pz, c) order.
"""

import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from einops import rearrange

from errors import (
    BadMagicError,
    ConfigError,
    DegenerateMaskError,
    DimensionOverflowError,
    GeometryError,
    ManifestError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from utils import logger

PathLike = Union[str, Path]

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["id", "path", "label", "split"]

VOLUME_MAGIC = b"VOL1"
VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sIIIII")
MAX_VOXELS = 2**31 - 1


@dataclass
class VolumeGrid:
    """A 3D scalar field with a trailing channel axis, shape (H, W, D, C)."""

    voxels: np.ndarray

    def __post_init__(self):
        if self.voxels.ndim == 3:
            self.voxels = self.voxels[..., None]
        if self.voxels.ndim != 4:
            raise GeometryError(
                f"volume must have shape (H, W, D, C), got {self.voxels.shape}"
            )
        if not np.all(np.isfinite(self.voxels)):
            raise GeometryError("volume contains non-finite voxels")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.voxels.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.voxels.shape[3])


@dataclass
class TokenSequence:
    """Flattened non-overlapping P³ patches of a volume.

    `indices` holds the original patch-grid index of every row; it is None for
    a full sequence, where row i is patch i.
    """

    data: np.ndarray
    grid: Tuple[int, int, int]
    patch_size: int
    channels: int = 1
    indices: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def token_len(self) -> int:
        return int(self.data.shape[1])

    @property
    def original_indices(self) -> np.ndarray:
        if self.indices is None:
            return np.arange(self.count)
        return self.indices


@dataclass
class MaskPartition:
    ratio: float
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: Optional[int] = None

    @property
    def num_tokens(self) -> int:
        return int(self.visible_idx.size + self.masked_idx.size)

    @property
    def num_visible(self) -> int:
        return int(self.visible_idx.size)

    @property
    def num_masked(self) -> int:
        return int(self.masked_idx.size)


@dataclass
class DatasetEntry:
    id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetIndex:
    entries: List[DatasetEntry]
    root: Optional[Path] = None

    def split(self, name: str) -> List[DatasetEntry]:
        return [entry for entry in self.entries if entry.split == name]

    def counts(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def resolve(self, entry: DatasetEntry) -> Path:
        path = Path(entry.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.id, e.path, e.label, e.split) for e in self.entries],
            columns=MANIFEST_COLUMNS,
        )


def default_covariances(
    num_regions: int, variance: float = 0.02, rho: float = 0.8
) -> Tuple[np.ndarray, np.ndarray]:
    """Class covariances with equal diagonals that differ only off-diagonal.

    Class 0 is equicorrelated across all regions; class 1 keeps the same
    strength but flips the sign between the two halves of the region list.
    """
    ones = np.ones(num_regions)
    half = (num_regions + 1) // 2
    signs = np.concatenate([np.ones(half), -np.ones(num_regions - half)])
    base = (1.0 - rho) * np.eye(num_regions)
    sigma0 = variance * (base + rho * np.outer(ones, ones))
    sigma1 = variance * (base + rho * np.outer(signs, signs))
    return sigma0, sigma1


def default_region_centers(
    dims: Sequence[int], num_regions: int
) -> List[Tuple[int, int, int]]:
    """First `num_regions` corners of the cube inset by a quarter of each dim."""
    if num_regions > 8:
        raise ConfigError("more than 8 regions need explicit centers")
    axes = [(d // 4, d - 1 - d // 4) for d in dims]
    return [tuple(c) for c in itertools.product(*axes)][:num_regions]


@dataclass
class SyntheticConfig:
    """Planted-connectome generator settings.

    Class signal lives only in the inter-region covariance: both classes share
    the same region mean.
    """

    dims: Tuple[int, int, int] = (20, 20, 20)
    num_regions: int = 4
    radius: Optional[int] = None
    centers: Optional[List[Tuple[int, int, int]]] = None
    covariances: Optional[Tuple[np.ndarray, np.ndarray]] = None
    # default_covariances parameters, used when `covariances` is None
    variance: float = 0.02
    rho: float = 0.8
    mean: float = 0.5
    noise_std: float = 0.05
    samples_per_class: Dict[str, int] = field(
        default_factory=lambda: {"train": 16, "val": 4, "test": 4}
    )
    seed: int = 0
    # target-domain fabrication for the cross-domain protocol
    domain_offset: float = 0.0
    domain_noise_scale: float = 1.0

    def resolved_radius(self) -> int:
        if self.radius is not None:
            return self.radius
        return max(1, min(self.dims) // 6)

    def resolved_centers(self) -> List[Tuple[int, int, int]]:
        if self.centers is not None:
            return [tuple(c) for c in self.centers]
        return default_region_centers(self.dims, self.num_regions)

    def resolved_covariances(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.covariances is not None:
            return tuple(np.asarray(s, dtype=np.float64) for s in self.covariances)
        return default_covariances(self.num_regions, self.variance, self.rho)

    def validate(self) -> None:
        if self.num_regions < 2:
            raise ConfigError(f"num_regions must be >= 2, got {self.num_regions}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive ints, got {self.dims}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.variance <= 0:
            raise ConfigError(f"variance must be > 0, got {self.variance}")
        unknown = set(self.samples_per_class) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown split(s) in samples_per_class: {unknown}")

        centers = self.resolved_centers()
        if len(centers) != self.num_regions:
            raise ConfigError(
                f"expected {self.num_regions} centers, got {len(centers)}"
            )
        radius = self.resolved_radius()
        for center in centers:
            for c, d in zip(center, self.dims):
                if c - radius < 0 or c + radius > d - 1:
                    raise ConfigError(
                        f"region center {center} with radius {radius} "
                        f"does not fit inside {self.dims}"
                    )

        for k, sigma in enumerate(self.resolved_covariances()):
            if sigma.shape != (self.num_regions, self.num_regions):
                raise ConfigError(f"Σ{k} has shape {sigma.shape}")
            if not np.allclose(sigma, sigma.T, atol=1e-10):
                raise ConfigError(f"Σ{k} is not symmetric")
            if np.linalg.eigvalsh(sigma).min() < -1e-10:
                raise ConfigError(f"Σ{k} is not positive semidefinite")


def patchify(volume: VolumeGrid, patch_size: int) -> TokenSequence:
    """Cut a volume into non-overlapping P³ blocks, x-major."""
    dims = volume.dims
    if any(d % patch_size for d in dims):
        raise GeometryError(f"dims {dims} are not divisible by patch size {patch_size}")
    grid = tuple(d // patch_size for d in dims)
    data = rearrange(
        volume.voxels,
        "(gx px) (gy py) (gz pz) c -> (gx gy gz) (px py pz c)",
        px=patch_size,
        py=patch_size,
        pz=patch_size,
    )
    return TokenSequence(
        data=np.ascontiguousarray(data),
        grid=grid,
        patch_size=patch_size,
        channels=volume.channels,
    )


def patchify_batch(volumes, patch_size: int):
    """Batched patchify for (B, H, W, D, C) numpy arrays or torch tensors."""
    dims = tuple(volumes.shape[1:4])
    if any(d % patch_size for d in dims):
        raise GeometryError(f"dims {dims} are not divisible by patch size {patch_size}")
    return rearrange(
        volumes,
        "b (gx px) (gy py) (gz pz) c -> b (gx gy gz) (px py pz c)",
        px=patch_size,
        py=patch_size,
        pz=patch_size,
    )


def unpatchify(tokens: TokenSequence) -> VolumeGrid:
    """Exact inverse of patchify. Requires a full, ordered token sequence."""
    gx, gy, gz = tokens.grid
    p = tokens.patch_size
    expected_len = p**3 * tokens.channels
    if tokens.count != gx * gy * gz or tokens.token_len != expected_len:
        raise GeometryError(
            f"{tokens.count}x{tokens.token_len} tokens do not match grid "
            f"{tokens.grid} with patch size {p} and {tokens.channels} channel(s)"
        )
    voxels = rearrange(
        tokens.data,
        "(gx gy gz) (px py pz c) -> (gx px) (gy py) (gz pz) c",
        gx=gx,
        gy=gy,
        gz=gz,
        px=p,
        py=p,
        pz=p,
    )
    return VolumeGrid(np.ascontiguousarray(voxels))


def num_masked(num_tokens: int, ratio: float) -> int:
    # tolerance keeps 125 * 0.76 at 95 despite binary rounding
    return int(math.floor(num_tokens * ratio + 1e-9))


def sample_mask(num_tokens: int, ratio: float, seed: Optional[int]) -> MaskPartition:
    """Uniform random visible/masked split with floor(N·m) masked tokens."""
    if not 0.0 < ratio < 1.0:
        raise DegenerateMaskError(f"mask ratio must lie in (0, 1), got {ratio}")
    if num_tokens < 2:
        raise DegenerateMaskError(f"need at least 2 tokens, got {num_tokens}")

    n_masked = num_masked(num_tokens, ratio)
    n_visible = num_tokens - n_masked
    if n_masked == 0 or n_visible == 0:
        raise DegenerateMaskError(
            f"N={num_tokens}, m={ratio} gives {n_visible} visible / {n_masked} masked"
        )

    perm = np.random.default_rng(seed).permutation(num_tokens)
    return MaskPartition(
        ratio=ratio,
        visible_idx=np.sort(perm[n_masked:]),
        masked_idx=np.sort(perm[:n_masked]),
        seed=seed,
    )


def split_tokens(
    tokens: TokenSequence, part: MaskPartition
) -> Tuple[TokenSequence, TokenSequence]:
    """Gather visible tokens and masked targets, each in ascending original order."""
    if part.num_tokens != tokens.count:
        raise GeometryError(
            f"partition covers {part.num_tokens} tokens, sequence has {tokens.count}"
        )
    for idx in (part.visible_idx, part.masked_idx):
        if idx.size and (idx.min() < 0 or idx.max() >= tokens.count):
            raise GeometryError(f"partition index out of range [0, {tokens.count})")

    def gather(idx: np.ndarray) -> TokenSequence:
        idx = np.sort(idx)
        return TokenSequence(
            data=tokens.data[idx],
            grid=tokens.grid,
            patch_size=tokens.patch_size,
            channels=tokens.channels,
            indices=idx,
        )

    return gather(part.visible_idx), gather(part.masked_idx)


def _region_kernels(cfg: SyntheticConfig) -> np.ndarray:
    """Indicator balls, shape (R, H, W, D)."""
    radius = cfg.resolved_radius()
    coords = np.stack(np.meshgrid(*[np.arange(d) for d in cfg.dims], indexing="ij"))
    kernels = []
    for center in cfg.resolved_centers():
        offset = coords - np.asarray(center).reshape(3, 1, 1, 1)
        kernels.append(((offset**2).sum(axis=0) <= radius**2).astype(np.float64))
    return np.stack(kernels)


def region_means(volumes: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Mean voxel value inside every planted region, shape (S, R)."""
    kernels = _region_kernels(cfg)
    flat = volumes[..., 0].reshape(volumes.shape[0], -1).astype(np.float64)
    weights = kernels.reshape(kernels.shape[0], -1)
    return flat @ weights.T / weights.sum(axis=1)


def _sample_volume(
    cfg: SyntheticConfig,
    kernels: np.ndarray,
    sigma: np.ndarray,
    sample_index: int,
) -> np.ndarray:
    # per-sample stream derived from (seed, index): reproducible and order-free
    rng = np.random.default_rng([cfg.seed, sample_index])
    intensities = rng.multivariate_normal(
        np.full(cfg.num_regions, cfg.mean), sigma, method="eigh"
    )
    field_ = np.tensordot(intensities, kernels, axes=1)
    noise = rng.normal(0.0, cfg.noise_std * cfg.domain_noise_scale, size=cfg.dims)
    volume = np.clip(field_ + noise + cfg.domain_offset, 0.0, 1.0)
    return volume.astype(np.float32)[..., None]


def generate_synthetic(
    cfg: SyntheticConfig,
) -> Tuple[np.ndarray, np.ndarray, DatasetIndex]:
    """Draw planted-covariance volumes for every (split, class) cell.

    Returns:
        volumes: (S, H, W, D, 1) float32 in [0, 1].
        labels: (S,) int64.
        index: entries with ids `sample_00000`...; paths are `<id>.vol`
            relative to wherever `write_dataset` puts them.
    """
    cfg.validate()
    kernels = _region_kernels(cfg)
    sigmas = cfg.resolved_covariances()

    volumes, labels, entries = [], [], []
    for split in SPLITS:
        count = cfg.samples_per_class.get(split, 0)
        for label in (0, 1):
            for _ in range(count):
                sample_index = len(volumes)
                volumes.append(_sample_volume(cfg, kernels, sigmas[label], sample_index))
                labels.append(label)
                sample_id = f"sample_{sample_index:05d}"
                entries.append(DatasetEntry(sample_id, f"{sample_id}.vol", label, split))

    if not volumes:
        raise ConfigError("samples_per_class requests no samples")
    return np.stack(volumes), np.asarray(labels, dtype=np.int64), DatasetIndex(entries)


def write_volume(volume: VolumeGrid, path: PathLike) -> None:
    h, w, d = volume.dims
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, h, w, d, volume.channels)
    payload = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path: PathLike) -> VolumeGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _VOLUME_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header is {len(raw)} bytes")
    magic, version, h, w, d, c = _VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported volume version {version}")

    count = h * w * d * c
    if count > MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: {h}x{w}x{d}x{c} exceeds {MAX_VOXELS} voxels")
    payload = raw[_VOLUME_HEADER.size :]
    if len(payload) < count * 4:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header needs {count * 4}"
        )
    voxels = np.frombuffer(payload, dtype="<f4", count=count).reshape(h, w, d, c)
    return VolumeGrid(voxels.astype(np.float32))


def load_manifest(path: PathLike, num_classes: Optional[int] = None) -> DatasetIndex:
    """Parse and validate a `id,path,label,split` manifest."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ManifestError(f"{path}: manifest is empty")

    if list(frame.columns) != MANIFEST_COLUMNS:
        raise ManifestError(
            f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {list(frame.columns)}"
        )
    if frame.empty:
        raise ManifestError(f"{path}: manifest has no entries")

    entries: List[DatasetEntry] = []
    seen = set()
    for row_number, row in enumerate(frame.itertuples(index=False), start=1):
        if row.id in seen:
            raise ManifestError(f"duplicate id {row.id!r}", row=row_number)
        if row.split not in SPLITS:
            raise ManifestError(
                f"unknown split {row.split!r} (expected one of {SPLITS})", row=row_number
            )
        try:
            label = int(row.label)
        except ValueError:
            raise ManifestError(f"label {row.label!r} is not an integer", row=row_number)
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ManifestError(f"label {label} out of range", row=row_number)
        seen.add(row.id)
        entries.append(DatasetEntry(row.id, row.path, label, row.split))

    return DatasetIndex(entries, root=path.parent)


def save_manifest(index: DatasetIndex, path: PathLike) -> None:
    index.to_frame().to_csv(path, index=False, encoding="utf-8")


def load_split(index: DatasetIndex, split: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read every volume of a split into a (B, H, W, D, C) array."""
    entries = index.split(split)
    if not entries:
        raise ManifestError(f"split {split!r} has no entries")

    volumes = []
    for entry in entries:
        path = index.resolve(entry)
        if not path.exists():
            raise ManifestError(f"entry {entry.id!r}: volume file {path} not found")
        voxels = read_volume(path).voxels
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"Read {path} for {entry.id} (label {entry.label}, shape {voxels.shape})")
        if voxels.min() < 0.0 or voxels.max() > 1.0:
            logger.warning(
                f"Volume {entry.id} has voxels outside [0, 1] "
                f"(min={voxels.min():.4f}, max={voxels.max():.4f})"
            )
        volumes.append(voxels)

    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise GeometryError(f"split {split!r} mixes volume shapes {sorted(shapes)}")
    labels = np.asarray([entry.label for entry in entries], dtype=np.int64)
    return np.stack(volumes), labels


def write_dataset(
    volumes: np.ndarray, index: DatasetIndex, out_dir: PathLike
) -> DatasetIndex:
    """Write one `.vol` per entry plus `manifest.csv`; returns the rooted index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for volume, entry in zip(volumes, index.entries):
        write_volume(VolumeGrid(volume), out_dir / entry.path)
    rooted = DatasetIndex(list(index.entries), root=out_dir)
    save_manifest(rooted, out_dir / "manifest.csv")
    return rooted


def stratified_split(
    labels: Sequence[int],
    ratios: Tuple[float, ...] = (0.6, 0.2, 0.2),
    seed: int = 0,
    names: Tuple[str, ...] = SPLITS,
) -> List[str]:
    """Assign split tags class by class from a seeded permutation.

    Counts per class are floor(ratio * n) for all but the first split, which
    takes the remainder. A class with at least one sample per split puts at
    least one sample in every split.
    """
    labels = np.asarray(labels)
    tags = np.empty(labels.size, dtype=object)
    rng = np.random.default_rng(seed)
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        n = members.size
        minimum = 1 if n >= len(ratios) else 0
        tail = [max(minimum, int(math.floor(r * n))) for r in ratios[1:]]
        head = n - sum(tail)
        bounds = np.cumsum([0, head] + tail)
        for name, start, stop in zip(names, bounds[:-1], bounds[1:]):
            tags[members[start:stop]] = name
    return tags.tolist()


def cross_domain_index(
    source: DatasetIndex, target: DatasetIndex, seed: int = 0
) -> DatasetIndex:
    """Source re-split train/val 4:1 (stratified); every target entry is test."""
    tags = stratified_split(
        [e.label for e in source.entries], ratios=(0.8, 0.2), seed=seed, names=("train", "val")
    )
    entries = [
        DatasetEntry(f"src/{e.id}", str(source.resolve(e)), e.label, tag)
        for e, tag in zip(source.entries, tags)
    ]
    entries += [
        DatasetEntry(f"tgt/{e.id}", str(target.resolve(e)), e.label, "test")
        for e in target.entries
    ]
    return DatasetIndex(entries)
