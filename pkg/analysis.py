"""
Representation diagnostics over trained models: attention maps and hub
patches, per-block feature variance, Fourier log-amplitude profiles,
filter-normalized loss landscapes and reconstruction dumps. Results are
returned as arrays/dataclasses and written as CSV for external plotting.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from einops import rearrange

from data import (
    MaskPartition,
    TokenSequence,
    VolumeGrid,
    patchify,
    unpatchify,
    write_volume,
)
from errors import GeometryError
from model import CLASSIFIER_PREFIXES, CSCRL, MaskBatch
from utils import logger

PathLike = Union[str, Path]

AMPLITUDE_FLOOR = 1e-8


@dataclass
class AttentionMap:
    """Batch-averaged attention probabilities of one layer, (heads, T, T)."""

    layer: int
    maps: np.ndarray

    def head_averaged(self) -> np.ndarray:
        return self.maps.mean(axis=0)


@dataclass
class HubEntry:
    rank: int
    patch: int
    coords: Tuple[int, int, int]
    score: float


@dataclass
class HubReport:
    entries: List[HubEntry]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.rank, e.patch, *e.coords, e.score) for e in self.entries],
            columns=["rank", "patch", "gx", "gy", "gz", "score"],
        )


@dataclass
class SpectralProfile:
    """Relative log amplitude per block (rows) and normalized-frequency bin (cols)."""

    freqs_over_pi: np.ndarray
    log_amp: np.ndarray
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        # the DC column is 0 by construction, so Δ is the top bin
        self.delta = self.log_amp[:, -1] - self.log_amp[:, 0]


@dataclass
class LossSurface:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray
    seeds: Tuple[int, int]

    def to_frame(self) -> pd.DataFrame:
        a, b = np.meshgrid(self.alphas, self.betas, indexing="ij")
        return pd.DataFrame(
            {"alpha": a.ravel(), "beta": b.ravel(), "loss": self.values.ravel()}
        )


def _as_tensor(model: CSCRL, volumes) -> torch.Tensor:
    return torch.as_tensor(volumes, dtype=next(model.parameters()).dtype)


@torch.no_grad()
def attention_map(model: CSCRL, volumes: np.ndarray, layer: int = 0) -> AttentionMap:
    """Per-head attention of encoder block `layer` (0-based), full-token forward."""
    if not 0 <= layer < len(model.blocks):
        raise IndexError(f"layer {layer} out of range for depth {len(model.blocks)}")
    attn = model.blocks[layer].attn
    model.eval()
    attn.capture = True
    try:
        model.classify(_as_tensor(model, volumes))
        maps = attn.last_attention.mean(dim=0).double().numpy()
    finally:
        attn.capture = False
        attn.last_attention = None
    return AttentionMap(layer=layer, maps=maps)


def hub_patches(attn, k: int, grid: Sequence[int]) -> HubReport:
    """Top-k patches by attention column sum (head-averaged when given heads).

    Ties are broken by ascending patch index.
    """
    if isinstance(attn, AttentionMap):
        matrix = attn.head_averaged()
    else:
        matrix = np.asarray(attn, dtype=np.float64)
        if matrix.ndim == 3:
            matrix = matrix.mean(axis=0)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise GeometryError(f"attention map must be square, got {matrix.shape}")
    n = matrix.shape[1]
    if not 0 < k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")

    scores = matrix.sum(axis=0)
    order = np.lexsort((np.arange(n), -scores))[:k]
    coords = np.stack(np.unravel_index(order, tuple(grid)), axis=-1)
    return HubReport(
        [
            HubEntry(rank=r + 1, patch=int(p), coords=tuple(int(c) for c in xyz), score=float(scores[p]))
            for r, (p, xyz) in enumerate(zip(order, coords))
        ]
    )


@torch.no_grad()
def block_features(model: CSCRL, volumes: np.ndarray) -> List[torch.Tensor]:
    """Every encoder block output (B, N, C) from a full-token forward."""
    model.eval()
    tokens = model.tokens_from_volumes(_as_tensor(model, volumes))
    _, features = model.encode(tokens, return_features=True)
    return features


def feature_map_variance(features: torch.Tensor) -> float:
    """Population variance over tokens × channels, averaged over the batch."""
    flat = features.reshape(features.shape[0], -1).double()
    return float(flat.var(dim=1, unbiased=False).mean())


def feature_variance(model: CSCRL, volumes: np.ndarray) -> np.ndarray:
    return np.array([feature_map_variance(f) for f in block_features(model, volumes)])


def variance_frame(variances: np.ndarray) -> pd.DataFrame:
    depth = len(variances)
    return pd.DataFrame(
        {
            "block": np.arange(depth),
            "normalized_depth": (np.arange(depth) + 1) / depth,
            "variance": variances,
        }
    )


def spectral_profile(features, grid: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Relative log amplitude of one feature map by normalized frequency.

    The tokens (B, N, C) are laid back onto the patch grid and transformed
    with a 3D real DFT per channel. A frequency's normalized radius is
    max over axes of |k| / (n // 2), so 1.0 is the Nyquist corner. Amplitudes
    are averaged per radius bin over channels, batch and frequencies, floored
    at AMPLITUDE_FLOOR and logged relative to the DC bin.

    Returns:
        (freqs_over_pi, log_amp), both ordered from 0 to 1.
    """
    grid = tuple(int(g) for g in grid)
    if min(grid) < 2:
        raise GeometryError(f"spectral analysis needs >= 2 patches per axis, got grid {grid}")

    x = torch.as_tensor(features, dtype=torch.float64)
    x = rearrange(x, "b (gx gy gz) c -> b c gx gy gz", gx=grid[0], gy=grid[1], gz=grid[2])
    amplitude = torch.fft.rfftn(x, dim=(-3, -2, -1), norm="forward").abs()
    amplitude = amplitude.mean(dim=(0, 1)).numpy()

    axes = [
        np.abs(np.fft.fftfreq(grid[0]) * grid[0]) / (grid[0] // 2),
        np.abs(np.fft.fftfreq(grid[1]) * grid[1]) / (grid[1] // 2),
        np.arange(grid[2] // 2 + 1) / (grid[2] // 2),
    ]
    radius = np.maximum.reduce(np.meshgrid(*axes, indexing="ij"))
    radius = np.round(radius, 9)

    bins = np.unique(radius)
    per_bin = np.array([amplitude[radius == b].mean() for b in bins])
    log_amp = np.log(np.maximum(per_bin, AMPLITUDE_FLOOR))
    return bins, log_amp - log_amp[0]


def fourier_profile(model: CSCRL, volumes: np.ndarray) -> SpectralProfile:
    grid = model.cfg.grid
    rows = [spectral_profile(f, grid) for f in block_features(model, volumes)]
    return SpectralProfile(
        freqs_over_pi=rows[0][0], log_amp=np.stack([log_amp for _, log_amp in rows])
    )


# loss landscape


def _landscape_parameters(model: CSCRL) -> Dict[str, torch.nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if n.startswith(CLASSIFIER_PREFIXES)}


def filter_normalized_direction(model: CSCRL, seed: int) -> Dict[str, torch.Tensor]:
    """Gaussian direction rescaled row by row to the parameter's row norms.

    1-D parameters (biases, layer-norm) get a zero direction.
    """
    generator = torch.Generator().manual_seed(seed)
    direction = {}
    for name, param in _landscape_parameters(model).items():
        if param.ndim <= 1:
            direction[name] = torch.zeros_like(param)
            continue
        d = torch.randn(param.shape, generator=generator, dtype=torch.float64)
        p_rows = param.detach().double().reshape(param.shape[0], -1)
        d_rows = d.reshape(param.shape[0], -1)
        scale = p_rows.norm(dim=1) / (d_rows.norm(dim=1) + 1e-10)
        direction[name] = (d_rows * scale.unsqueeze(1)).reshape(param.shape).to(param.dtype)
    return direction


@torch.no_grad()
def training_loss(
    model: CSCRL,
    volumes: np.ndarray,
    labels: np.ndarray,
    weight_decay: float,
    batch_size: int = 16,
) -> float:
    """NLL over the whole split plus ½·wd·‖θ‖² over classifier parameters."""
    model.eval()
    total = 0.0
    for start in range(0, len(volumes), batch_size):
        x = _as_tensor(model, volumes[start : start + batch_size])
        y = torch.as_tensor(labels[start : start + batch_size], dtype=torch.long)
        total += F.cross_entropy(model.classify(x).double(), y, reduction="sum").item()
    nll = total / len(volumes)
    l2 = sum(p.double().pow(2).sum().item() for p in _landscape_parameters(model).values())
    return nll + 0.5 * weight_decay * l2


class LandscapeEvaluator:
    """Evaluates the training loss at θ + αδ + βη, restoring θ afterwards."""

    def __init__(
        self,
        model: CSCRL,
        volumes: np.ndarray,
        labels: np.ndarray,
        seeds: Tuple[int, int] = (0, 1),
        weight_decay: float = 0.05,
    ):
        self.model = model
        self.volumes = volumes
        self.labels = labels
        self.seeds = seeds
        self.weight_decay = weight_decay
        self.params = _landscape_parameters(model)
        self.base = {n: p.detach().clone() for n, p in self.params.items()}
        self.delta = filter_normalized_direction(model, seeds[0])
        self.eta = filter_normalized_direction(model, seeds[1])

    @torch.no_grad()
    def loss_at(self, alpha: float, beta: float) -> float:
        for name, param in self.params.items():
            param.copy_(self.base[name] + alpha * self.delta[name] + beta * self.eta[name])
        try:
            value = training_loss(self.model, self.volumes, self.labels, self.weight_decay)
        finally:
            self.restore()
        return value if np.isfinite(value) else float("inf")

    @torch.no_grad()
    def restore(self) -> None:
        for name, param in self.params.items():
            param.copy_(self.base[name])


def loss_landscape(
    model: CSCRL,
    volumes: np.ndarray,
    labels: np.ndarray,
    steps: int = 41,
    span: float = 1.0,
    seeds: Tuple[int, int] = (0, 1),
    weight_decay: float = 0.05,
) -> LossSurface:
    """Loss over a steps × steps grid of (α, β) ∈ [−span, span]²."""
    evaluator = LandscapeEvaluator(model, volumes, labels, seeds, weight_decay)
    alphas = np.linspace(-span, span, steps)
    betas = np.linspace(-span, span, steps)
    values = np.empty((steps, steps))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            values[i, j] = evaluator.loss_at(float(a), float(b))
    logger.info(f"Loss landscape: {steps}x{steps} grid, min {values.min():.6f}")
    return LossSurface(alphas, betas, values, tuple(seeds))


def loss_curve(
    model: CSCRL,
    volumes: np.ndarray,
    labels: np.ndarray,
    alphas: Sequence[float],
    seeds: Tuple[int, int] = (0, 1),
    weight_decay: float = 0.05,
) -> np.ndarray:
    """1D slice of the landscape along δ (β = 0)."""
    evaluator = LandscapeEvaluator(model, volumes, labels, seeds, weight_decay)
    return np.array([evaluator.loss_at(float(a), 0.0) for a in alphas])


# reconstructions


@torch.no_grad()
def dump_reconstructions(
    model: CSCRL,
    volumes: np.ndarray,
    parts: Sequence[MaskPartition],
    out_dir: PathLike,
) -> pd.DataFrame:
    """Write original / masked-input / reconstruction volumes per sample.

    Returns (and writes as `reconstructions.csv`) the per-sample masked-region
    MSE between reconstruction and original.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = []
    for i, (volume, part) in enumerate(zip(volumes, parts)):
        original = VolumeGrid(np.asarray(volume, dtype=np.float32))
        tokens = patchify(original, model.cfg.patch_size)

        outputs = model.forward_pretrain(
            torch.as_tensor(tokens.data, dtype=dtype).unsqueeze(0),
            MaskBatch.from_partitions([part]),
        )
        predicted = outputs["y_all"][0].float().numpy()
        reconstruction = unpatchify(
            TokenSequence(predicted, tokens.grid, tokens.patch_size, tokens.channels)
        )

        masked_input = tokens.data.copy()
        masked_input[part.masked_idx] = 0.0
        masked_volume = unpatchify(
            TokenSequence(masked_input, tokens.grid, tokens.patch_size, tokens.channels)
        )

        write_volume(original, out_dir / f"sample_{i:03d}_original.vol")
        write_volume(masked_volume, out_dir / f"sample_{i:03d}_masked.vol")
        write_volume(reconstruction, out_dir / f"sample_{i:03d}_reconstruction.vol")

        diff = predicted[part.masked_idx].astype(np.float64) - tokens.data[part.masked_idx].astype(np.float64)
        rows.append({"sample": i, "masked_mse": float(np.mean(diff**2))})

    frame = pd.DataFrame(rows, columns=["sample", "masked_mse"])
    frame.to_csv(out_dir / "reconstructions.csv", index=False)
    return frame


# CSV writers


def attention_frame(attn: AttentionMap) -> pd.DataFrame:
    """Head-resolved rows plus head-averaged rows tagged head = -1."""
    heads, t, _ = attn.maps.shape
    stacked = np.concatenate([attn.maps, attn.head_averaged()[None]], axis=0)
    head_ids = list(range(heads)) + [-1]
    h, r, c = np.meshgrid(head_ids, np.arange(t), np.arange(t), indexing="ij")
    return pd.DataFrame(
        {
            "layer": attn.layer,
            "head": h.ravel(),
            "row": r.ravel(),
            "col": c.ravel(),
            "value": stacked.ravel(),
        }
    )


def spectrum_frames(profile: SpectralProfile) -> Tuple[pd.DataFrame, pd.DataFrame]:
    depth, bins = profile.log_amp.shape
    block, freq = np.meshgrid(np.arange(depth), profile.freqs_over_pi, indexing="ij")
    spectrum = pd.DataFrame(
        {"block": block.ravel(), "freq_over_pi": freq.ravel(), "log_amp": profile.log_amp.ravel()}
    )
    delta = pd.DataFrame({"block": np.arange(depth), "delta_log_amp": profile.delta})
    return spectrum, delta


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path
