"""
The CS-CRL network: a 3D patch ViT encoder, two projection branches with
Gram matrices, a shared lightweight decoder whose branch outputs are
differenced into the reconstruction, and a GAP classification head.

Everything operates on batches: tokens are (B, T, L) tensors and mask
partitions are carried as (B, N₁) / (B, N₂) index tensors (see MaskBatch).
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from data import MaskPartition, patchify_batch
from errors import ConfigError, GeometryError, NumericError

MODES = ("cscrl", "mae")
INIT_STD = 0.02
# parameters reachable from the classification path
CLASSIFIER_PREFIXES = ("patch_embed.", "blocks.", "norm.", "head.")
ENCODER_PREFIXES = ("patch_embed.", "blocks.", "norm.")


@dataclass
class ModelConfig:
    """Network shape. Defaults are the full-size configuration (50³ volumes)."""

    volume_dims: Tuple[int, int, int] = (50, 50, 50)
    channels: int = 1
    patch_size: int = 10
    encoder_dim: int = 1000
    encoder_depth: int = 12
    encoder_heads: int = 10
    decoder_dim: int = 600
    decoder_depth: int = 4
    decoder_heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    mode: str = "cscrl"
    num_classes: int = 2
    head_init_scale: float = 1.0

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(d // self.patch_size for d in self.volume_dims)

    @property
    def num_tokens(self) -> int:
        gx, gy, gz = self.grid
        return gx * gy * gz

    @property
    def token_len(self) -> int:
        return self.patch_size**3 * self.channels

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(d % self.patch_size for d in self.volume_dims):
            raise ConfigError(
                f"volume dims {self.volume_dims} not divisible by patch size {self.patch_size}"
            )
        for name, dim, heads in (
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ):
            if heads < 1 or dim % heads:
                raise ConfigError(f"{name}_dim={dim} is not divisible by {name}_heads={heads}")
            if dim < 6:
                raise ConfigError(f"{name}_dim={dim} is below the position-encoding minimum 6")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.head_init_scale < 0:
            raise ConfigError("head_init_scale must be >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        values = dict(values)
        values["volume_dims"] = tuple(values["volume_dims"])
        return cls(**values)


@dataclass
class MaskBatch:
    """Per-sample partitions stacked into index tensors."""

    visible_idx: torch.Tensor
    masked_idx: torch.Tensor

    @classmethod
    def from_partitions(cls, parts: Sequence[MaskPartition]) -> "MaskBatch":
        if len({(p.num_visible, p.num_masked) for p in parts}) != 1:
            raise GeometryError("partitions in a batch must share N₁ and N₂")
        return cls(
            visible_idx=torch.as_tensor(np.stack([p.visible_idx for p in parts]), dtype=torch.long),
            masked_idx=torch.as_tensor(np.stack([p.masked_idx for p in parts]), dtype=torch.long),
        )

    @property
    def num_tokens(self) -> int:
        return self.visible_idx.shape[1] + self.masked_idx.shape[1]


def position_encoding(grid: Sequence[int], dim: int) -> np.ndarray:
    """Fixed 3D sin-cos table, shape (gx·gy·gz, dim), rows in x-major order.

    `dim` is split into three equal even blocks (one per axis) with any
    remainder left as trailing zeros. Within a block of width b the first b/2
    entries are sin(p / 10000^(2j/b)) and the last b/2 the matching cosines.
    """
    if dim < 6:
        raise ConfigError(f"position encoding needs dim >= 6, got {dim}")
    block = (dim // 3) // 2 * 2
    omega = 1.0 / 10000 ** (np.arange(block // 2, dtype=np.float64) * 2.0 / block)

    coords = np.stack(
        np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), axis=-1
    ).reshape(-1, 3)

    table = np.zeros((coords.shape[0], dim), dtype=np.float64)
    for axis in range(3):
        angles = np.outer(coords[:, axis], omega)
        start = axis * block
        table[:, start : start + block // 2] = np.sin(angles)
        table[:, start + block // 2 : start + block] = np.cos(angles)
    return table


class Attention(nn.Module):
    """Multi-head self-attention softmax(QKᵀ/√d_k)V.

    Set `capture = True` to keep the last attention probabilities in
    `last_attention` (B, heads, T, T).
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(dropout)
        self.capture = False
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads)
            for t in (self.q(x), self.k(x), self.v(x))
        )
        attn = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        attn = attn.softmax(dim=-1)
        if self.capture:
            self.last_attention = attn.detach()
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.proj_drop(self.proj(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.act(self.fc1(x))))


class Block(nn.Module):
    """Pre-norm transformer block: z' = MSA(LN(z)) + z; z = MLP(LN(z')) + z'."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float, index: int = 0):
        super().__init__()
        self.index = index
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after block {self.index}")
        return x


def gram(z: torch.Tensor) -> torch.Tensor:
    """Token similarity G = z·zᵀ / width, batched over leading dims."""
    return torch.matmul(z, z.transpose(-1, -2)) / z.shape[-1]


def reconstruct(
    y1: torch.Tensor, y2: Optional[torch.Tensor], mode: str
) -> torch.Tensor:
    """Branch difference y₁ − y₂ in cscrl mode, y₁ unchanged in mae mode."""
    if mode == "mae":
        return y1
    if y2 is None or y1.shape != y2.shape:
        raise GeometryError(
            f"branch outputs differ in shape: {tuple(y1.shape)} vs "
            f"{None if y2 is None else tuple(y2.shape)}"
        )
    return y1 - y2


def split_predictions(
    y_all: torch.Tensor, mask: MaskBatch
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(y_vis, y_mask) gathered from full-sequence predictions."""
    return _gather_rows(y_all, mask.visible_idx), _gather_rows(y_all, mask.masked_idx)


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class CSCRL(nn.Module):
    """Encoder, projectors, decoder and classification head.

    Pretraining uses `encode` → `project` → `decode` (per branch) →
    `reconstruct`; fine-tuning uses `classify`, which runs the encoder over
    all tokens and never touches the projectors or decoder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

        self.patch_embed = nn.Linear(cfg.token_len, cfg.encoder_dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(position_encoding(cfg.grid, cfg.encoder_dim)).float(),
            persistent=False,
        )
        self.blocks = nn.ModuleList(
            Block(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.dropout, index=i)
            for i in range(cfg.encoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.encoder_dim)

        self.projector1 = nn.Linear(cfg.encoder_dim, cfg.decoder_dim)
        self.projector2 = (
            nn.Linear(cfg.encoder_dim, cfg.decoder_dim) if cfg.mode == "cscrl" else None
        )
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(position_encoding(cfg.grid, cfg.decoder_dim)).float(),
            persistent=False,
        )
        self.decoder_blocks = nn.ModuleList(
            Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, cfg.dropout, index=i)
            for i in range(cfg.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(cfg.decoder_dim)
        self.decoder_pred = nn.Linear(cfg.decoder_dim, cfg.token_len)

        self.head = nn.Linear(cfg.encoder_dim, cfg.num_classes)

    def initialize_weights(self) -> None:
        self.apply(self._init_weights)
        nn.init.normal_(self.mask_token, std=INIT_STD)
        with torch.no_grad():
            self.head.weight.mul_(self.cfg.head_init_scale)

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def reset_head(self, seed: int, init_scale: float) -> None:
        """Fresh classifier for fine-tuning, scaled by `init_scale`."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            weight = torch.empty_like(self.head.weight)
            nn.init.trunc_normal_(
                weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
            )
            self.head.weight.copy_(weight * init_scale)
            self.head.bias.zero_()

    # encoder

    def patch_embedding(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.cfg.token_len:
            raise GeometryError(
                f"token length {tokens.shape[-1]} != embedding width {self.cfg.token_len}"
            )
        return self.patch_embed(tokens)

    def encode(
        self,
        tokens: torch.Tensor,
        visible_idx: Optional[torch.Tensor] = None,
        return_features: bool = False,
    ):
        """Embed tokens, add positions at their original indices, run the blocks.

        Args:
            tokens: (B, T, L). Either the full sequence (visible_idx None) or
                the visible subset gathered in ascending original order.
            visible_idx: (B, T) original indices of the rows of `tokens`.
            return_features: also return every block output (pre final norm).
        """
        x = self.patch_embedding(tokens)
        if visible_idx is None:
            if x.shape[1] != self.cfg.num_tokens:
                raise GeometryError(
                    f"full sequence needs {self.cfg.num_tokens} tokens, got {x.shape[1]}"
                )
            x = x + self.pos_embed.unsqueeze(0)
        else:
            if visible_idx.shape != x.shape[:2]:
                raise GeometryError(
                    f"visible_idx {tuple(visible_idx.shape)} does not match tokens {tuple(x.shape[:2])}"
                )
            x = x + self.pos_embed[visible_idx]

        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        x = self.norm(x)
        return (x, features) if return_features else x

    def project(self, latent: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        z1 = self.projector1(latent)
        z2 = self.projector2(latent) if self.projector2 is not None else None
        return z1, z2

    # decoder

    def assemble_decoder_input(self, z: torch.Tensor, mask: MaskBatch) -> torch.Tensor:
        """Visible rows at their original indices, mask token elsewhere."""
        if z.shape[-1] != self.cfg.decoder_dim:
            raise GeometryError(f"decoder input width {z.shape[-1]} != {self.cfg.decoder_dim}")
        if mask.num_tokens != self.cfg.num_tokens or mask.visible_idx.shape != z.shape[:2]:
            raise GeometryError("mask partition does not match decoder input")
        batch = z.shape[0]
        full = self.mask_token.expand(batch, self.cfg.num_tokens, -1).clone()
        index = mask.visible_idx.unsqueeze(-1).expand(-1, -1, z.shape[-1])
        return full.scatter(1, index, z)

    def decode(self, z: torch.Tensor, mask: MaskBatch) -> torch.Tensor:
        """Full-sequence pixel predictions (B, N, token_len) for one branch."""
        x = self.assemble_decoder_input(z, mask) + self.decoder_pos_embed.unsqueeze(0)
        for block in self.decoder_blocks:
            x = block(x)
        return self.decoder_pred(self.decoder_norm(x))

    def forward_pretrain(self, tokens: torch.Tensor, mask: MaskBatch) -> Dict[str, torch.Tensor]:
        """One masked-reconstruction pass.

        Returns a dict with `y_all`, `y_mask`, `target` (masked ground truth),
        `g1` and, in cscrl mode, `g2`.
        """
        visible = _gather_rows(tokens, mask.visible_idx)
        latent = self.encode(visible, mask.visible_idx)
        z1, z2 = self.project(latent)

        y1 = self.decode(z1, mask)
        y2 = self.decode(z2, mask) if z2 is not None else None
        y_all = reconstruct(y1, y2, self.cfg.mode)
        _, y_mask = split_predictions(y_all, mask)

        out = {
            "y_all": y_all,
            "y_mask": y_mask,
            "target": _gather_rows(tokens, mask.masked_idx),
            "g1": gram(z1),
        }
        if z2 is not None:
            out["g2"] = gram(z2)
        return out

    # classifier

    def tokens_from_volumes(self, volumes: torch.Tensor) -> torch.Tensor:
        if tuple(volumes.shape[1:4]) != tuple(self.cfg.volume_dims):
            raise GeometryError(
                f"volume dims {tuple(volumes.shape[1:4])} != configured {self.cfg.volume_dims}"
            )
        return patchify_batch(volumes, self.cfg.patch_size)

    def classify(self, volumes: torch.Tensor) -> torch.Tensor:
        """Logits (B, num_classes) from the mean of the final encoder tokens."""
        latent = self.encode(self.tokens_from_volumes(volumes))
        return self.head(latent.mean(dim=1))

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        return self.classify(volumes)

    # parameter groups

    def layer_group_of(self, name: str) -> int:
        """Layer-wise decay group: 0 patch embed, 1..depth blocks, depth+1 the rest."""
        if name.startswith("patch_embed"):
            return 0
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        return self.cfg.encoder_depth + 1

    def encoder_state_dict(self) -> Dict[str, torch.Tensor]:
        return {
            name: tensor
            for name, tensor in self.state_dict().items()
            if name.startswith(ENCODER_PREFIXES)
        }


def build_model(cfg: ModelConfig, seed: int = 0) -> CSCRL:
    """Construct and initialize a model; identical seeds give identical weights."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CSCRL(cfg)
        model.initialize_weights()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def attention_modules(model: CSCRL) -> List[Attention]:
    return [block.attn for block in model.blocks]
