# input:  [FootprintSample pixels, PatchPlan/MaskPlan from the sampler, ALiBi and sinusoidal encodings from posenc, PI/transpose resizing from numerics, ModelConfig from schemas]
# output: [FlexGeoModel (per-band patch projection with group pooling, ALiBi encoder, mask-token decoder, resized reconstruction and map heads, image heads), TokenSequence/ForwardOutput types, and the AdamW + warmup/cosine optimizer factory]
# pos:    [Desk-scale encoder/decoder consumed by the loss assembly, training harness, checkpoints, and gradient suite]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Optional, Sequence

import torch
from einops import rearrange, repeat
from torch import nn

from errors import FlexGeoError
from geometry import BandRegistry, FootprintSample, TokenGrid, grid_for_group
from numerics import build_resize_matrix, patchify, pi_resize_embed_weights, resize_decoder_weights
from posenc import AlibiBias, build_alibi_bias, gsd_sinusoidal
from sampler import MaskPlan, PatchPlan
from schemas import ModelConfig
from targets import ERA5_COUNT, MAP_TASK_CATALOGUE, ORBIT_CLASSES

logger = logging.getLogger(__name__)

IMAGE_HEAD_WIDTHS = {
    "era5": ERA5_COUNT,
    "coords": 3,
    "month": 2,
    "incidence": 1,
    "orbit": ORBIT_CLASSES,
}


class ModelError(FlexGeoError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    """Tokens of every grid in plan order; token_index maps rows of `tokens` into the full sequence."""

    tokens: torch.Tensor  # (batch, n, dim)
    grids: tuple[TokenGrid, ...]
    band_counts: tuple[int, ...]
    token_index: torch.Tensor  # (n,) long

    @property
    def total_tokens(self) -> int:
        return sum(grid.token_count for grid in self.grids)

    def group_slices(self) -> dict[int, slice]:
        slices: dict[int, slice] = {}
        start = 0
        for grid in self.grids:
            slices[grid.group_id] = slice(start, start + grid.token_count)
            start += grid.token_count
        return slices

    def replace_tokens(self, tokens: torch.Tensor, token_index: Optional[torch.Tensor] = None) -> "TokenSequence":
        return TokenSequence(
            tokens=tokens,
            grids=self.grids,
            band_counts=self.band_counts,
            token_index=self.token_index if token_index is None else token_index,
        )


@dataclass
class ForwardOutput:
    embedded: TokenSequence
    encoded: TokenSequence
    decoded: torch.Tensor  # (batch, total_tokens, decoder_dim)
    bias: AlibiBias
    image_predictions: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def grids(self) -> tuple[TokenGrid, ...]:
        return self.embedded.grids

    def decoded_for(self, group_id: int) -> torch.Tensor:
        return self.decoded[:, self.embedded.group_slices()[group_id]]


def _truncated_normal(shape: Sequence[int], std: float) -> nn.Parameter:
    weight = torch.empty(*shape)
    nn.init.trunc_normal_(weight, std=std, a=-2.0 * std, b=2.0 * std)
    return nn.Parameter(weight)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class BiasedAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        if dim % num_heads != 0:
            raise ModelError("ATTENTION_DIM_INVALID", f"dim {dim} is not divisible by {num_heads} heads.")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            logits = logits + bias.to(dtype=logits.dtype)
        attn = logits.softmax(dim=-1)
        return self.proj(rearrange(attn @ v, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block; the attention bias is added to the logits of every head."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = BiasedAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)))

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.embed_dim) if cfg.layers > 0 else nn.Identity()

    def forward(self, tokens: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens, bias)
        return self.norm(tokens)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = _truncated_normal((cfg.decoder_dim,), cfg.init_std)
        self.blocks = nn.ModuleList(
            Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.decoder_dim)

    def forward(self, visible: torch.Tensor, visible_index: torch.Tensor, positional: torch.Tensor) -> torch.Tensor:
        batch = visible.shape[0]
        total = positional.shape[0]
        full = repeat(self.mask_token, "d -> b n d", b=batch, n=total)
        if visible_index.numel():
            full = full.index_copy(1, visible_index, self.embed(visible))
        x = full + positional.to(dtype=full.dtype)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class FlexGeoModel(nn.Module):
    def __init__(self, cfg: ModelConfig, registry: BandRegistry) -> None:
        super().__init__()
        self.cfg = cfg
        self.registry = registry
        canonical_pixels = cfg.canonical_patch * cfg.canonical_patch

        # One projection per band, stored at the canonical patch size.
        self.band_weights = nn.ParameterDict(
            {
                str(group.group_id): _truncated_normal((group.band_count, cfg.embed_dim, canonical_pixels), cfg.init_std)
                for group in registry
            }
        )
        self.group_bias = nn.ParameterDict(
            {str(group.group_id): nn.Parameter(torch.zeros(cfg.embed_dim)) for group in registry}
        )
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

        self.recon_weights = nn.ParameterDict(
            {
                str(group.group_id): _truncated_normal(
                    (group.band_count, cfg.decoder_dim, canonical_pixels), cfg.init_std
                )
                for group in registry
            }
        )
        self.recon_bias = nn.ParameterDict(
            {str(group.group_id): nn.Parameter(torch.zeros(group.band_count, canonical_pixels)) for group in registry}
        )
        self.map_weights = nn.ParameterDict(
            {
                name: _truncated_normal((task.channels, cfg.decoder_dim, canonical_pixels), cfg.init_std)
                for name, task in MAP_TASK_CATALOGUE.items()
            }
        )
        self.map_bias = nn.ParameterDict(
            {
                name: nn.Parameter(torch.zeros(task.channels, canonical_pixels))
                for name, task in MAP_TASK_CATALOGUE.items()
            }
        )
        self.image_heads = nn.ModuleDict(
            {name: nn.Linear(cfg.embed_dim, width) for name, width in IMAGE_HEAD_WIDTHS.items()}
        )
        self.apply(self._init_weights)

    def _init_weights(self, module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=self.cfg.init_std, a=-2.0 * self.cfg.init_std, b=2.0 * self.cfg.init_std)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.group_bias[str(self.registry.groups[0].group_id)].dtype

    def token_grids(self, sample: FootprintSample, plan: PatchPlan) -> tuple[TokenGrid, ...]:
        grids = []
        for entry in plan.groups:
            grid = grid_for_group(
                entry.group_id,
                sample.ground_cover_m,
                entry.patch_px,
                sample.gsd_m.get(entry.group_id, entry.gsd_m),
                sample.origin_m,
            )
            grid.require_model_patch()
            grids.append(grid)
        return tuple(grids)

    def embed_group(self, image: torch.Tensor, group_id: int, patch_px: int) -> torch.Tensor:
        """(batch, bands, H, W) -> (batch, tokens, embed_dim): per-band projection then band average."""
        key = str(group_id)
        if key not in self.band_weights:
            raise ModelError("BAND_WEIGHTS_MISSING", f"No patch projection weights for band group {group_id}.")
        weights = self.band_weights[key]
        if image.shape[1] != weights.shape[0]:
            raise ModelError(
                "BAND_COUNT_MISMATCH",
                f"Group {group_id} has {weights.shape[0]} band projections but the sample has {image.shape[1]} bands.",
            )
        plan = build_resize_matrix(self.cfg.canonical_patch, patch_px)
        resized = pi_resize_embed_weights(weights, plan)
        patches = patchify(image.to(dtype=weights.dtype), patch_px)
        per_band = torch.einsum("bncp,cdp->bncd", patches, resized)
        return per_band.mean(dim=2) + self.group_bias[key]

    def embed_bands(self, sample: FootprintSample, plan: PatchPlan) -> TokenSequence:
        grids = self.token_grids(sample, plan)
        chunks = []
        band_counts = []
        for grid in grids:
            if grid.group_id not in sample.images:
                raise ModelError("GROUP_PIXELS_MISSING", f"Plan names group {grid.group_id} but the sample has no pixels.")
            image = sample.images[grid.group_id]
            chunks.append(self.embed_group(image, grid.group_id, grid.patch_px))
            band_counts.append(int(image.shape[1]))
        tokens = torch.cat(chunks, dim=1)
        return TokenSequence(
            tokens=tokens,
            grids=grids,
            band_counts=tuple(band_counts),
            token_index=torch.arange(tokens.shape[1]),
        )

    def visible_index(self, seq: TokenSequence, mask: Optional[MaskPlan]) -> torch.Tensor:
        if mask is None:
            return torch.arange(seq.total_tokens)
        flags = []
        for grid in seq.grids:
            group_mask = torch.as_tensor(mask.masks[grid.group_id], dtype=torch.bool)
            if group_mask.numel() != grid.token_count:
                raise ModelError(
                    "MASK_SIZE_MISMATCH",
                    f"Mask for group {grid.group_id} covers {group_mask.numel()} tokens, grid has {grid.token_count}.",
                )
            flags.append(~group_mask)
        return torch.nonzero(torch.cat(flags), as_tuple=False).reshape(-1)

    def encode(self, seq: TokenSequence, bias: AlibiBias, mask: Optional[MaskPlan] = None) -> TokenSequence:
        visible = self.visible_index(seq, mask)
        tokens = seq.tokens.index_select(1, visible)
        encoded = self.encoder(tokens, bias.select(visible))
        return seq.replace_tokens(encoded, token_index=visible)

    def positional_encoding(self, grids: Sequence[TokenGrid]) -> torch.Tensor:
        # g is the reconstructed group's GSD in meters.
        per_axis = self.cfg.decoder_dim // 2
        return torch.cat(
            [gsd_sinusoidal(grid, grid.gsd_m, per_axis) for grid in grids],
            dim=0,
        )

    def decode(self, encoded: TokenSequence) -> torch.Tensor:
        return self.decoder(encoded.tokens, encoded.token_index, self.positional_encoding(encoded.grids))

    def project_patches(self, z: torch.Tensor, group_id: int, patch_px: int) -> torch.Tensor:
        """(batch, n, decoder_dim) -> (batch, n, bands, P*P) via the Bᵀ-resized transposed projection."""
        key = str(group_id)
        plan = build_resize_matrix(self.cfg.canonical_patch, patch_px)
        weights = resize_decoder_weights(self.recon_weights[key], plan)
        bias = resize_decoder_weights(self.recon_bias[key], plan)
        return torch.einsum("bnd,cdp->bncp", z, weights) + bias

    def project_map(self, z: torch.Tensor, task_name: str, side_px: int) -> torch.Tensor:
        plan = build_resize_matrix(self.cfg.canonical_patch, side_px)
        weights = resize_decoder_weights(self.map_weights[task_name], plan)
        bias = resize_decoder_weights(self.map_bias[task_name], plan)
        return torch.einsum("bnd,kdp->bnkp", z, weights) + bias

    def pool(self, encoded: TokenSequence) -> torch.Tensor:
        if encoded.tokens.shape[1] == 0:
            logger.debug("No visible tokens to pool; image heads see zeros")
            return encoded.tokens.new_zeros((encoded.tokens.shape[0], self.cfg.embed_dim))
        return encoded.tokens.mean(dim=1)

    def predict_image(self, encoded: TokenSequence) -> dict[str, torch.Tensor]:
        pooled = self.pool(encoded)
        return {name: head(pooled) for name, head in self.image_heads.items()}

    def forward(self, sample: FootprintSample, plan: PatchPlan, mask: Optional[MaskPlan] = None) -> ForwardOutput:
        embedded = self.embed_bands(sample, plan)
        bias = build_alibi_bias(embedded.grids, self.cfg.heads)
        encoded = self.encode(embedded, bias, mask)
        decoded = self.decode(encoded)
        return ForwardOutput(
            embedded=embedded,
            encoded=encoded,
            decoded=decoded,
            bias=bias,
            image_predictions=self.predict_image(encoded),
        )


def build_optimizer(
    model: nn.Module,
    learning_rate: float,
    weight_decay: float,
    warmup_steps: int,
    total_steps: int,
    min_lr_ratio: float = 0.0,
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    """AdamW with linear warmup then cosine decay; norms, biases and the mask token skip weight decay."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or name.endswith("bias") or "mask_token" in name or name.startswith("recon_bias") or name.startswith("map_bias"):
            no_decay.append(param)
        else:
            decay.append(param)
    optimizer = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=learning_rate,
    )

    def schedule(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(1, total_steps - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / span)
        return min_lr_ratio + (1.0 - min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return optimizer, torch.optim.lr_scheduler.LambdaLR(optimizer, schedule)
