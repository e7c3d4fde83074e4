# input:  [Pydantic BaseModel/Field validators and typing literals]
# output: [Validated configuration contracts: BudgetConfig, ModelConfig with named size presets carrying base learning rates and warmup steps, LossWeights with default term weights, TrainConfig, and RunConfig]
# pos:    [Schema layer between plain-text run configuration files and the sampler, model, losses, and training harness]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BudgetConfig(StrictModel):
    max_tokens: int = Field(default=1296, gt=0)
    patch_min: int = Field(default=4, gt=0)
    patch_max: int = Field(default=32, gt=0)
    ground_cover_min_m: float = Field(default=960.0, gt=0)
    ground_cover_max_m: float = Field(default=46080.0, gt=0)
    grid_min: int = Field(default=2, gt=0)
    grid_max: int = Field(default=32, gt=0)

    @model_validator(mode="after")
    def validate_ranges(self) -> "BudgetConfig":
        if self.patch_min > self.patch_max:
            raise ValueError("patch_min must not exceed patch_max.")
        if self.ground_cover_min_m > self.ground_cover_max_m:
            raise ValueError("ground_cover_min_m must not exceed ground_cover_max_m.")
        if self.grid_min > self.grid_max:
            raise ValueError("grid_min must not exceed grid_max.")
        return self


class ModelConfig(StrictModel):
    layers: int = Field(default=4, ge=0)
    embed_dim: int = Field(default=96, gt=0)
    heads: int = Field(default=4, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0)
    decoder_layers: int = Field(default=2, ge=0)
    decoder_dim: int = Field(default=64, gt=0)
    decoder_heads: int = Field(default=4, gt=0)
    canonical_patch: int = Field(default=16, ge=4, le=32)
    init_std: float = Field(default=0.02, gt=0)

    @model_validator(mode="after")
    def validate_heads(self) -> "ModelConfig":
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads.")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError("decoder_dim must be divisible by decoder_heads.")
        if self.decoder_dim % 4 != 0:
            raise ValueError("decoder_dim must be divisible by 4 for the 2D sinusoidal encoding.")
        return self


class ModelPreset(StrictModel):
    model: ModelConfig
    base_lr: float
    warmup_steps: int


MODEL_PRESETS: dict[str, ModelPreset] = {
    # desk: 1e-3 at the default batch of 4.
    "desk": ModelPreset(model=ModelConfig(), base_lr=6.4e-2, warmup_steps=10),
    "tiny": ModelPreset(
        model=ModelConfig(layers=12, embed_dim=192, heads=3, decoder_layers=2, decoder_dim=128, decoder_heads=4),
        base_lr=4e-4,
        warmup_steps=10,
    ),
    "small": ModelPreset(
        model=ModelConfig(layers=12, embed_dim=384, heads=6, decoder_layers=4, decoder_dim=256, decoder_heads=8),
        base_lr=4e-4,
        warmup_steps=10,
    ),
    "base": ModelPreset(
        model=ModelConfig(layers=12, embed_dim=768, heads=12, decoder_layers=4, decoder_dim=512, decoder_heads=8),
        base_lr=3e-4,
        warmup_steps=20,
    ),
    "large": ModelPreset(
        model=ModelConfig(layers=24, embed_dim=1024, heads=16, decoder_layers=8, decoder_dim=512, decoder_heads=16),
        base_lr=3e-4,
        warmup_steps=40,
    ),
}


def model_presets() -> dict[str, ModelPreset]:
    return dict(MODEL_PRESETS)


def scaled_learning_rate(base_lr: float, batch_size: int, num_devices: int = 1) -> float:
    return base_lr * (batch_size * num_devices) / 256.0


MAP_TASKS = ("wc", "gc", "mcd", "dem", "scl")


class LossWeights(StrictModel):
    reconstruction: float = Field(default=1.5, ge=0)
    contrastive: float = Field(default=0.1, ge=0)
    map_wc: float = Field(default=0.1, ge=0)
    map_gc: float = Field(default=0.1, ge=0)
    map_mcd: float = Field(default=0.1, ge=0)
    map_dem: float = Field(default=0.1, ge=0)
    map_scl: float = Field(default=0.05, ge=0)
    era5: float = Field(default=0.1, ge=0)
    month: float = Field(default=0.1, ge=0)
    coords: float = Field(default=0.1, ge=0)
    incidence: float = Field(default=0.1, ge=0)
    orbit: float = Field(default=0.1, ge=0)
    fft: float = Field(default=0.01, ge=0)

    def for_term(self, term: str) -> float:
        return float(getattr(self, term))

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{name: value * factor for name, value in self.model_dump().items()})


class TrainConfig(StrictModel):
    steps: int = Field(default=200, gt=0)
    batch_size: int = Field(default=4, gt=0)
    base_lr: Optional[float] = Field(default=None, gt=0)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    min_lr_ratio: float = Field(default=0.0, ge=0, le=1)
    mask_ratio: float = Field(default=0.75, ge=0, le=1)
    temperature: float = Field(default=0.1, gt=0)
    partitions: int = Field(default=4, ge=2)
    virtual_devices: int = Field(default=2, ge=1)
    ground_cover_min_m: float = Field(default=960.0, gt=0)
    ground_cover_max_m: float = Field(default=1920.0, gt=0)
    group_ids: tuple[int, ...] = (1, 2, 4, 6)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def validate_train(self) -> "TrainConfig":
        if self.ground_cover_min_m > self.ground_cover_max_m:
            raise ValueError("ground_cover_min_m must not exceed ground_cover_max_m.")
        if self.virtual_devices > self.batch_size:
            raise ValueError("virtual_devices must not exceed batch_size.")
        if not self.group_ids:
            raise ValueError("group_ids must name at least one band group.")
        return self


class RunConfig(StrictModel):
    seed: int = 0
    threads: int = Field(default=1, gt=0)
    out_dir: str = "runs"
    model_preset: str = "desk"
    registry_path: Optional[str] = None
    model: ModelConfig = ModelConfig()
    budget: BudgetConfig = BudgetConfig()
    loss_weights: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def validate_preset(self) -> "RunConfig":
        if self.model_preset not in MODEL_PRESETS:
            raise ValueError(f"Unknown model_preset '{self.model_preset}'.")
        return self
