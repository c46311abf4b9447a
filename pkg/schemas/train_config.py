from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class Ablation(str, Enum):
    full = "full"
    no_dis = "no_dis"
    no_idd = "no_idd"
    no_retrieval = "no_retrieval"
    plain = "plain"              # no retrieval and no decomposition

    @property
    def uses_retrieval(self) -> bool:
        return self not in (Ablation.no_retrieval, Ablation.plain)

    @property
    def uses_idd(self) -> bool:
        return self not in (Ablation.no_idd, Ablation.plain)

    @property
    def uses_dis(self) -> bool:
        return self in (Ablation.full, Ablation.no_retrieval)


class PatchConfig(BaseModel):
    """Patch geometry: rows of length patch_len taken every `stride` steps."""
    patch_len: int = Field(default=32, gt=0)
    stride: int = Field(default=32, gt=0)

    @model_validator(mode="after")
    def _stride_within_patch(self):
        if self.stride > self.patch_len:
            raise ValueError(f"stride ({self.stride}) must not exceed patch_len ({self.patch_len})")
        return self


class TrainConfig(BaseModel):
    # Window geometry
    T: int = Field(default=512, gt=0, description="Context length")
    L: int = Field(default=64, gt=0, description="Horizon length")
    patch: PatchConfig = Field(default_factory=PatchConfig)
    window_stride: int = Field(default=1, gt=0, description="Stride between sliced windows")

    # Model
    d: int = Field(default=64, gt=0)
    d_hidden: Optional[int] = Field(default=None, gt=0, description="Encoder hidden width; 2*d when unset")
    K: int = Field(default=5, gt=0, description="Retrieved neighbours per query")
    temperature: float = Field(default=1.0, gt=0, description="Attention temperature over cosine logits")
    dropout: float = Field(default=0.3, ge=0, lt=1)

    # Objective / optimizer
    rho: float = Field(default=0.1, ge=0, description="Weight of the disentanglement loss")
    lr: float = Field(default=3e-4, gt=0)
    steps: int = Field(default=10000, ge=0)
    batch_size: int = Field(default=256, gt=0)
    ablation: Ablation = Field(default=Ablation.full)

    # Run control
    seed: int = Field(default=0, ge=0)
    eval_interval: int = Field(default=500, gt=0)
    checkpoint_interval: int = Field(default=1000, gt=0)
    val_fraction: float = Field(default=0.2, ge=0, lt=1)
    threads: int = Field(default=1, gt=0)
    log_wall_time: bool = Field(default=False)

    @field_validator("ablation", mode="before")
    @classmethod
    def _ablation_name(cls, v):
        if isinstance(v, str) and v not in Ablation.__members__:
            raise ValueError(f"unknown ablation {v!r}; valid options: {', '.join(Ablation.__members__)}")
        return v

    @model_validator(mode="after")
    def _patch_fits_context(self):
        if self.patch.patch_len > self.T:
            raise ValueError(f"patch_len ({self.patch.patch_len}) exceeds context length T ({self.T})")
        if self.d_hidden is None:
            self.d_hidden = 2 * self.d
        return self

    @property
    def effective_rho(self) -> float:
        return self.rho if self.ablation.uses_dis else 0.0
