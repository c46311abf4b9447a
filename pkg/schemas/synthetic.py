from pydantic import BaseModel, Field


class SyntheticSpec(BaseModel):
    """Generator for channels built from a few shared trend+sinusoid mechanisms."""
    n_mechanisms: int = Field(default=3, gt=0, description="Shared latent generators")
    trend_amp: float = Field(default=1.0, ge=0, description="Total trend rise/fall over the series")
    seasonal_amp: float = Field(default=1.0, ge=0)
    noise_std: float = Field(default=0.1, ge=0)
    season_period: int = Field(default=24, ge=2)
    dynamic_jitter: float = Field(default=0.3, ge=0, description="Per-channel phase/amplitude perturbation scale")
    seed: int = Field(default=0, ge=0)

    n_channels: int = Field(default=12, gt=0)
    length: int = Field(default=1024, gt=0)
