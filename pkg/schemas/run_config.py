from typing import Optional

from pydantic import BaseModel, Field, model_validator

from schemas.synthetic import SyntheticSpec
from schemas.train_config import Ablation, TrainConfig


class StudyConfig(BaseModel):
    """Arms and seeds of the retrieval-bias and ablation studies."""
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    baseline_ablation: Ablation = Field(default=Ablation.plain)
    rag_ablation: Ablation = Field(default=Ablation.no_idd)
    plot_windows: int = Field(default=4, ge=0)
    ablation_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    ablation_arms: list[Ablation] = Field(
        default_factory=lambda: [Ablation.full, Ablation.no_dis, Ablation.no_idd, Ablation.no_retrieval],
        min_length=1,
    )


class RunConfig(BaseModel):
    profile: str
    train: TrainConfig
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    period: Optional[int] = Field(default=None, ge=2, description="Seasonal period for the trend/seasonal split")
    study: StudyConfig = Field(default_factory=StudyConfig)

    @model_validator(mode="after")
    def _default_period(self):
        if self.period is None:
            self.period = self.synthetic.season_period
        return self
