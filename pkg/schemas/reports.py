from typing import Optional

from pydantic import BaseModel, Field


class LossBreakdown(BaseModel):
    total: float
    pred: float
    dis: float


class ComponentMetrics(BaseModel):
    mse: float = Field(ge=0)
    mae: float = Field(ge=0)


class MetricReport(BaseModel):
    mse: float = Field(ge=0)
    mae: float = Field(ge=0)
    per_component: dict[str, ComponentMetrics] = Field(default_factory=dict)
    n_windows: int = Field(ge=0)
    n_points: int = Field(default=0, ge=0)


class VarianceReport(BaseModel):
    K: int
    omega: list[float]
    sigma2: float
    bound: float
    empirical_var: float
    empirical_mean_err: float
    n_trials: int
    noise: str = "gaussian"
    var_tolerance: float
    mean_tolerance: float
    var_pass: bool
    mean_pass: bool

    @property
    def passed(self) -> bool:
        return self.var_pass and self.mean_pass


class DistributionSummary(BaseModel):
    mean: float
    std: float
    min: float
    max: float
    quantiles: dict[str, float]


class ProbeReport(BaseModel):
    n_windows: int
    abs_cos: DistributionSummary
    gamma: DistributionSummary
    mean_abs_inner: float


class Histogram(BaseModel):
    edges: list[float]
    counts: dict[str, list[int]]


class StudyArm(BaseModel):
    ablation: str
    seed: int
    report: MetricReport
    smooth: Optional[MetricReport] = None
    fluctuating: Optional[MetricReport] = None


class RagBiasReport(BaseModel):
    baseline: list[StudyArm]
    rag: list[StudyArm]
    deltas: list[dict[str, float]]
    histograms: dict[str, Histogram]
    seasonal_improved_seeds: int
    trend_degraded_seeds: int
    plot_csv: Optional[str] = None


class SweepPoint(BaseModel):
    axis: str            # "K" or "rho"
    K: int
    rho: float
    seed: int
    report: MetricReport


class SweepReport(BaseModel):
    K_grid: list[int]
    rho_grid: list[float]
    points: list[SweepPoint]


class AblationComparison(BaseModel):
    """How often `better` scored no worse than `worse` on one channel group."""
    better: str
    worse: str
    group: str            # "all", "smooth" or "fluctuating"
    wins: int = Field(ge=0)
    n_seeds: int = Field(gt=0)
    required_wins: int = Field(gt=0)
    holds: bool


class AblationReport(BaseModel):
    arms: dict[str, list[StudyArm]]
    mean_mse: dict[str, float]
    mean_fluctuating_mse: dict[str, Optional[float]]
    comparisons: list[AblationComparison]
