"""Component ablation: train each variant on the same windows and seeds and compare held-out MSE.

The expected ordering is that the full model beats the variant without the
invariant/dynamic split, and that retrieval without the split still beats no
retrieval on the fluctuating channels. Each ordering is counted per seed and
holds when it wins in at least four of every five seeds.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from analysis.metrics import forecast_windows, score
from analysis.pipeline import fit, prepare_windows
from analysis.rag_bias import split_by_fluctuation
from core.data import SeriesChannel
from core.errors import DomainError
from schemas.reports import AblationComparison, AblationReport, MetricReport, StudyArm
from schemas.train_config import Ablation, TrainConfig

logger = logging.getLogger(__name__)

ABLATION_ARMS = (Ablation.full, Ablation.no_dis, Ablation.no_idd, Ablation.no_retrieval)
# (better, worse, channel group)
ORDERINGS = (
    (Ablation.full, Ablation.no_idd, "all"),
    (Ablation.no_idd, Ablation.no_retrieval, "fluctuating"),
)
WIN_FRACTION = 0.8


def required_wins(n_seeds: int) -> int:
    return max(1, math.ceil(WIN_FRACTION * n_seeds - 1e-9))


def _group(arm: StudyArm, group: str) -> Optional[MetricReport]:
    return {"all": arm.report, "smooth": arm.smooth, "fluctuating": arm.fluctuating}[group]


def compare(results: dict[str, list[StudyArm]], better: Ablation | str, worse: Ablation | str,
            group: str = "all") -> AblationComparison:
    """Seeds where `better` has MSE no larger than `worse`; a seed with an empty group is a loss."""
    better, worse = Ablation(better).value, Ablation(worse).value
    if group not in ("all", "smooth", "fluctuating"):
        raise DomainError(f"unknown channel group {group!r}")
    wins = 0
    for b, w in zip(results[better], results[worse]):
        rb, rw = _group(b, group), _group(w, group)
        if rb is not None and rw is not None and rb.mse <= rw.mse:
            wins += 1
    n = len(results[better])
    need = required_wins(n)
    return AblationComparison(better=better, worse=worse, group=group, wins=wins,
                              n_seeds=n, required_wins=need, holds=wins >= need)


def ablation_study(
    channels: Sequence[SeriesChannel],
    cfg: TrainConfig,
    period: int,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    arms: Sequence[Ablation | str] = ABLATION_ARMS,
    orderings: Sequence[tuple[Ablation | str, Ablation | str, str]] = ORDERINGS,
) -> AblationReport:
    if not seeds:
        raise DomainError("ablation_study needs at least one seed")
    arms = list(dict.fromkeys(Ablation(a) for a in arms))
    if not arms:
        raise DomainError("ablation_study needs at least one arm")
    if cfg.T + cfg.L < 2 * period:
        raise DomainError(f"T+L={cfg.T + cfg.L} is too short to split components at period {period}")
    train_w, val_w = prepare_windows(channels, cfg)
    if not val_w:
        raise DomainError("no held-out windows; increase val_fraction or series length")
    smooth, fluctuating = split_by_fluctuation(channels, period)
    logger.info(f"[ANALYSIS] ablation arms={[a.value for a in arms]} seeds={list(seeds)} "
                f"train={len(train_w)} val={len(val_w)}")

    results: dict[str, list[StudyArm]] = {a.value: [] for a in arms}
    for seed in seeds:
        for ablation in arms:
            arm_cfg = cfg.model_copy(update={"ablation": ablation, "seed": seed})
            params, kb = fit(arm_cfg, train_w, val_w)
            forecasts = forecast_windows(params, kb, val_w, arm_cfg, threads=cfg.threads)
            smooth_f = [f for f in forecasts if f.source_id[0] in smooth]
            fluct_f = [f for f in forecasts if f.source_id[0] in fluctuating]
            arm = StudyArm(
                ablation=ablation.value, seed=seed,
                report=score(forecasts, period),
                smooth=score(smooth_f, period) if smooth_f else None,
                fluctuating=score(fluct_f, period) if fluct_f else None,
            )
            results[ablation.value].append(arm)
            logger.info(f"[ANALYSIS] ablation {ablation.value} seed={seed} mse={arm.report.mse:.6g}")

    mean_fluct = {}
    for name, runs in results.items():
        vals = [r.fluctuating.mse for r in runs if r.fluctuating is not None]
        mean_fluct[name] = float(np.mean(vals)) if vals else None

    present = {a.value for a in arms}
    comparisons = [
        compare(results, better, worse, group)
        for better, worse, group in orderings
        if Ablation(better).value in present and Ablation(worse).value in present
    ]
    report = AblationReport(
        arms=results,
        mean_mse={name: float(np.mean([r.report.mse for r in runs])) for name, runs in results.items()},
        mean_fluctuating_mse=mean_fluct,
        comparisons=comparisons,
    )
    for c in comparisons:
        logger.info(f"[ANALYSIS] ablation {c.better} <= {c.worse} on {c.group}: "
                    f"{c.wins}/{c.n_seeds} seeds ({'holds' if c.holds else 'fails'})")
    return report
