"""Does retrieval help fluctuating series and hurt smooth ones?

Two arms (by default a retrieval-free backbone and the same backbone with
naive retrieval, no decomposition) are trained on the same data and seeds.
Errors are split into trend and seasonal parts of the horizon, pooled into
fixed-bin histograms, and the channels are grouped by how much of their
variance is seasonal.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from analysis.metrics import (COMPONENTS, WindowForecast, component_errors, component_split,
                              fluctuation_score, forecast_windows, score)
from analysis.pipeline import fit, prepare_windows
from core.data import SeriesChannel
from core.errors import DomainError
from schemas.reports import Histogram, RagBiasReport, StudyArm
from schemas.train_config import Ablation, TrainConfig
from utils.write_guard import atomic_write

logger = logging.getLogger(__name__)

N_BINS = 50
PLOT_COLUMNS = ["step", "series_id", "t", "y", "y_hat", "y_inv", "y_dyn", "component"]


def split_by_fluctuation(channels: Sequence[SeriesChannel], period: int) -> tuple[set[str], set[str]]:
    """Channels at or below the median fluctuation score are 'smooth', the rest 'fluctuating'."""
    scores = {ch.name: fluctuation_score(ch.values, period) for ch in channels}
    median = float(np.median(list(scores.values())))
    smooth = {name for name, s in scores.items() if s <= median}
    return smooth, set(scores) - smooth


def histogram(samples: dict[str, np.ndarray], bins: int = N_BINS) -> Histogram:
    """Shared bin edges over the pooled range so arms are directly comparable."""
    pooled = np.concatenate(list(samples.values()))
    lo, hi = (float(pooled.min()), float(pooled.max())) if pooled.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {arm: np.histogram(v, bins=edges)[0].astype(int).tolist() for arm, v in samples.items()}
    return Histogram(edges=edges.tolist(), counts=counts)


def _abs_errors(forecasts: Sequence[WindowForecast], period: int) -> dict[str, np.ndarray]:
    out = {"total": np.abs(np.concatenate([f.y_hat - f.y for f in forecasts]))}
    for c, errs in component_errors(forecasts, period).items():
        out[c] = np.abs(np.concatenate(errs))
    return out


def _plot_rows(arm: str, forecasts: Sequence[WindowForecast], period: int) -> list[dict]:
    rows = []
    for f in forecasts:
        name, start = f.source_id
        series_id = f"{arm}/{name}@{start}"
        T = f.context.shape[0]
        truth = component_split(f.context, f.y, period)
        pred = component_split(f.context, f.y_hat, period)
        parts = {"total": (f.y, f.y_hat)} | {c: (truth[c], pred[c]) for c in COMPONENTS}
        for component, (y, y_hat) in parts.items():
            for step in range(y.shape[0]):
                rows.append({
                    "step": step, "series_id": series_id, "t": start + T + step,
                    "y": y[step], "y_hat": y_hat[step], "y_inv": f.y_inv[step], "y_dyn": f.y_dyn[step],
                    "component": component,
                })
    return rows


def rag_bias_study(
    channels: Sequence[SeriesChannel],
    cfg: TrainConfig,
    period: int,
    seeds: Sequence[int] = (0, 1, 2),
    baseline_ablation: Ablation | str = Ablation.plain,
    rag_ablation: Ablation | str = Ablation.no_idd,
    plot_csv: Optional[str | Path] = None,
    plot_windows: int = 4,
) -> RagBiasReport:
    if not seeds:
        raise DomainError("rag_bias_study needs at least one seed")
    arms = {"baseline": Ablation(baseline_ablation), "rag": Ablation(rag_ablation)}
    if cfg.T + cfg.L < 2 * period:
        raise DomainError(f"T+L={cfg.T + cfg.L} is too short to split components at period {period}")
    train_w, val_w = prepare_windows(channels, cfg)
    if not val_w:
        raise DomainError("no held-out windows; increase val_fraction or series length")
    smooth, fluctuating = split_by_fluctuation(channels, period)
    logger.info(f"[ANALYSIS] rag-bias {arms['baseline'].value} vs {arms['rag'].value} seeds={list(seeds)} "
                f"smooth={len(smooth)} fluctuating={len(fluctuating)}")

    results: dict[str, list[StudyArm]] = {"baseline": [], "rag": []}
    errors: dict[str, dict[str, list[np.ndarray]]] = {c: {"baseline": [], "rag": []} for c in ("total",) + COMPONENTS}
    plot: list[dict] = []

    for seed in seeds:
        for arm, ablation in arms.items():
            arm_cfg = cfg.model_copy(update={"ablation": ablation, "seed": seed})
            params, kb = fit(arm_cfg, train_w, val_w)
            forecasts = forecast_windows(params, kb, val_w, arm_cfg, threads=cfg.threads)

            by_group = {
                "smooth": [f for f in forecasts if f.source_id[0] in smooth],
                "fluctuating": [f for f in forecasts if f.source_id[0] in fluctuating],
            }
            results[arm].append(StudyArm(
                ablation=ablation.value, seed=seed,
                report=score(forecasts, period),
                smooth=score(by_group["smooth"], period) if by_group["smooth"] else None,
                fluctuating=score(by_group["fluctuating"], period) if by_group["fluctuating"] else None,
            ))
            for c, e in _abs_errors(forecasts, period).items():
                errors[c][arm].append(e)
            if seed == seeds[0] and plot_csv is not None:
                plot.extend(_plot_rows(arm, forecasts[:plot_windows], period))

    deltas = []
    for b, r in zip(results["baseline"], results["rag"]):
        delta = {"seed": float(b.seed), "mse": r.report.mse - b.report.mse, "mae": r.report.mae - b.report.mae}
        for c in COMPONENTS:
            delta[f"{c}_mse"] = r.report.per_component[c].mse - b.report.per_component[c].mse
            delta[f"{c}_mae"] = r.report.per_component[c].mae - b.report.per_component[c].mae
        deltas.append(delta)

    histograms = {
        c: histogram({arm: np.concatenate(v) for arm, v in per_arm.items()})
        for c, per_arm in errors.items()
    }

    plot_path = None
    if plot_csv is not None:
        frame = pd.DataFrame(plot, columns=PLOT_COLUMNS)
        atomic_write(plot_csv, frame.to_csv(index=False, float_format="%.17g"))
        plot_path = str(plot_csv)

    report = RagBiasReport(
        baseline=results["baseline"],
        rag=results["rag"],
        deltas=deltas,
        histograms=histograms,
        seasonal_improved_seeds=sum(d["seasonal_mse"] <= 0 for d in deltas),
        trend_degraded_seeds=sum(d["trend_mse"] > 0 for d in deltas),
        plot_csv=plot_path,
    )
    logger.info(f"[ANALYSIS] rag-bias seasonal improved in {report.seasonal_improved_seeds}/{len(deltas)} seeds, "
                f"trend degraded in {report.trend_degraded_seeds}/{len(deltas)}")
    return report
