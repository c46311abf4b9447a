"""Forecast scoring in original units, with an optional trend / seasonal split."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.data import Window, denormalize, denormalize_window, normalize_window
from core.errors import DomainError
from core.model import ForecastOutput, ModelParams, forward
from core.numerics import Tensor
from core.thread_manager import ThreadManager
from retrieval.knowledge_base import KnowledgeBase
from schemas.reports import ComponentMetrics, MetricReport
from schemas.train_config import TrainConfig
from training.trainer import check_kb_compatible

logger = logging.getLogger(__name__)

COMPONENTS = ("seasonal", "trend")


@dataclass
class WindowForecast:
    """One window's forecast, denormalized back to the units of the input series."""
    source_id: tuple[str, int]
    context: Tensor
    y: Tensor
    y_hat: Tensor
    y_inv: Tensor
    y_dyn: Tensor
    output: Optional[ForecastOutput] = None


def decompose_series(y: Tensor, period: int) -> tuple[Tensor, Tensor]:
    """
    Trend is the centered moving average over `period` points, with the window
    clipped at both ends; seasonal is the remainder, and the trend is then
    re-derived as y - seasonal.

    trend[i] + seasonal[i] == y[i] holds bit-exactly wherever the moving average
    at i is no larger in magnitude than y[i], and wherever y[i] - trend[i] is
    representable (e.g. inputs on a common dyadic grid). Where y[i] is small
    against a much larger local average and carries bits below half an ulp of
    the trend, no pair of doubles near the average sums to y[i]; there the
    reconstruction is off by at most one ulp of the trend.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if period < 2:
        raise DomainError(f"period must be >= 2, got {period}")
    if n < 2 * period:
        raise DomainError(f"series of length {n} is too short for period {period} (needs {2 * period})")

    csum = np.concatenate([[0.0], np.cumsum(y)])
    start = np.arange(n) - period // 2
    lo = np.clip(start, 0, n)
    hi = np.clip(start + period, 0, n)
    trend = (csum[hi] - csum[lo]) / (hi - lo)
    seasonal = y - trend
    trend = y - seasonal
    return trend, seasonal


def fluctuation_score(y: Tensor, period: int) -> float:
    """Share of the series' variance carried by its seasonal component, in [0, 1]."""
    trend, seasonal = decompose_series(y, period)
    v_s, v_t = float(np.var(seasonal)), float(np.var(trend))
    return v_s / (v_s + v_t) if v_s + v_t > 0 else 0.0


def component_split(context: Tensor, horizon: Tensor, period: int) -> dict[str, Tensor]:
    """Decompose context+horizon together and keep the horizon positions."""
    trend, seasonal = decompose_series(np.concatenate([context, horizon]), period)
    T = context.shape[0]
    return {"trend": trend[T:], "seasonal": seasonal[T:]}


# ---------- prediction ----------
def horizon_leaks(kb: KnowledgeBase, windows: Sequence[Window]) -> int:
    """Windows for which the KB holds another entry of the same channel whose horizon overlaps theirs."""
    grouped: dict[str, list[int]] = {}
    for s in kb.sources:
        if s is not None:
            grouped.setdefault(s[0], []).append(s[1])
    starts = {name: np.asarray(v) for name, v in grouped.items()}
    leaks = 0
    for w in windows:
        name, start = w.source_id
        near = starts.get(name)
        if near is not None and np.any((near != start) & (np.abs(near - start) < w.L)):
            leaks += 1
    return leaks


def forecast_windows(params: ModelParams, kb: Optional[KnowledgeBase], windows: Sequence[Window],
                     cfg: TrainConfig, threads: int = 1, keep_outputs: bool = False) -> list[WindowForecast]:
    """Run inference on every window; a window whose source is in the KB does not retrieve itself."""
    if kb is not None and cfg.ablation.uses_retrieval:
        check_kb_compatible(params, kb)

    def job(w: Window) -> WindowForecast:
        nw = normalize_window(w)
        exclude = kb.id_for_source(nw.source_id) if kb is not None else None
        out = forward(nw.context, kb, params, cfg, exclude_id=exclude)
        raw = denormalize_window(nw)
        return WindowForecast(
            source_id=nw.source_id,
            context=raw.context,
            y=raw.horizon,
            y_hat=denormalize(out.y_hat, nw.mean, nw.std),
            y_inv=denormalize(out.y_inv, nw.mean, nw.std),
            y_dyn=denormalize(out.y_dyn, nw.mean, nw.std),
            output=out if keep_outputs else None,
        )

    return ThreadManager(threads).map(job, list(windows))


# ---------- scoring ----------
def _mse_mae(errors: Sequence[Tensor]) -> tuple[float, float, int]:
    flat = np.concatenate(errors) if errors else np.zeros(0)
    n = flat.shape[0]
    if n == 0:
        return 0.0, 0.0, 0
    # exactly rounded sums make the result independent of window order
    return math.fsum(flat * flat) / n, math.fsum(np.abs(flat)) / n, n


def component_errors(forecasts: Sequence[WindowForecast], period: int) -> dict[str, list[Tensor]]:
    out: dict[str, list[Tensor]] = {c: [] for c in COMPONENTS}
    for f in forecasts:
        truth = component_split(f.context, f.y, period)
        pred = component_split(f.context, f.y_hat, period)
        for c in COMPONENTS:
            out[c].append(pred[c] - truth[c])
    return out


def score(forecasts: Sequence[WindowForecast], period: Optional[int] = None) -> MetricReport:
    if not forecasts:
        raise DomainError("cannot score an empty evaluation set")
    mse, mae, n = _mse_mae([f.y_hat - f.y for f in forecasts])

    per_component: dict[str, ComponentMetrics] = {}
    if period is not None:
        T, L = forecasts[0].context.shape[0], forecasts[0].y.shape[0]
        if T + L < 2 * period:
            logger.warning(f"[ANALYSIS] T+L={T + L} too short for period {period}; skipping component split")
        else:
            for c, errs in component_errors(forecasts, period).items():
                c_mse, c_mae, _ = _mse_mae(errs)
                per_component[c] = ComponentMetrics(mse=c_mse, mae=c_mae)

    return MetricReport(mse=mse, mae=mae, per_component=per_component, n_windows=len(forecasts), n_points=n)


def evaluate(params: ModelParams, kb: Optional[KnowledgeBase], eval_windows: Sequence[Window],
             cfg: TrainConfig, period: Optional[int] = None, threads: int = 1) -> MetricReport:
    """MSE / MAE over all horizon points of all windows, after denormalization."""
    if not eval_windows:
        raise DomainError("evaluation set is empty")
    report = score(forecast_windows(params, kb, eval_windows, cfg, threads), period)
    logger.info(f"[ANALYSIS] eval n_windows={report.n_windows} mse={report.mse:.6f} mae={report.mae:.6f}")
    return report
