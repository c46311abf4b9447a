import logging
from typing import Optional, Sequence

from analysis.metrics import evaluate
from analysis.pipeline import fit, prepare_windows
from core.data import SeriesChannel
from core.errors import DomainError
from schemas.reports import SweepPoint, SweepReport
from schemas.train_config import TrainConfig

logger = logging.getLogger(__name__)

K_GRID = (1, 3, 5, 7)
RHO_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


def sensitivity_sweep(
    channels: Sequence[SeriesChannel],
    cfg: TrainConfig,
    K_grid: Sequence[int] = K_GRID,
    rho_grid: Sequence[float] = RHO_GRID,
    period: Optional[int] = None,
) -> SweepReport:
    """One axis at a time: K at the configured rho, then rho at the configured K."""
    train_w, val_w = prepare_windows(channels, cfg)
    if not val_w:
        raise DomainError("no held-out windows for the sweep")

    settings = [("K", {"K": k}) for k in K_grid] + [("rho", {"rho": r}) for r in rho_grid]
    points = []
    for axis, update in settings:
        run_cfg = cfg.model_copy(update=update)
        params, kb = fit(run_cfg, train_w, val_w)
        report = evaluate(params, kb, val_w, run_cfg, period=period, threads=cfg.threads)
        points.append(SweepPoint(axis=axis, K=run_cfg.K, rho=run_cfg.rho, seed=run_cfg.seed, report=report))
        logger.info(f"[ANALYSIS] sweep {axis}: K={run_cfg.K} rho={run_cfg.rho} mse={report.mse:.6f}")
    return SweepReport(K_grid=list(K_grid), rho_grid=list(rho_grid), points=points)
