"""Composite objective: squared forecast error plus rho times the squared branch inner product."""

from typing import Sequence

import numpy as np

from core.model import ForecastOutput
from core.numerics import Tensor
from schemas.reports import LossBreakdown


def loss(y_hat: Tensor, y: Tensor, z_inv: Tensor, z_dyn: Tensor, rho: float) -> LossBreakdown:
    """
    Batch-mean of ||y_hat - y||^2 and of <z_inv, z_dyn>^2. Accepts a single
    sample (1-D) or a batch (2-D, one row per sample).
    """
    y_hat, y = np.atleast_2d(y_hat), np.atleast_2d(y)
    z_inv, z_dyn = np.atleast_2d(z_inv), np.atleast_2d(z_dyn)
    pred = float(np.mean(np.sum((y_hat - y) ** 2, axis=1)))
    dis = float(np.mean(np.sum(z_inv * z_dyn, axis=1) ** 2))
    return LossBreakdown(total=pred + rho * dis, pred=pred, dis=dis)


def batch_loss(outputs: Sequence[ForecastOutput], targets: Sequence[Tensor],
               rho: float) -> tuple[LossBreakdown, list[tuple[Tensor, Tensor, Tensor]]]:
    """Loss over a batch plus per-sample adjoints (dL/dy_hat, dL/dz_inv, dL/dz_dyn)."""
    B = len(outputs)
    breakdown = loss(
        np.array([o.y_hat for o in outputs]), np.array(targets),
        np.array([o.z_inv for o in outputs]), np.array([o.z_dyn for o in outputs]),
        rho,
    )
    adjoints = []
    for o, y in zip(outputs, targets):
        g_yhat = 2.0 * (o.y_hat - y) / B
        inner = float(np.dot(o.z_inv, o.z_dyn))
        g_zinv = rho * 2.0 * inner * o.z_dyn / B
        g_zdyn = rho * 2.0 * inner * o.z_inv / B
        adjoints.append((g_yhat, g_zinv, g_zdyn))
    return breakdown, adjoints
