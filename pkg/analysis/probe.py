import logging
from typing import Optional, Sequence

import numpy as np

from core import numerics as nx
from core.data import Window, normalize_window
from core.model import ModelParams, forward
from retrieval.knowledge_base import KnowledgeBase
from schemas.reports import DistributionSummary, ProbeReport
from schemas.train_config import TrainConfig

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def summarize(values: np.ndarray) -> DistributionSummary:
    if values.size == 0:
        return DistributionSummary(mean=0.0, std=0.0, min=0.0, max=0.0, quantiles={f"q{int(q * 100):02d}": 0.0 for q in QUANTILES})
    return DistributionSummary(
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        min=float(np.min(values)),
        max=float(np.max(values)),
        quantiles={f"q{int(q * 100):02d}": float(np.quantile(values, q)) for q in QUANTILES},
    )


def disentanglement_probe(params: ModelParams, kb: Optional[KnowledgeBase], windows: Sequence[Window],
                          cfg: TrainConfig) -> ProbeReport:
    """Distribution of |cos(z_inv, z_dyn)| and of the routing gate entries over a window set."""
    cos, gammas, inner = [], [], []
    for w in windows:
        nw = normalize_window(w)
        exclude = kb.id_for_source(nw.source_id) if kb is not None else None
        out = forward(nw.context, kb, params, cfg, exclude_id=exclude)
        cos.append(abs(nx.cosine_sim(out.z_inv, out.z_dyn)))
        gammas.append(out.gamma_gate)
        inner.append(abs(float(np.dot(out.z_inv, out.z_dyn))))

    report = ProbeReport(
        n_windows=len(cos),
        abs_cos=summarize(np.asarray(cos)),
        gamma=summarize(np.concatenate(gammas) if gammas else np.zeros(0)),
        mean_abs_inner=float(np.mean(inner)) if inner else 0.0,
    )
    logger.info(f"[ANALYSIS] probe n={report.n_windows} mean|cos|={report.abs_cos.mean:.4f} "
                f"mean gamma={report.gamma.mean:.4f}")
    return report
