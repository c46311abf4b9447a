"""Shared fit-and-score plumbing for the multi-run studies."""

import logging
from typing import Optional, Sequence

from core.data import SeriesChannel, Window, make_windows, split_windows
from core.model import ModelParams
from retrieval.knowledge_base import KnowledgeBase, build_kb
from schemas.train_config import TrainConfig
from training.trainer import train

logger = logging.getLogger(__name__)


def prepare_windows(channels: Sequence[SeriesChannel], cfg: TrainConfig) -> tuple[list[Window], list[Window]]:
    windows = make_windows(channels, cfg.T, cfg.L, cfg.window_stride, normalize=True, threads=cfg.threads)
    return split_windows(windows, cfg.val_fraction)


def fit(cfg: TrainConfig, train_windows: Sequence[Window],
        val_windows: Sequence[Window] = ()) -> tuple[ModelParams, Optional[KnowledgeBase]]:
    """
    Build the KB from the training windows with the seed's initial encoder,
    then train. Runs without retrieval get no KB.
    """
    kb = None
    if cfg.ablation.uses_retrieval:
        kb = build_kb(train_windows, ModelParams.init(cfg), threads=cfg.threads)
    params, _ = train(train_windows, kb, cfg, val_windows)
    return params, kb
