import logging
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from core.data import Window, normalize_window
from core.errors import ConfigurationError, DimensionError, DomainError, TrainingDivergedError
from core.model import ModelParams, backward, forward
from core.thread_manager import ThreadManager
from retrieval.knowledge_base import KnowledgeBase
from schemas.reports import LossBreakdown
from schemas.train_config import TrainConfig
from training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from training.losses import batch_loss
from training.optimizer import Adam
from utils.serialize import dumps

logger = logging.getLogger(__name__)


def check_kb_compatible(params: ModelParams, kb: KnowledgeBase) -> None:
    if (kb.T, kb.L, kb.d) != (params.T, params.L, params.d):
        raise DimensionError(
            f"model dims (T={params.T}, L={params.L}, d={params.d}) do not match "
            f"KB dims (T={kb.T}, L={kb.L}, d={kb.d})"
        )


class Trainer:
    """
    Mini-batch training over a fixed window set. Each step draws its batch
    and dropout masks from a generator seeded by (seed, step), so a run
    resumed from a checkpoint replays the same stream as a straight run.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        kb: Optional[KnowledgeBase],
        train_windows: Sequence[Window],
        val_windows: Sequence[Window] = (),
        params: Optional[ModelParams] = None,
        optimizer: Optional[Adam] = None,
        start_step: int = 0,
        checkpoint_path: Optional[str | Path] = None,
        metrics_path: Optional[str | Path] = None,
    ):
        self.cfg = cfg
        self.kb = kb
        self.train_windows = [normalize_window(w) for w in train_windows]
        self.val_windows = [normalize_window(w) for w in val_windows]
        self.params = params if params is not None else ModelParams.init(cfg)
        self.optimizer = optimizer if optimizer is not None else Adam(lr=cfg.lr)
        self.start_step = start_step
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.rho = cfg.effective_rho

        if cfg.ablation.uses_retrieval:
            if kb is None:
                raise DomainError(f"ablation '{cfg.ablation.value}' needs a knowledge base")
            check_kb_compatible(self.params, kb)
            if kb.is_stale(self.params):
                logger.warning("[TRAIN] KB embeddings were built with a different encoder than the current params")

    # ---------- single step ----------
    def _exclude_id(self, w: Window) -> Optional[int]:
        return self.kb.id_for_source(w.source_id) if self.kb is not None else None

    def train_step(self, step: int) -> LossBreakdown:
        rng = np.random.default_rng([self.cfg.seed, step])
        n = len(self.train_windows)
        idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        batch = [self.train_windows[i] for i in idx]

        outputs = [
            forward(w.context, self.kb, self.params, self.cfg,
                    exclude_id=self._exclude_id(w), training=True, rng=rng)
            for w in batch
        ]
        breakdown, adjoints = batch_loss(outputs, [w.horizon for w in batch], self.rho)
        if not np.isfinite(breakdown.total):
            logger.error(f"[TRAIN] Loss is {breakdown.total} at step {step}; aborting")
            raise TrainingDivergedError(step, breakdown.total)

        self.params.zero_grad()
        for out, (g_y, g_zi, g_zd) in zip(outputs, adjoints):
            backward(out, self.params, g_y, g_zi, g_zd)
        self.optimizer.step(self.params)
        return breakdown

    # ---------- validation ----------
    def validate(self) -> tuple[float, float]:
        """Held-out MSE / MAE in normalized space."""
        if not self.val_windows:
            return float("nan"), float("nan")

        def job(w: Window) -> np.ndarray:
            out = forward(w.context, self.kb, self.params, self.cfg, exclude_id=self._exclude_id(w))
            return out.y_hat - w.horizon

        errors = np.concatenate(ThreadManager(self.cfg.threads).map(job, self.val_windows))
        return float(np.mean(errors ** 2)), float(np.mean(np.abs(errors)))

    # ---------- loop ----------
    def _record(self, step: int, breakdown: LossBreakdown, val: tuple[float, float], started: float, sink) -> dict:
        val_mse, val_mae = val
        wall_ms = (time.perf_counter() - started) * 1000.0 if self.cfg.log_wall_time else 0.0
        record = {
            "step": step,
            "total": breakdown.total,
            "pred": breakdown.pred,
            "dis": breakdown.dis,
            "val_mse": val_mse,
            "val_mae": val_mae,
            "wall_ms": round(wall_ms, 3),
        }
        if sink is not None:
            sink.write(dumps(record, indent=None) + "\n")
            sink.flush()
        logger.info(f"[TRAIN] step {step}: total={breakdown.total:.6f} pred={breakdown.pred:.6f} "
                    f"dis={breakdown.dis:.6f} val_mse={val_mse:.6f} val_mae={val_mae:.6f}")
        return record

    def _checkpoint(self, step: int) -> None:
        if self.checkpoint_path is not None:
            save_checkpoint(self.checkpoint_path, self.params, step, self.cfg.seed, self.optimizer,
                            self.cfg.ablation)

    def run(self) -> tuple[ModelParams, list[dict]]:
        cfg = self.cfg
        log: list[dict] = []
        if self.start_step >= cfg.steps:
            logger.info(f"[TRAIN] Nothing to do: start step {self.start_step} >= steps {cfg.steps}")
            return self.params, log
        if not self.train_windows:
            raise DomainError("training set is empty")

        logger.info(f"[TRAIN] ablation={cfg.ablation.value} rho={self.rho} steps {self.start_step}..{cfg.steps} "
                    f"batch={cfg.batch_size} n_train={len(self.train_windows)} n_val={len(self.val_windows)}")
        started = time.perf_counter()
        sink = None
        if self.metrics_path is not None:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            sink = open(self.metrics_path, "w" if self.start_step == 0 else "a", encoding="utf-8")
        try:
            breakdown = None
            for step in range(self.start_step, cfg.steps):
                if step % cfg.eval_interval == 0:
                    # val is measured at the same pre-update params as the batch loss
                    val = self.validate()
                    breakdown = self.train_step(step)
                    log.append(self._record(step, breakdown, val, started, sink))
                else:
                    breakdown = self.train_step(step)
                if (step + 1) % cfg.checkpoint_interval == 0:
                    self._checkpoint(step + 1)

            log.append(self._record(cfg.steps, breakdown, self.validate(), started, sink))
            self._checkpoint(cfg.steps)
        finally:
            if sink is not None:
                sink.close()
        return self.params, log


def train(
    train_windows: Sequence[Window],
    kb: Optional[KnowledgeBase],
    cfg: TrainConfig,
    val_windows: Sequence[Window] = (),
    checkpoint_path: Optional[str | Path] = None,
    metrics_path: Optional[str | Path] = None,
    resume_from: Optional[str | Path | Checkpoint] = None,
) -> tuple[ModelParams, list[dict]]:
    """Train from scratch, or continue from `resume_from` up to cfg.steps."""
    params, optimizer, start = None, None, 0
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if ckpt.ablation != cfg.ablation:
            raise ConfigurationError(
                f"checkpoint was trained as {ckpt.ablation.value}, cannot resume it as {cfg.ablation.value}"
            )
        params = ckpt.params
        optimizer = ckpt.restore_optimizer(Adam(lr=cfg.lr))
        start = ckpt.step
        logger.info(f"[TRAIN] Resuming from step {start}")
    trainer = Trainer(cfg, kb, train_windows, val_windows, params, optimizer, start, checkpoint_path, metrics_path)
    return trainer.run()
