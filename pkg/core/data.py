"""Series ingestion, synthetic generation, windowing, normalization and patching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import ConfigurationError, CsvParseError
from core.numerics import Tensor, as_tensor
from core.thread_manager import ThreadManager
from schemas.synthetic import SyntheticSpec
from schemas.train_config import PatchConfig

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class SeriesChannel:
    name: str
    values: Tensor
    frequency_tag: str = ""
    mechanism_id: Optional[int] = None   # ground truth for synthetic channels

    def __post_init__(self):
        self.values = as_tensor(self.values)


@dataclass
class Window:
    context: Tensor
    horizon: Tensor
    mean: float = 0.0
    std: float = 1.0
    source_id: tuple[str, int] = ("", 0)
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.context.shape[0]

    @property
    def L(self) -> int:
        return self.horizon.shape[0]


# ---------- patching ----------
def patch(x: Tensor, cfg: PatchConfig) -> Tensor:
    """Rows x[p*stride : p*stride + patch_len]; a trailing remainder is dropped."""
    T = x.shape[0]
    if cfg.patch_len > T:
        raise ConfigurationError(f"patch_len {cfg.patch_len} exceeds series length {T}")
    views = np.lib.stride_tricks.sliding_window_view(x, cfg.patch_len)[:: cfg.stride]
    return np.ascontiguousarray(views)


def n_patches(T: int, cfg: PatchConfig) -> int:
    return (T - cfg.patch_len) // cfg.stride + 1


# ---------- normalization ----------
def normalize_window(w: Window) -> Window:
    """Standardize context and horizon by the context's mean and (floored) std."""
    if w.normalized:
        return w
    mean = float(np.mean(w.context))
    std = max(float(np.std(w.context)), STD_FLOOR)
    return Window(
        context=(w.context - mean) / std,
        horizon=(w.horizon - mean) / std,
        mean=mean,
        std=std,
        source_id=w.source_id,
        normalized=True,
        meta=dict(w.meta),
    )


def denormalize(values: Tensor, mean: float, std: float) -> Tensor:
    return values * std + mean


def denormalize_window(w: Window) -> Window:
    if not w.normalized:
        return w
    return Window(
        context=denormalize(w.context, w.mean, w.std),
        horizon=denormalize(w.horizon, w.mean, w.std),
        mean=0.0,
        std=1.0,
        source_id=w.source_id,
        normalized=False,
        meta=dict(w.meta),
    )


# ---------- synthetic data ----------
def generate_synthetic(spec: SyntheticSpec, n_channels: int | None = None, length: int | None = None) -> list[SeriesChannel]:
    """
    Channel c follows mechanism c % n_mechanisms: a linear trend plus one
    sinusoid of period `season_period`. Each channel perturbs its mechanism's
    phase and amplitude by `dynamic_jitter` and adds Gaussian noise.
    Pure function of (spec, n_channels, length).
    """
    n_channels = spec.n_channels if n_channels is None else n_channels
    length = spec.length if length is None else length
    rng = np.random.default_rng(spec.seed)
    t = np.arange(length, dtype=np.float64)

    mechanisms = []
    for _ in range(spec.n_mechanisms):
        mechanisms.append({
            "slope": rng.uniform(-1.0, 1.0) * spec.trend_amp / max(length, 1),
            "level": rng.uniform(-1.0, 1.0),
            "amp": spec.seasonal_amp * rng.uniform(0.2, 1.0),
            "phase": rng.uniform(0.0, 2 * np.pi),
        })

    channels = []
    for c in range(n_channels):
        k = c % spec.n_mechanisms
        m = mechanisms[k]
        phase_jit = spec.dynamic_jitter * np.pi * rng.standard_normal()
        amp_jit = 1.0 + spec.dynamic_jitter * rng.standard_normal()
        noise = rng.standard_normal(length) * spec.noise_std
        values = (
            m["level"]
            + m["slope"] * t
            + m["amp"] * amp_jit * np.sin(2 * np.pi * t / spec.season_period + m["phase"] + phase_jit)
            + noise
        )
        channels.append(SeriesChannel(name=f"syn{c:03d}", values=values, frequency_tag="synthetic", mechanism_id=k))

    logger.info(f"[DATA] Generated {n_channels} synthetic channels of length {length} from {spec.n_mechanisms} mechanisms")
    return channels


# ---------- CSV ----------
def load_csv(path: str | Path, columns: Sequence[str] | None = None) -> list[SeriesChannel]:
    """One channel per selected column. Rows in CSV errors are 1-based data rows (header excluded)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV input not found: {path}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    selected = list(frame.columns) if columns is None else list(columns)
    missing = [c for c in selected if c not in frame.columns]
    if missing:
        raise CsvParseError(f"column(s) {missing} not found in {path}; available: {list(frame.columns)}", column=missing[0])

    channels = []
    for col in selected:
        raw = frame[col].str.strip()
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            cell = raw.iloc[row]
            raise CsvParseError(
                f"{path}: non-numeric cell {cell!r} at row {row + 1}, column {col!r}",
                row=row + 1, column=col,
            )
        channels.append(SeriesChannel(name=col, values=parsed.to_numpy(dtype=np.float64), frequency_tag="csv"))

    logger.info(f"[DATA] Loaded {len(channels)} channel(s) with {len(frame)} rows from {path}")
    return channels


# ---------- windowing ----------
def slice_windows(ch: SeriesChannel, T: int, L: int, stride: int) -> list[Window]:
    """Raw windows at starts 0, stride, ... while start + T + L <= length."""
    if T <= 0 or L <= 0 or stride <= 0:
        raise ConfigurationError(f"T, L and stride must be positive (got {T}, {L}, {stride})")
    n = ch.values.shape[0]
    windows = []
    for start in range(0, n - T - L + 1, stride):
        windows.append(Window(
            context=ch.values[start:start + T].copy(),
            horizon=ch.values[start + T:start + T + L].copy(),
            source_id=(ch.name, start),
            meta={"mechanism_id": ch.mechanism_id},
        ))
    return windows


def make_windows(
    channels: Sequence[SeriesChannel],
    T: int,
    L: int,
    stride: int,
    normalize: bool = True,
    threads: int = 1,
) -> list[Window]:
    """Slice (and normalize) every channel; output sorted by channel, then start index."""
    def job(ch: SeriesChannel) -> list[Window]:
        ws = slice_windows(ch, T, L, stride)
        return [normalize_window(w) for w in ws] if normalize else ws

    per_channel = ThreadManager(threads).map(job, list(channels))
    windows = [w for ws in per_channel for w in ws]
    logger.debug(f"[DATA] {len(windows)} windows from {len(channels)} channel(s) (T={T}, L={L}, stride={stride})")
    return windows


def split_windows(windows: Sequence[Window], val_fraction: float) -> tuple[list[Window], list[Window]]:
    """
    Per channel, the last `val_fraction` of windows (by start) are held out.
    Training windows whose horizon reaches into the first held-out horizon are
    dropped, so no training window or KB entry built from the training side
    carries a held-out target point.
    """
    by_channel: dict[str, list[Window]] = {}
    for w in windows:
        by_channel.setdefault(w.source_id[0], []).append(w)
    train, val = [], []
    for ws in by_channel.values():
        n_val = int(round(len(ws) * val_fraction))
        if val_fraction > 0 and len(ws) > 1:
            n_val = max(1, n_val)
        cut = len(ws) - n_val
        held = ws[cut:]
        kept = ws[:cut]
        if held:
            first = held[0].source_id[1]
            kept = [w for w in kept if w.source_id[1] + w.L <= first]
        train.extend(kept)
        val.extend(held)
    return train, val
