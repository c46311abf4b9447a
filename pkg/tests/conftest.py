import numpy as np
import pytest

from core.data import generate_synthetic, make_windows
from core.model import ModelParams
from retrieval.knowledge_base import KnowledgeBase, build_kb
from schemas.synthetic import SyntheticSpec
from schemas.train_config import PatchConfig, TrainConfig

TINY_YAML = """
profiles:
  tiny:
    T: 16
    L: 4
    patch:
      patch_len: 4
      stride: 4
    window_stride: 4
    d: 6
    d_hidden: 8
    K: 2
    dropout: 0.0
    steps: 6
    batch_size: 4
    eval_interval: 3
    checkpoint_interval: 3
    log_wall_time: false
synthetic:
  n_channels: 3
  length: 60
  season_period: 8
  seed: 0
period: 8
"""


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        T=16, L=4, patch=PatchConfig(patch_len=4, stride=4), window_stride=2,
        d=6, d_hidden=8, K=3, dropout=0.0, batch_size=8, steps=20,
        eval_interval=5, checkpoint_interval=10, seed=0, log_wall_time=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_config(**overrides) -> TrainConfig:
    base = dict(
        T=64, L=16, patch=PatchConfig(patch_len=8, stride=8), window_stride=4,
        d=32, K=3, dropout=0.0, batch_size=32, steps=2000, lr=1e-3,
        eval_interval=200, checkpoint_interval=500, seed=0, log_wall_time=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def random_kb(rng: np.random.Generator, n: int, d: int, T: int = 4, L: int = 2) -> KnowledgeBase:
    return KnowledgeBase(
        T, L, d,
        contexts=rng.standard_normal((n, T)),
        horizons=rng.standard_normal((n, L)),
        embeddings=rng.standard_normal((n, d)),
        encoder_hash=bytes(32),
    )


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return tiny_config()


@pytest.fixture
def tiny_channels():
    return generate_synthetic(SyntheticSpec(n_channels=4, length=80, season_period=8, seed=0))


@pytest.fixture
def tiny_windows(tiny_channels, tiny_cfg):
    return make_windows(tiny_channels, tiny_cfg.T, tiny_cfg.L, tiny_cfg.window_stride)


@pytest.fixture
def tiny_params(tiny_cfg) -> ModelParams:
    return ModelParams.init(tiny_cfg)


@pytest.fixture
def tiny_kb(tiny_windows, tiny_params) -> KnowledgeBase:
    return build_kb(tiny_windows, tiny_params)


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML, encoding="utf-8")
    return path
