"""Pipeline composition: config -> dataset -> pretrained model -> adaptation.

Thin glue shared by the CLI and the ablation harness; all substance lives in
the data/model/trainer modules.
"""

from __future__ import annotations

from pathlib import Path

from .config import RunConfig
from .data import DatasetSplits, build_dataset
from .model import ModelBundle, build_model
from .trainer import adapt, init_state, pretrain_source


def build_splits(cfg: RunConfig) -> DatasetSplits:
    return build_dataset(
        cfg.data, patch_size=cfg.model.patch_size, image_size=cfg.model.image_size
    )


def fresh_model(cfg: RunConfig) -> ModelBundle:
    return build_model(cfg.model, seed=cfg.train.seed)


def pretrain(cfg: RunConfig, splits: DatasetSplits) -> ModelBundle:
    model = fresh_model(cfg)
    pretrain_source(
        model,
        splits.source,
        epochs=cfg.train.pretrain_epochs,
        lr=cfg.train.pretrain_lr,
        seed=cfg.train.seed,
    )
    return model


def adapt_model(cfg: RunConfig, splits: DatasetSplits, model: ModelBundle,
                out_dir: str | Path) -> Path:
    state = init_state(model, cfg.hp, cfg.train)
    return adapt(state, splits, cfg.train.total_iters, out_dir)
