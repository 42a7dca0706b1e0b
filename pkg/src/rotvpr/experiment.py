"""Desk-scale comparison: steerable C4 encoder vs a conventional (N=1) encoder.

Both models share every setting except the group order. Training uses 32
places of a seeded synthetic world; evaluation uses the other 32 places, with
upright database crops from the first year and rotated, rescaled queries from
the last year.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .backbone import ModelConfig, build_model, encode_batch
from .dataset import PlaceImages, WorldSpec, build_places, generate_world, make_eval_views
from .metric_learning import BatchSpec, TrainConfig, train
from .retrieval import SamePlaceId, build_store, recall_at_n, sweep_dims

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    seed: int = 0
    n_places: int = 64
    n_train: int = 32
    world_px: int = 1300
    n_years: int = 4
    diameter_px: int = 104
    ground_diameter_m: float = 400.0
    interval_m: float = 440.0
    input_size: int = 64
    epochs: int = 30
    stage_widths: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    descriptor_dim: int = 512
    places_per_batch: int = 8
    per_place: int = 4
    lr: float = 1e-3

    def world_spec(self) -> WorldSpec:
        return WorldSpec(seed=self.seed, size_px=self.world_px,
                         meters_per_pixel=self.ground_diameter_m / self.diameter_px,
                         n_years=self.n_years)

    def model_config(self, group_order: int) -> ModelConfig:
        return ModelConfig(group_order=group_order, stage_widths=tuple(self.stage_widths),
                           blocks_per_stage=self.blocks_per_stage, input_size=self.input_size,
                           descriptor_dim=self.descriptor_dim, seed=self.seed)


@dataclass
class ToyData:
    images: PlaceImages
    train_ids: list[int]
    test_ids: list[int]


def build_toy_data(cfg: ToyConfig) -> ToyData:
    world = generate_world(cfg.world_spec())
    records, images, stats = build_places(world, cfg.interval_m, cfg.diameter_px,
                                          max_places=cfg.n_places, seed=cfg.seed)
    if len(records) < cfg.n_places:
        raise ValueError(f"world yields only {len(records)} places, need {cfg.n_places}; "
                         "enlarge world_px")
    data = PlaceImages(records, images=images)
    ids = np.random.default_rng([cfg.seed, 3]).permutation(data.place_ids())
    return ToyData(data, sorted(ids[:cfg.n_train].tolist()), sorted(ids[cfg.n_train:].tolist()))


def train_toy(cfg: ToyConfig, group_order: int, data: ToyData):
    model = build_model(cfg.model_config(group_order))
    tcfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed)
    bspec = BatchSpec(places=cfg.places_per_batch, per_place=cfg.per_place,
                      input_size=cfg.input_size)
    t0 = time.perf_counter()
    train(model, data.images.subset(data.train_ids), tcfg, bspec)
    log.info("trained N=%d seed %d in %.0fs", group_order, cfg.seed, time.perf_counter() - t0)
    return model


def eval_stores(model, cfg: ToyConfig, data: ToyData):
    """Encode the fixed test views; returns ``(query_store, db_store)``."""
    rng = np.random.default_rng([cfg.seed, 5])
    db, db_ids, q, q_ids, _ = make_eval_views(data.images, data.test_ids, rng, cfg.input_size)
    meta = {"model": model.checksum()[:16], "seed": cfg.seed}
    return (build_store(encode_batch(model, q), q_ids, meta),
            build_store(encode_batch(model, db), db_ids, meta))


@dataclass
class SeedOutcome:
    seed: int
    recall1: dict[int, float]           # group order -> R@1
    sweep: dict[int, float] | None      # dim -> R@1 for the C4 model


def run_seed(cfg: ToyConfig, orders=(4, 1), sweep=(512, 256, 128, 64, 32)) -> SeedOutcome:
    data = build_toy_data(cfg)
    r1, dims = {}, None
    for n in orders:
        model = train_toy(cfg, n, data)
        q, db = eval_stores(model, cfg, data)
        r1[n] = recall_at_n(q, db, SamePlaceId()).recall[1]
        if n == 4 and sweep:
            dims = {row.dim: row.report.recall[1] for row in sweep_dims(q, db, sweep, SamePlaceId())}
    return SeedOutcome(cfg.seed, r1, dims)


def run_comparison(base: ToyConfig, seeds=range(5), **kw) -> list[SeedOutcome]:
    return [run_seed(replace(base, seed=s), **kw) for s in seeds]
