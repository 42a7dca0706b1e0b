"""Multi-similarity loss with online pair mining, P x K batch sampling and training."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import Model, forward_backward, save_model

log = logging.getLogger(__name__)


@dataclass
class MsLossConfig:
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0 < self.lam < 1:
            raise ValueError("lambda must lie in (0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class BatchSpec:
    places: int = 8            # P
    per_place: int = 4         # K
    input_size: int = 64
    rotate: bool = True
    jitter: bool = True
    mix_years: bool = True
    crop_fraction: float = 0.9

    def __post_init__(self):
        if self.per_place < 2:
            raise ValueError("per_place (K) must be >= 2 so every anchor has a positive")
        if self.places < 2:
            raise ValueError("places (P) must be >= 2")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0   # epochs; 0 disables
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


# -- similarities, mining, loss ------------------------------------------------

def pairwise_cosine(desc: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    norms = np.linalg.norm(desc, axis=1)
    if np.any(np.abs(norms - 1) > tol):
        raise ValueError("pairwise_cosine expects unit-norm rows")
    return desc @ desc.T


@dataclass
class MinedPairs:
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    skipped: list[int] = field(default_factory=list)

    @property
    def kept_pos(self) -> int:
        return int(sum(len(p) for p in self.positives))

    @property
    def kept_neg(self) -> int:
        return int(sum(len(n) for n in self.negatives))


def mine_pairs(sim: np.ndarray, labels, epsilon: float = 0.1) -> MinedPairs:
    """Per-anchor hard pair selection.

    A negative is kept if its similarity exceeds the hardest (lowest)
    positive minus ``epsilon``; a positive is kept if it is below the hardest
    (highest) negative plus ``epsilon``. Self-pairs are never considered.
    Anchors without any positive are skipped.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("mining needs at least two distinct labels")
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_all, neg_all, skipped = [], [], []
    for i in range(n):
        pos = np.flatnonzero(same[i] & (np.arange(n) != i))
        neg = np.flatnonzero(~same[i])
        if len(pos) == 0:
            skipped.append(i)
            pos_all.append(pos)
            neg_all.append(pos)
            continue
        s_pos, s_neg = sim[i, pos], sim[i, neg]
        neg_all.append(neg[s_neg + epsilon > s_pos.min()])
        pos_all.append(pos[s_pos - epsilon < s_neg.max()])
    return MinedPairs(pos_all, neg_all, skipped)


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    active_anchors: int
    all_skipped: bool


def ms_loss(sim: np.ndarray, labels, mined: MinedPairs, cfg: MsLossConfig) -> LossResult:
    """Multi-similarity loss and its gradient w.r.t. the similarity matrix.

    Per anchor: (1/alpha) log(1 + sum_pos exp(-alpha (s - lambda)))
              + (1/beta)  log(1 + sum_neg exp( beta (s - lambda))),
    averaged over anchors whose mined sets are non-empty.
    """
    a, b, lam = cfg.alpha, cfg.beta, cfg.lam
    grad = np.zeros_like(sim, dtype=np.float64)
    total = 0.0
    active = 0
    for i, (pos, neg) in enumerate(zip(mined.positives, mined.negatives)):
        if len(pos) == 0 or len(neg) == 0:
            continue
        active += 1
        ep = np.exp(-a * (sim[i, pos].astype(np.float64) - lam))
        en = np.exp(b * (sim[i, neg].astype(np.float64) - lam))
        sp, sn = ep.sum(), en.sum()
        total += np.log1p(sp) / a + np.log1p(sn) / b
        grad[i, pos] -= ep / (1 + sp)
        grad[i, neg] += en / (1 + sn)
    if active == 0:
        return LossResult(0.0, grad, 0, True)
    return LossResult(total / active, grad / active, active, False)


class MultiSimilarityLoss:
    """Descriptor-level loss: cosine similarities -> mining -> MS loss.

    Calling it returns ``(loss, d_loss/d_desc)``; mining counts of the last
    call are kept in ``last``.
    """

    def __init__(self, cfg: MsLossConfig | None = None):
        self.cfg = cfg or MsLossConfig()
        self.last: dict = {}

    def __call__(self, desc: np.ndarray, labels):
        d64 = desc.astype(np.float64)
        sim = pairwise_cosine(d64)
        mined = mine_pairs(sim, labels, self.cfg.epsilon)
        res = ms_loss(sim, labels, mined, self.cfg)
        self.last = {"kept_pos": mined.kept_pos, "kept_neg": mined.kept_neg,
                     "skipped": len(mined.skipped), "all_skipped": res.all_skipped}
        # sim = D D^T  =>  dL/dD = (G + G^T) D
        d_desc = (res.grad + res.grad.T) @ d64
        return res.loss, d_desc


# -- batches --------------------------------------------------------------------

def sample_batch(dataset, spec: BatchSpec, rng: np.random.Generator, place_ids=None):
    """Draw a P x K batch of rotate-then-crop views.

    ``dataset`` is a :class:`rotvpr.dataset.PlaceImages`. When ``place_ids`` is
    None, P places are drawn without replacement. Returns ``(images, labels)``
    with images ``[P*K, 3, S, S]`` in [0, 1] and labels equal to place ids.
    """
    from .dataset import augment_appearance, rotate_then_crop

    ids = dataset.place_ids() if place_ids is None else list(place_ids)
    if place_ids is None:
        if len(ids) < spec.places:
            raise ValueError(f"need at least {spec.places} places, manifest has {len(ids)}")
        ids = [ids[i] for i in sorted(rng.choice(len(ids), spec.places, replace=False))]
    images, labels = [], []
    for pid in ids:
        n_var = dataset.n_variants(pid)
        if spec.mix_years:
            variants = rng.integers(0, n_var, size=spec.per_place)
        else:
            variants = np.full(spec.per_place, rng.integers(0, n_var))
        for v in variants:
            angle = rng.uniform(0, 2 * math.pi) if spec.rotate else 0.0
            img = rotate_then_crop(dataset.image(pid, int(v)), angle, spec.input_size,
                                   spec.crop_fraction)
            if spec.jitter:
                img = augment_appearance(img, rng)
            images.append(img)
            labels.append(pid)
    return np.stack(images), np.asarray(labels)


# -- optimisation -----------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


class Sgd:
    def __init__(self, params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        self.lr, self.mu, self.wd = lr, momentum, weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        if self.lr == 0:
            return
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.buf[k] = self.mu * self.buf[k] + g
            p -= (self.lr * self.buf[k]).astype(p.dtype)


def make_optimizer(model: Model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.params, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    return Sgd(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, batch_ids):
        super().__init__(f"non-finite loss at epoch {epoch} step {step}")
        self.epoch, self.step, self.batch_ids = epoch, step, list(batch_ids)


LOG_FIELDS = ("epoch", "step", "loss", "kept_pos", "kept_neg", "val_recall1")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    val_history: list[float]
    seconds: float


def train(model: Model, dataset, cfg: TrainConfig, batch: BatchSpec,
          loss_cfg: MsLossConfig | None = None,
          validate: Callable[[Model], float] | None = None,
          out_dir: str | Path | None = None, start_epoch: int = 0,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place with the multi-similarity loss.

    Each epoch visits every training place once, in shuffled chunks of P
    places. ``validate(model)`` returns Recall@1 on held-out places and is
    called every ``cfg.val_every`` epochs. With ``out_dir`` set, a CSV log and
    checkpoints (every ``cfg.checkpoint_every`` epochs, plus the final one)
    are written there.
    """
    rng = np.random.default_rng(cfg.seed)
    loss_fn = MultiSimilarityLoss(loss_cfg)
    opt = make_optimizer(model, cfg)
    ids = dataset.place_ids()
    steps_per_epoch = len(ids) // batch.places
    if steps_per_epoch < 1:
        raise ValueError(f"need at least {batch.places} training places, have {len(ids)}")
    out = Path(out_dir) if out_dir else None
    rows, val_hist = [], []
    csv_fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out / "train_log.csv", "a" if start_epoch else "w", newline="")
        writer = csv.DictWriter(csv_fh, fieldnames=LOG_FIELDS)
        if not start_epoch:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = rng.permutation(len(ids))
            for step in range(steps_per_epoch):
                chunk = [ids[j] for j in sorted(order[step * batch.places:(step + 1) * batch.places])]
                images, labels = sample_batch(dataset, batch, rng, chunk)
                loss, grads = forward_backward(model, images, labels, loss_fn)
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, step, chunk)
                opt.step(model.params, grads.params)
                if "gem.p" in model.params:
                    np.maximum(model.params["gem.p"], 1.0, out=model.params["gem.p"])
                row = {"epoch": epoch, "step": step, "loss": loss,
                       "kept_pos": loss_fn.last["kept_pos"], "kept_neg": loss_fn.last["kept_neg"],
                       "val_recall1": ""}
                last_step = step == steps_per_epoch - 1
                if last_step and validate and (epoch + 1 - start_epoch) % cfg.val_every == 0:
                    row["val_recall1"] = validate(model)
                    val_hist.append(row["val_recall1"])
                rows.append(row)
                if writer:
                    writer.writerow(row)
                if on_step:
                    on_step(row)
            log.info("epoch %d loss %.4f val %s", epoch, rows[-1]["loss"], rows[-1]["val_recall1"])
            if out and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                model.meta["epoch"] = str(epoch + 1)
                save_model(model, out / f"checkpoint_{epoch + 1:03d}.epm")
    finally:
        if csv_fh:
            csv_fh.close()
    model.meta["epoch"] = str(start_epoch + cfg.epochs)
    if out:
        save_model(model, out / "model.epm")
    return TrainResult(model, rows, val_hist, time.perf_counter() - t0)
