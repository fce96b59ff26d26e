"""Minibatch training with validation NDCG@10 early stopping."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autograd import NumericError
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import evaluate
from .losses import LossSpec
from .model import ModelConfig, SASRec, TabularScores, make_training_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 100
    early_stop_patience_epochs: int = 200
    eval_every_epochs: int = 1
    seed: int = 0
    save_checkpoints: bool = True  # per-epoch files; best.bin is always written

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.early_stop_patience_epochs < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_every_epochs < 1:
            raise ValueError("batch_size, max_epochs and eval_every_epochs must be >= 1")


class Adam:
    def __init__(self, params: Dict, lr: float, beta1: float, beta2: float, eps: float):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Dict, lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(params, cfg.lr)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ndcg10: float
    wall_time: float
    clamp_count: int
    clamp_rate: float
    positives: int = 0


@dataclass
class TrainRecord:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ndcg10: float = -math.inf
    best_checkpoint: Optional[str] = None
    stop_reason: str = ""

    @property
    def total_clamped(self) -> int:
        return sum(e.clamp_count for e in self.epochs)

    @property
    def total_positives(self) -> int:
        return sum(e.positives for e in self.epochs)

    @property
    def clamp_rate(self) -> float:
        return self.total_clamped / self.total_positives if self.total_positives else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_ndcg10", "wall_time", "clamp_count", "clamp_rate", "positives"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.10g}", f"{e.val_ndcg10:.10g}", f"{e.wall_time:.3f}",
                            e.clamp_count, f"{e.clamp_rate:.6g}", e.positives])


@dataclass
class TrainResult:
    model: object
    record: TrainRecord
    run_dir: Optional[Path] = None


def _check_finite(params, what: str, epoch: int, get) -> None:
    for name, t in params.items():
        arr = get(t)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"non-finite {what} in {name} at epoch {epoch}")


def _checkpoint_header(model, loss_spec: LossSpec, cfg: TrainConfig, epoch: int, ndcg: float) -> dict:
    return {"model_config": model.config.to_dict(), "n_items": model.n_items, "seed": cfg.seed,
            "epoch": epoch, "val_ndcg10": ndcg,
            "loss": {"kind": loss_spec.kind, "k": loss_spec.k, "t": loss_spec.t}}


def train(split, model_config: Optional[ModelConfig], loss_spec: LossSpec, train_config: TrainConfig,
          run_dir=None, model=None, evaluator=None) -> TrainResult:
    """Train until ``max_epochs`` or until validation NDCG@10 has not improved
    for ``early_stop_patience_epochs`` epochs; the returned model holds the
    best-validation parameters.  ``evaluator(model) -> float`` overrides the
    validation metric (used by the synthetic tabular task)."""
    cfg = train_config
    if split.n_items < 2:
        raise ValueError("catalog must contain at least 2 items")
    if model is None:
        model = SASRec(split.n_items, model_config or ModelConfig(), seed=cfg.seed)
    shuffle_rng, neg_rng, drop_rng = (np.random.default_rng(s)
                                      for s in np.random.SeedSequence(cfg.seed).spawn(3))
    opt = make_optimizer(model.params, cfg)
    users = sorted(u for u, s in split.train.users.items() if len(s) >= 2)
    if not users:
        raise ValueError("no user has a training sequence of length >= 2")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if evaluator is None:
        evaluator = lambda m: float(evaluate(m, split, "validation", loss_kind=loss_spec.kind)
                                    .metric("NDCG@10").mean())

    record = TrainRecord()
    best_state = model.state()
    since_best = 0
    L = model.config.max_seq_len
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        loss_spec.stats.reset()
        order = shuffle_rng.permutation(len(users))
        losses, weights = [], []
        for b in range(0, len(order), cfg.batch_size):
            seqs = [split.train.users[users[i]] for i in order[b:b + cfg.batch_size]]
            batch = make_training_batch(seqs, L)
            try:
                value = model.training_loss(batch, loss_spec, neg_rng, drop_rng)
                value.backward()
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch {b // cfg.batch_size}: {exc}; clamped "
                    f"{loss_spec.stats.clamped}/{loss_spec.stats.positives} positive terms") from exc
            if not math.isfinite(value.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            _check_finite(model.params, "gradient", epoch, lambda t: t.grad)
            opt.step()
            _check_finite(model.params, "parameter", epoch, lambda t: t.data)
            losses.append(value.item())
            weights.append(int(batch.mask.sum()))
        train_loss = float(np.average(losses, weights=weights))
        ndcg = math.nan
        if epoch % cfg.eval_every_epochs == 0 or epoch == cfg.max_epochs:
            try:
                ndcg = evaluator(model)
            except NumericError as exc:
                raise TrainingDivergedError(f"epoch {epoch} validation: {exc}") from exc
            if ndcg > record.best_val_ndcg10:
                record.best_val_ndcg10, record.best_epoch = ndcg, epoch
                best_state = model.state()
                since_best = 0
            else:
                since_best += cfg.eval_every_epochs
            if run_dir is not None and cfg.save_checkpoints:
                path = run_dir / "checkpoints" / f"epoch_{epoch}.bin"
                save_checkpoint(path, model.state(), _checkpoint_header(model, loss_spec, cfg, epoch, ndcg))
                if record.best_epoch == epoch:
                    shutil.copyfile(path, run_dir / "best.bin")
                    record.best_checkpoint = str(run_dir / "best.bin")
        record.epochs.append(EpochRecord(epoch, train_loss, ndcg, time.perf_counter() - start,
                                         loss_spec.stats.clamped, loss_spec.stats.rate(),
                                         loss_spec.stats.positives))
        log.info("epoch %d loss %.5f val NDCG@10 %.4f clamped %d (%.1fs)", epoch, train_loss, ndcg,
                 loss_spec.stats.clamped, record.epochs[-1].wall_time)
        if since_best >= cfg.early_stop_patience_epochs:
            record.stop_reason = f"no validation improvement for {since_best} epochs"
            break
    else:
        record.stop_reason = "max_epochs reached"
    model.load_state(best_state)
    if run_dir is not None:
        record.to_csv(run_dir / "train_record.csv")
        if record.best_checkpoint is None:
            save_checkpoint(run_dir / "best.bin", best_state,
                            _checkpoint_header(model, loss_spec, cfg, record.best_epoch, record.best_val_ndcg10))
            record.best_checkpoint = str(run_dir / "best.bin")
        (run_dir / "train_summary.json").write_text(json.dumps(
            {"best_epoch": record.best_epoch, "best_val_ndcg10": record.best_val_ndcg10,
             "stop_reason": record.stop_reason, "total_clamped": record.total_clamped,
             "total_positives": record.total_positives, "clamp_rate": record.clamp_rate,
             "train_config": asdict(cfg)}, indent=1))
    return TrainResult(model, record, run_dir)


def load_model(path):
    """Rebuild a model from a checkpoint file; returns (model, header)."""
    state, header = load_checkpoint(path)
    if "item_logit" in state:
        model = TabularScores(header["n_items"])
    else:
        model = SASRec(header["n_items"], ModelConfig(**header["model_config"]))
    model.load_state(state)
    return model, header
