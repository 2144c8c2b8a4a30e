"""
Two-Phase Training
Phase 1 pretrains the shared front-end with each density-aware subnetwork on
its own density level; phase 2 trains the whole network jointly with
L = L_mse + lambda * L_ce, keeping the best validation-MAE state.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from padnet_model import PaDNetModel, fen_forward, padnet_forward
from tensor_core import Adam, Tensor, backward, cross_entropy_loss, mse_loss, no_grad

logger = logging.getLogger(__name__)

# lambda by how crowded the dataset is
LAMBDA_BY_PROFILE = {"dense": 1.0, "medium": 0.1, "sparse": 0.01}


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs_pretrain: int = 200
    epochs_joint: int = 200
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 1
    val_fraction: float = 0.1
    freeze_fen: bool = False
    progress: bool = True

    def validate(self) -> "TrainConfig":
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs_pretrain < 1 or self.epochs_joint < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs_pretrain}/{self.epochs_joint}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        return self


@dataclass
class PatchSet:
    """
    Training patches as arrays: images [M, C, h, w], ground truth [M, 1, h/s, w/s], levels [M].

    groups tags patches cut from the same source crop (flipped twins, balance
    duplicates); validation hold-outs never split a group. Defaults to one
    group per patch.
    """
    images: np.ndarray
    gt: np.ndarray
    levels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if not (self.images.shape[0] == self.gt.shape[0] == self.levels.shape[0]):
            raise ValueError(
                f"patch set size mismatch: {self.images.shape[0]} images, "
                f"{self.gt.shape[0]} maps, {self.levels.shape[0]} levels"
            )
        if self.groups is None:
            self.groups = np.arange(self.levels.shape[0], dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.groups.shape != self.levels.shape:
            raise ValueError(f"patch set size mismatch: {self.groups.shape[0]} group ids for {len(self)} patches")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, index: Sequence[int]) -> "PatchSet":
        index = np.asarray(index, dtype=np.int64)
        return PatchSet(self.images[index], self.gt[index], self.levels[index], self.groups[index])

    def by_level(self, N: int) -> List["PatchSet"]:
        return [self.subset(np.flatnonzero(self.levels == level)) for level in range(N)]

    @property
    def counts(self) -> np.ndarray:
        return self.gt.reshape(len(self), -1).sum(axis=1).astype(np.float64)


class TrainLog:
    """
    Per-step losses and per-epoch validation errors, optionally streamed as line-delimited JSON.
    """

    def __init__(self, path: Optional[str] = None):
        self.records: List[Dict] = []
        self.best: Dict[str, Dict] = {}
        self.path = path
        self.steps = 0
        self.level_accuracy: Optional[float] = None

    def _emit(self, record: Dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def log_step(self, phase: str, L: float, L_mse: float, L_ce: float, level: Optional[int] = None) -> None:
        record = {"phase": phase, "step": self.steps, "L": L, "L_mse": L_mse, "L_ce": L_ce}
        if level is not None:
            record["level"] = level
        self.steps += 1
        self._emit(record)

    def log_eval(self, phase: str, epoch: int, val_mae: float, val_rmse: float, level: Optional[int] = None) -> None:
        record = {"phase": phase, "step": self.steps, "epoch": epoch, "val_mae": val_mae, "val_rmse": val_rmse}
        if level is not None:
            record["level"] = level
        self._emit(record)

    def mark_best(self, key: str, epoch: int, val_mae: float) -> None:
        self.best[key] = {"epoch": epoch, "val_mae": val_mae}

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r for r in self.records if "L" in r])

    def eval_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r for r in self.records if "val_mae" in r])


def compute_loss(pred: Tensor, gt, w: Optional[Tensor], level, lam: float) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Composite objective L = L_mse + lam * L_ce.

    Args:
        pred: estimated maps [B, 1, h, w]
        gt: ground-truth maps of the same shape
        w: FEL softmax weights [B, N], or None for networks without FEL
        level: density level of every sample in the batch
        lam: weight of the cross-entropy term

    Returns:
        (L, L_mse, L_ce), all batch means
    """
    if lam > 0 and w is None:
        raise ValueError("lambda > 0 needs FEL weights, but this network has no feature enhancement layer")
    L_mse = mse_loss(pred, gt)
    if w is None:
        return L_mse, L_mse, Tensor(np.zeros((), dtype=pred.dtype))
    L_ce = cross_entropy_loss(w, level)
    if lam == 0:
        return L_mse, L_mse, L_ce
    return L_mse + L_ce * lam, L_mse, L_ce


def split_validation(levels: np.ndarray, fraction: float, seed: int,
                     groups: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Seeded per-level hold-out of whole groups.

    Each level with >= 2 groups keeps at least one group for validation;
    without groups every patch is its own group.
    """
    levels = np.asarray(levels)
    groups = np.arange(levels.shape[0]) if groups is None else np.asarray(groups)
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for level in np.unique(levels):
        members = np.flatnonzero(levels == level)
        keys = rng.permutation(np.unique(groups[members]))
        n_val = 0
        if fraction > 0 and keys.size >= 2:
            n_val = min(max(1, int(round(fraction * keys.size))), keys.size - 1)
        held = np.isin(groups[members], keys[:n_val])
        val_idx.extend(members[held].tolist())
        train_idx.extend(members[~held].tolist())
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(val_idx, dtype=np.int64))


def count_errors(estimated: np.ndarray, truth: np.ndarray) -> Tuple[float, float]:
    diff = np.asarray(estimated, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.abs(diff).mean()), float(np.sqrt((diff ** 2).mean()))


def predict_counts(model: PaDNetModel, data: PatchSet, batch_size: int = 8,
                   level: Optional[int] = None) -> np.ndarray:
    """
    Eval-mode counts per patch; with level set, counts come from that subnetwork's raw map.
    """
    was_training = model.training
    model.eval()
    counts = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            x = Tensor(data.images[start:start + batch_size])
            if level is None:
                pred, _ = padnet_forward(model, x)
            else:
                pred = model.dan[level](fen_forward(model, x))
            counts.append(pred.data.reshape(pred.shape[0], -1).sum(axis=1).astype(np.float64))
    model.train(was_training)
    return np.concatenate(counts) if counts else np.zeros(0)


def predict_level_accuracy(model: PaDNetModel, data: PatchSet, batch_size: int = 8) -> float:
    """Share of patches whose largest FEL weight points at their density level."""
    if model.fel is None:
        raise ValueError("this network has no feature enhancement layer")
    was_training = model.training
    model.eval()
    hits = 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            _, w = padnet_forward(model, Tensor(data.images[start:start + batch_size]))
            hits += int((w.data.argmax(axis=1) == data.levels[start:start + batch_size]).sum())
    model.train(was_training)
    return hits / max(len(data), 1)


@dataclass
class ResumePoint:
    """Where an interrupted phase picks up again: its next epoch and the best state seen so far."""
    level: Optional[int] = None
    epoch: int = 0
    best_mae: float = math.inf
    best_state: Optional[Dict[str, np.ndarray]] = None


def _run_phase(model: PaDNetModel, params: List, train: PatchSet, val: PatchSet, cfg: TrainConfig,
               loss_fn: Callable[[PatchSet], Tuple[Tensor, Tensor, Tensor]],
               count_fn: Callable[[PatchSet], np.ndarray], log: TrainLog, phase: str,
               level: Optional[int], seed_key: Tuple[int, ...], epochs: int,
               resume: Optional[ResumePoint] = None,
               on_epoch_end: Optional[Callable] = None) -> Tuple[Dict[str, np.ndarray], float]:
    resume = resume or ResumePoint()
    optimizer = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_mae = resume.best_mae
    best_state = resume.best_state if resume.best_state is not None else model.state_dict()
    best_key = phase if level is None else f"{phase}_level_{level}"
    iterator = tqdm(range(resume.epoch, epochs), desc=best_key, disable=not cfg.progress, leave=False)
    for epoch in iterator:
        # Per-epoch generator keeps the batch order identical across resumes
        order = np.random.default_rng([*seed_key, epoch]).permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = train.subset(order[start:start + cfg.batch_size])
            model.train()
            if cfg.freeze_fen:
                model.fen.eval()
            optimizer.zero_grad()
            L, L_mse, L_ce = loss_fn(batch)
            backward(L)
            optimizer.step()
            log.log_step(phase, L.item(), L_mse.item(), L_ce.item(), level)

        improved = False
        if (epoch + 1) % cfg.eval_every == 0 or epoch == epochs - 1:
            mae, rmse = count_errors(count_fn(val), val.counts)
            log.log_eval(phase, epoch, mae, rmse, level)
            if mae < best_mae:
                best_mae, improved = mae, True
                best_state = model.state_dict()
                log.mark_best(best_key, epoch, mae)
            iterator.set_postfix(val_mae=f"{mae:.3f}", best=f"{best_mae:.3f}")
        if on_epoch_end is not None:
            on_epoch_end(phase=phase, level=level, epoch=epoch, best_mae=best_mae, improved=improved)

    model.load_state_dict(best_state)
    logger.info(f"✅ {best_key}: best validation MAE {best_mae:.4f}")
    return best_state, best_mae


def _holdout(data: PatchSet, cfg: TrainConfig, seed: int) -> Tuple[PatchSet, PatchSet]:
    train_idx, val_idx = split_validation(data.levels, cfg.val_fraction, seed, data.groups)
    if val_idx.size == 0:
        logger.warning("⚠️ No patches held out for validation; selecting the best state on training patches")
        return data, data
    return data.subset(train_idx), data.subset(val_idx)


def pretrain_subnetworks(model: PaDNetModel, clusters: Sequence[PatchSet], cfg: TrainConfig,
                         log: Optional[TrainLog] = None, resume: Optional[ResumePoint] = None,
                         on_epoch_end: Optional[Callable] = None,
                         on_level_end: Optional[Callable[[int], None]] = None) -> List[Dict[str, np.ndarray]]:
    """
    Phase 1: train the front-end plus subnetwork j on density level j, one level after another.

    Args:
        model: network to pretrain in place
        clusters: one PatchSet per density level, index = level
        cfg: training settings (epochs_pretrain, lr, weight decay, ...)
        log: optional TrainLog receiving every step
        resume: level and epoch to continue from

    Returns:
        best state of every trained level: its front-end and subnetwork entries
    """
    cfg.validate()
    N = model.spec.N
    if len(clusters) != N:
        raise ValueError(f"expected {N} density-level subsets, got {len(clusters)}")
    for level, subset in enumerate(clusters):
        if len(subset) == 0:
            raise ValueError(f"density level {level} has no patches to pretrain on")
    log = log or TrainLog()
    start_level = resume.level if resume is not None and resume.level is not None else 0
    states: List[Dict[str, np.ndarray]] = []

    for level in range(start_level, N):
        train, val = _holdout(clusters[level], cfg, seed=cfg.seed + level)
        subnet = model.dan[level]

        def loss_fn(batch: PatchSet, subnet=subnet):
            pred = subnet(fen_forward(model, Tensor(batch.images)))
            L = mse_loss(pred, Tensor(batch.gt))
            return L, L, Tensor(np.zeros((), dtype=pred.dtype))

        def count_fn(subset: PatchSet, level=level):
            return predict_counts(model, subset, cfg.batch_size, level=level)

        params = model.level_parameters(level, include_fen=not cfg.freeze_fen)
        logger.info(f"Pretraining subnetwork {level} on {len(train)} patches ({len(val)} held out)")
        best, _ = _run_phase(model, params, train, val, cfg, loss_fn, count_fn, log, "pretrain", level,
                             seed_key=(cfg.seed, level), epochs=cfg.epochs_pretrain,
                             resume=resume if level == start_level else None, on_epoch_end=on_epoch_end)
        if level not in model.pretrained_levels:
            model.pretrained_levels.append(level)
        if on_level_end is not None:
            on_level_end(level)
        prefix = f"dan.{level}."
        states.append({k: v for k, v in best.items() if k.startswith("fen.") or k.startswith(prefix)})
    return states


def joint_train(model: PaDNetModel, data: PatchSet, cfg: TrainConfig, log: Optional[TrainLog] = None,
                resume: Optional[ResumePoint] = None,
                on_epoch_end: Optional[Callable] = None) -> Dict[str, np.ndarray]:
    """
    Phase 2: train every parameter on all patches with the composite loss.

    Nothing is frozen unless cfg.freeze_fen is set. Networks without FEL
    (N = 1 or the FEL ablation) train on L_mse alone.
    """
    cfg.validate()
    N = model.spec.N
    if sorted(model.pretrained_levels) != list(range(N)):
        logger.warning(
            f"⚠️ Joint training without pretrained subnetworks (pretrained: {sorted(model.pretrained_levels)}); "
            "starting from current parameters"
        )
    log = log or TrainLog()
    lam = cfg.lam if model.fel is not None else 0.0
    train, val = _holdout(data, cfg, seed=cfg.seed)

    def loss_fn(batch: PatchSet):
        pred, w = padnet_forward(model, Tensor(batch.images))
        return compute_loss(pred, Tensor(batch.gt), w if model.fel is not None else None, batch.levels, lam)

    def count_fn(subset: PatchSet):
        return predict_counts(model, subset, cfg.batch_size)

    params = [p for name, p in model.named_parameters() if not (cfg.freeze_fen and name.startswith("fen."))]
    logger.info(f"Joint training PaDNet-{N} on {len(train)} patches ({len(val)} held out), lambda={lam}")
    best, _ = _run_phase(model, params, train, val, cfg, loss_fn, count_fn, log, "joint", None,
                         seed_key=(cfg.seed, N, 7), epochs=cfg.epochs_joint, resume=resume,
                         on_epoch_end=on_epoch_end)
    if model.fel is not None:
        accuracy = predict_level_accuracy(model, val, cfg.batch_size)
        log.level_accuracy = accuracy
        logger.info(f"FEL picks the labelled density level for {accuracy:.1%} of held-out patches")
    return best
