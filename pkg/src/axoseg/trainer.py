"""Cross-validation training and the dedicated-vs-generalist experiment.

A fold trains on random augmented patches with heavy-ball SGD under a
polynomial learning-rate decay, scores mean foreground Dice on its full
validation images after every epoch (tiled inference), and keeps the
weights of the best epoch; the final model is deliberately discarded in
favor of that checkpoint. An "epoch" is a fixed number of optimizer steps,
since a full pass is ill-defined for random patch sampling.

Per-step sampling first draws a source domain uniformly, then a sample
inside it, so large domains cannot drown small ones in aggregated
training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import datahub, infer, kernels, pipeline, unet
from .datahub import Dataset, SplitSet, aggregate
from .metrics import dice
from .errors import ConfigError, ContractViolation, DataError, TrainingDivergedError
from .infer import TilingPlan
from .unet import Model, ModelCheckpoint, Provenance, UNetConfig

LOG_COLUMNS = ["epoch", "mean_train_loss", "val_dice_axon", "val_dice_myelin", "val_dice_mean"]

# Random patches per training image per nominal epoch when steps_per_epoch
# is not pinned explicitly.
PATCHES_PER_IMAGE = 3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    patch_size: Tuple[int, int] = (256, 256)
    lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.99
    folds: int = 5
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # None: one pass over the pool (see resolve_steps)
    foreground_bias: float = 0.5
    augment: bool = True
    model: UNetConfig = field(default_factory=UNetConfig)
    val_plan: TilingPlan = field(default_factory=lambda: TilingPlan(tile=128, overlap=0.0, blend="uniform"))
    val_max_images: Optional[int] = None  # cap validation cost on big pools

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        d = self.model.spatial_divisor
        if self.patch_size[0] % d or self.patch_size[1] % d:
            raise ConfigError(
                f"patch size {self.patch_size} must be divisible by the network's "
                f"spatial divisor {d}"
            )

    def resolve_steps(self, n_train: int) -> int:
        """Optimizer steps per epoch for a training pool of ``n_train`` images.

        When steps_per_epoch is None an epoch is a nominal pass over the
        pool (PATCHES_PER_IMAGE random patches per image), so a model
        trained on an aggregated pool takes proportionally more steps per
        epoch than one trained on a single source — the two protocols stay
        comparable at equal epoch counts.
        """
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return max(1, math.ceil(PATCHES_PER_IMAGE * n_train / self.batch_size))


@dataclass
class Fold:
    index: int
    train_ids: List[str]
    val_ids: List[str]


def domain_of(sample_id: str) -> str:
    return sample_id.split("/", 1)[0]


def make_folds(train_val_pool: Sequence[str], k: int, seed: int) -> List[Fold]:
    """Partition a pool into k validation folds, stratified by domain.

    Each domain's samples are shuffled and dealt round-robin; the dealing
    cursor runs on across domains so fold sizes stay within one sample of
    each other globally as well as per domain.
    """
    pool = list(train_val_pool)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(pool):
        raise DataError(f"cannot build {k} folds from a pool of {len(pool)} samples")
    rng = np.random.default_rng(seed)
    by_domain: Dict[str, List[str]] = {}
    for sid in sorted(pool):
        by_domain.setdefault(domain_of(sid), []).append(sid)
    fold_val: List[List[str]] = [[] for _ in range(k)]
    cursor = 0
    for dom in sorted(by_domain):
        ids = by_domain[dom]
        order = rng.permutation(len(ids))
        for idx in order:
            fold_val[cursor % k].append(ids[idx])
            cursor += 1
    folds = []
    for i in range(k):
        val = fold_val[i]
        val_set = set(val)
        train = [sid for sid in pool if sid not in val_set]
        folds.append(Fold(index=i, train_ids=train, val_ids=val))
    return folds


# ---------------------------------------------------------------------------
# data access

PoolItem = Tuple[np.ndarray, np.ndarray]  # preprocessed image, one-hot target


def load_pool(datasets: Sequence[Dataset], sample_ids: Sequence[str]) -> Dict[str, PoolItem]:
    """Load and preprocess the samples backing a training pool."""
    index = {}
    for ds in datasets:
        for s in ds.samples:
            index[s.sample_id] = s
    pool: Dict[str, PoolItem] = {}
    for sid in sample_ids:
        if sid not in index:
            raise DataError(f"sample '{sid}' not found in any provided dataset")
        sample = index[sid]
        if not sample.annotated:
            raise DataError(f"sample '{sid}' has no masks; cannot train or validate on it")
        image, axon, myelin = datahub.load_sample_arrays(sample)
        pool[sid] = (pipeline.preprocess(image), pipeline.one_hot_target(axon, myelin))
    return pool


def poly_lr(step: int, total_steps: int, lr0: float, power: float) -> float:
    frac = min(step / max(total_steps, 1), 1.0)
    return lr0 * (1.0 - frac) ** power + 1e-8


def _validation_dice(model: Model, val_items: Sequence[PoolItem], plan: TilingPlan):
    ax_scores, my_scores = [], []
    for image, target in val_items:
        probs = infer.predict_tiled(model, image, plan)
        axon_pred, myelin_pred = infer.argmax_masks(probs)
        axon_gt = target[1] > 0.5
        myelin_gt = target[2] > 0.5
        ax_scores.append(dice(axon_pred, axon_gt))
        my_scores.append(dice(myelin_pred, myelin_gt))
    ax = float(np.mean(ax_scores))
    my = float(np.mean(my_scores))
    return ax, my, (ax + my) / 2.0


def train_fold(
    config: TrainConfig,
    fold: Fold,
    pool: Dict[str, PoolItem],
    dataset_ids: Optional[Sequence[str]] = None,
    log_path=None,
) -> ModelCheckpoint:
    """Train one fold and return the best-validation checkpoint.

    Best means the maximum per-epoch mean foreground Dice on the fold's
    validation images; ties resolve to the earliest epoch. A per-epoch
    training log is written to log_path when given.
    """
    config.validate()
    missing = [sid for sid in list(fold.train_ids) + list(fold.val_ids) if sid not in pool]
    if missing:
        raise DataError(f"fold references samples missing from the pool: {missing[:3]}")
    if not fold.train_ids or not fold.val_ids:
        raise DataError(f"fold {fold.index} needs non-empty train and val id lists")

    ss = np.random.SeedSequence(config.seed, spawn_key=(fold.index,))
    sample_seq, model_seq = ss.spawn(2)
    rng = np.random.default_rng(sample_seq)
    model_seed = int(model_seq.generate_state(1)[0])
    model = unet.build(replace(config.model, seed=model_seed))

    by_domain: Dict[str, List[str]] = {}
    for sid in fold.train_ids:
        by_domain.setdefault(domain_of(sid), []).append(sid)
    domains = sorted(by_domain)
    if dataset_ids is None:
        dataset_ids = domains

    val_ids = list(fold.val_ids)
    if config.val_max_images is not None:
        val_ids = val_ids[: config.val_max_images]
    val_items = [pool[sid] for sid in val_ids]

    velocities: Dict[str, np.ndarray] = {}
    steps_per_epoch = config.resolve_steps(len(fold.train_ids))
    total_steps = config.epochs * steps_per_epoch
    best_metric = -1.0
    best_epoch = -1
    best_state: Dict[str, np.ndarray] = {}
    log_rows = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for s in range(steps_per_epoch):
            images, targets = [], []
            for _ in range(config.batch_size):
                dom = domains[rng.integers(len(domains))]
                sid = by_domain[dom][rng.integers(len(by_domain[dom]))]
                img, tgt = pool[sid]
                p_img, p_tgt = pipeline.sample_patch(
                    img, tgt, config.patch_size, rng, foreground_bias=config.foreground_bias
                )
                if config.augment:
                    p_img, p_tgt = pipeline.augment(p_img, p_tgt, rng)
                images.append(p_img)
                targets.append(p_tgt)
            x = np.stack(images)[:, None, :, :]
            t = np.stack(targets)
            model.zero_grads()
            logits = model.forward(x, train=True)
            loss, grad = kernels.dice_ce_loss(logits, t)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {s + 1} (fold {fold.index})"
                )
            model.backward(grad.data)
            lr = poly_lr(step, total_steps, config.lr, config.poly_power)
            try:
                kernels.sgd_step(model.named_params(), lr, config.momentum, velocities)
            except ContractViolation as e:
                raise TrainingDivergedError(
                    f"epoch {epoch}, step {s + 1} (fold {fold.index}): {e}"
                ) from e
            losses.append(loss)
            step += 1
        ax, my, mean_fg = _validation_dice(model, val_items, config.val_plan)
        log_rows.append(
            {
                "epoch": epoch,
                "mean_train_loss": float(np.mean(losses)),
                "val_dice_axon": ax,
                "val_dice_myelin": my,
                "val_dice_mean": mean_fg,
            }
        )
        if mean_fg > best_metric:
            best_metric = mean_fg
            best_epoch = epoch
            best_state = {
                name: arr.astype(np.float32, copy=True)
                for name, arr in model.state_dict().items()
            }

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(log_rows)

    model.load_state(best_state)
    provenance = Provenance(
        dataset_ids=sorted(dataset_ids),
        fold_index=fold.index,
        seed=config.seed,
        train_sample_ids=sorted(fold.train_ids),
    )
    ckpt = unet.checkpoint_from_model(
        model, epoch=best_epoch, best_val_metric=min(max(best_metric, 0.0), 1.0),
        provenance=provenance,
    )
    ckpt.log_rows = log_rows  # runtime attribute for callers that inspect curves
    return ckpt


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class ExperimentPlan:
    mode: str  # "dedicated" or "generalist"
    config: TrainConfig

    def __post_init__(self):
        if self.mode not in ("dedicated", "generalist"):
            raise ConfigError(f"unknown experiment mode '{self.mode}'")


GENERALIST_NAME = "generalist"


def run_experiment(
    plan: ExperimentPlan,
    datasets: Sequence[Dataset],
    splits: Sequence[SplitSet],
    out_dir=None,
) -> Dict[str, List[ModelCheckpoint]]:
    """Train the plan's models: one k-fold group per source when dedicated,
    a single k-fold group on the aggregation when generalist. Returns
    {model name: fold checkpoints}; artifacts land under out_dir if given."""
    if len(datasets) != len(splits):
        raise ConfigError("need one split per dataset")
    out = Path(out_dir) if out_dir is not None else None
    results: Dict[str, List[ModelCheckpoint]] = {}

    def train_group(name: str, pool_ids: List[str], dataset_ids: Sequence[str]):
        pool = load_pool(datasets, pool_ids)
        folds = make_folds(pool_ids, plan.config.folds, plan.config.seed)
        group = []
        group_dir = None
        if out is not None:
            group_dir = out / name
            group_dir.mkdir(parents=True, exist_ok=True)
        for fold in folds:
            log_path = group_dir / f"fold{fold.index}_log.csv" if group_dir else None
            ckpt = train_fold(plan.config, fold, pool, dataset_ids=dataset_ids, log_path=log_path)
            if group_dir is not None:
                unet.save_checkpoint(ckpt, group_dir / f"fold{fold.index}.ckpt")
            group.append(ckpt)
        results[name] = group

    if plan.mode == "dedicated":
        for ds, ss in zip(datasets, splits):
            train_group(ds.id, ss.train + ss.val, [ds.id])
    else:
        agg = aggregate(splits)
        train_group(GENERALIST_NAME, agg.train + agg.val, agg.sources)
    return results
