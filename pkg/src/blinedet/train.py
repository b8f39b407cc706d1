"""Training loop: balanced epochs, Adam, plateau LR halving and early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import CLIP_LENGTH
from .augment import AugmentationPolicy, augment
from .data import (
    SplitManifest,
    Unit,
    clip_starts,
    compute_sample_weights,
    make_epoch_schedule,
    pad_to_length,
)
from .errors import ConfigurationError, TrainingDivergedError
from .labelmap import render_label_map
from .losses import LossConfig, torch_bce, torch_seg, weighted_batch_loss
from .models import LEVELS, ModelCheckpoint, build_model
from .store import LusDataset

logger = logging.getLogger(__name__)

LEVEL_LR = {"pixel": 1e-3, "clip": 1e-4, "frame": 1e-5}
ARCH_LR = {
    "resnet18": 2e-6, "densenet121": 2e-6, "mobilenet_v2": 2e-6, "vit_tiny": 2e-6,
    "efficientnet_b0": 1e-5, "vgg16": 1e-5, "stn_cnn": 5e-5,
    # the small from-scratch frame net needs a larger step than pretrained backbones
    "tiny_frame_cnn": 1e-3,
}
LEVEL_BATCH = {"pixel": 32, "frame": 32, "clip": 4}


@dataclass
class TrainConfig:
    level: str
    arch_name: str
    learning_rate: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int | None = None
    max_epochs: int = 100
    lr_halving_patience: int = 5
    early_stop_patience: int = 10
    min_improvement: float = 1e-6
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    model_id: str | None = None
    arch_config: dict = field(default_factory=dict)
    clip_length: int = CLIP_LENGTH
    max_batches_per_epoch: int | None = None
    val_max_negatives: int | None = None
    annotator: str | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigurationError(f"unknown level {self.level!r}")
        if self.lr_halving_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be positive")
        if self.lr_halving_patience > self.early_stop_patience:
            raise ConfigurationError("lr_halving_patience must not exceed early_stop_patience")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy.from_dict(self.augmentation)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size is not None and (self.batch_size < 2 or self.batch_size % 2):
            raise ConfigurationError(f"batch_size must be even and >= 2, got {self.batch_size}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return ARCH_LR.get(self.arch_name, LEVEL_LR[self.level])

    @property
    def batch(self) -> int:
        return self.batch_size or LEVEL_BATCH[self.level]

    @property
    def name(self) -> str:
        return self.model_id or self.arch_name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learning_rate"] = self.lr
        d["batch_size"] = self.batch
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochDecision:
    improved: bool
    lr_halved: bool
    stop: bool


class PlateauSchedule:
    """Tracks validation losses: halves the LR every ``halving_patience``
    consecutive non-improving epochs and stops after ``stop_patience``.
    Stopping takes precedence over a halving due on the same epoch."""

    def __init__(self, lr: float, halving_patience: int = 5, stop_patience: int = 10,
                 min_improvement: float = 1e-6):
        self.lr = lr
        self.halving_patience = halving_patience
        self.stop_patience = stop_patience
        self.min_improvement = min_improvement
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> EpochDecision:
        if val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.bad_epochs = 0
            return EpochDecision(True, False, False)
        self.bad_epochs += 1
        if self.bad_epochs >= self.stop_patience:
            return EpochDecision(False, False, True)
        if self.bad_epochs % self.halving_patience == 0:
            self.lr /= 2.0
            return EpochDecision(False, True, False)
        return EpochDecision(False, False, False)


# ---------------------------------------------------------------------------
# units and samples
# ---------------------------------------------------------------------------

def build_units(dataset: LusDataset, video_ids: list[str], level: str,
                clip_length: int = CLIP_LENGTH, annotator: str | None = None) -> tuple[list[Unit], list[Unit]]:
    """Positive units come from annotated frames of positive videos (clips:
    windows containing at least one annotated frame); negative units are
    every frame / window of negative videos."""
    pos, neg = [], []
    for vid in video_ids:
        m = dataset.meta[vid]
        if level == "clip":
            starts = clip_starts(m.n_frames, clip_length, "training") if m.n_frames >= clip_length else [0]
            if m.label:
                annotated = sorted(dataset.annotations(vid, annotator))
                for s in starts:
                    if any(s <= t < s + clip_length for t in annotated):
                        pos.append(Unit(vid, s, True))
            else:
                neg.extend(Unit(vid, s, False) for s in starts)
        else:
            if m.label:
                pos.extend(Unit(vid, t, True) for t in sorted(dataset.annotations(vid, annotator)))
            else:
                neg.extend(Unit(vid, t, False) for t in range(m.n_frames))
    return pos, neg


def load_sample(dataset: LusDataset, unit: Unit, level: str, clip_length: int = CLIP_LENGTH,
                annotator: str | None = None):
    """Return ``(input, target)``; the target is a scalar for clip/frame and
    a uint8 label map for pixel level."""
    video = dataset.video(unit.video_id)
    ann = dataset.annotations(unit.video_id, annotator) if unit.positive else {}
    if level == "clip":
        x = pad_to_length(video.clip(unit.index, clip_length), clip_length)
        y = float(any(ann.get(t) for t in range(unit.index, unit.index + clip_length)))
        return x, y
    x = video.frame(unit.index)
    origins = ann.get(unit.index, [])
    if level == "frame":
        return x, float(len(origins) > 0)
    return x, render_label_map(origins, video.px_spacing_mm, *x.shape).grid


def _to_tensor(xs: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))


def _per_sample_loss(level: str, y: torch.Tensor, p: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if level == "pixel":
        return torch_seg(y, p, cfg)
    return torch_bce(y, p)


def _make_targets(level: str, ys: list) -> torch.Tensor:
    if level == "pixel":
        return torch.from_numpy(np.stack(ys).astype(np.float32))
    return torch.tensor(ys, dtype=torch.float32)


def validation_loss(model: torch.nn.Module, dataset: LusDataset, units: list[Unit], weights: dict,
                    cfg: TrainConfig, batch_size: int = 16) -> float:
    """Weighted loss over fixed validation units, no augmentation."""
    model.eval()
    total, wsum = 0.0, 0.0
    with torch.no_grad():
        for i in range(0, len(units), batch_size):
            chunk = units[i:i + batch_size]
            xs, ys = zip(*(load_sample(dataset, u, cfg.level, cfg.clip_length, cfg.annotator) for u in chunk))
            p = model(_to_tensor(list(xs)))
            per = _per_sample_loss(cfg.level, _make_targets(cfg.level, list(ys)), p, cfg.loss)
            w = torch.tensor([weights[(u.video_id, u.index)] for u in chunk], dtype=torch.float64)
            total += float((w * per.double()).sum())
            wsum += float(w.sum())
    return total / wsum


def _validation_units(dataset, video_ids, cfg: TrainConfig) -> tuple[list[Unit], dict]:
    pos, neg = build_units(dataset, video_ids, cfg.level, cfg.clip_length, cfg.annotator)
    cap = cfg.val_max_negatives if cfg.val_max_negatives is not None else max(len(pos), cfg.batch)
    if len(neg) > cap:
        rng = np.random.default_rng([cfg.seed, 7919])
        neg = [neg[i] for i in sorted(rng.choice(len(neg), size=cap, replace=False))]
    units = pos + neg
    if not units:
        raise ConfigurationError("validation fold yields no units")
    weights = {sw.unit_id: sw.weight for sw in compute_sample_weights(units)}
    return units, weights


EvaluateFn = Callable[[int, torch.nn.Module], float]


def train(config: TrainConfig, dataset: LusDataset, fold_index: int, split: SplitManifest | None = None,
          evaluate_fn: EvaluateFn | None = None, out_dir: str | Path | None = None) -> ModelCheckpoint:
    """Train one model with ``fold_index`` held out for validation.

    ``evaluate_fn(epoch, model)`` replaces the built-in validation loss; the
    schedule logic is unchanged, which lets tests script loss sequences.
    """
    split = split or dataset.load_split()
    train_vids = dataset.videos_of(split.train_patients(fold_index))
    val_vids = dataset.videos_of(split.val_patients(fold_index))
    pos, neg = build_units(dataset, train_vids, config.level, config.clip_length, config.annotator)
    if not pos or not neg:
        raise ConfigurationError(
            f"training folds need positive and negative units (got {len(pos)} / {len(neg)})"
        )
    weights = {sw.unit_id: sw.weight for sw in compute_sample_weights(pos + neg)}
    if evaluate_fn is None:
        val_units, val_weights = _validation_units(dataset, val_vids, config)

    seed_seq = np.random.SeedSequence([config.seed, fold_index])
    init_seed, data_seed = (int(s) for s in seed_seq.generate_state(2))
    torch.manual_seed(init_seed)
    model = build_model(config.level, config.arch_name, config.arch_config, init_seed=init_seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.adam_betas)
    sched = PlateauSchedule(config.lr, config.lr_halving_patience, config.early_stop_patience,
                            config.min_improvement)
    rng = np.random.default_rng(data_seed)
    model_id = f"{config.name}/fold{fold_index}"

    history: list[dict] = []
    best_state, best_epoch = None, None
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        lr = sched.lr
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        batches = make_epoch_schedule(pos, neg, config.batch, seed=int(rng.integers(2 ** 31)))
        if config.max_batches_per_epoch is not None:
            batches = batches[:config.max_batches_per_epoch]
        losses = []
        for b_idx, batch in enumerate(batches):
            xs, ys, ws = [], [], []
            for u in batch.units:
                x, y = load_sample(dataset, u, config.level, config.clip_length, config.annotator)
                x, lab = augment(x, y if config.level == "pixel" else None, config.augmentation, rng)
                xs.append(x)
                ys.append(lab if config.level == "pixel" else y)
                ws.append(weights[(u.video_id, u.index)])
            p = model(_to_tensor(xs))
            per = _per_sample_loss(config.level, _make_targets(config.level, ys), p, config.loss)
            loss = weighted_batch_loss(per, torch.tensor(ws))
            if not torch.isfinite(loss):
                snapshot = {"epoch": epoch, "batch": b_idx, "lr": lr, "loss": float(loss),
                            "units": [list(u) for u in batch.units]}
                _dump_snapshot(out_dir, snapshot)
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {b_idx}",
                                            snapshot)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())

        if evaluate_fn is not None:
            val = float(evaluate_fn(epoch, model))
        else:
            val = validation_loss(model, dataset, val_units, val_weights, config)
        if not math.isfinite(val):
            snapshot = {"epoch": epoch, "lr": lr, "val_loss": val}
            _dump_snapshot(out_dir, snapshot)
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", snapshot)
        decision = sched.step(val)
        if decision.improved:
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_loss": val,
            "lr": lr,
            "improved": decision.improved,
            "lr_halved": decision.lr_halved,
        })
        logger.info("%s epoch %d: train %.4f val %.4f lr %.2e%s (%.1fs)", model_id, epoch,
                    history[-1]["train_loss"] or float("nan"), val, lr,
                    " *" if decision.improved else "", time.time() - t0)
        if decision.stop:
            break

    model.load_state_dict(best_state)
    ckpt = ModelCheckpoint.from_model(model, model_id, history, fold_index, best_epoch)
    if out_dir is not None:
        ckpt.save(Path(out_dir))
    return ckpt


def _dump_snapshot(out_dir, snapshot: dict) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "divergence.json").write_text(json.dumps(snapshot, indent=2) + "\n")


def train_cv(config: TrainConfig, dataset: LusDataset, split: SplitManifest | None = None,
             out_dir: str | Path | None = None,
             train_fn: Callable[..., ModelCheckpoint] = train) -> tuple[list[ModelCheckpoint], dict[int, str]]:
    """Train one model per validation fold. Failures are recorded, not raised."""
    split = split or dataset.load_split()
    checkpoints, failures = [], {}
    for k in range(len(split.folds)):
        sub = None if out_dir is None else Path(out_dir) / config.name / f"fold{k}"
        try:
            checkpoints.append(train_fn(config, dataset, k, split=split, out_dir=sub))
        except Exception as e:  # noqa: BLE001 - one failing fold must not lose the others
            logger.error("fold %d failed: %s", k, e)
            failures[k] = f"{type(e).__name__}: {e}"
    return checkpoints, failures
