"""Training loop: Adam, plateau LR schedule, dual-signal checkpointing, early stopping."""
import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentationPlan, augment
from .dataio import FoldManifest, SampleRecord, holdout_split, preprocess, sample_seed, split_records
from .errors import ConfigError, DatasetError, TrainingError
from .losses import LossSettings, hybrid_loss
from .network import FUSegNet, NetworkConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_iou", "lr", "saved_flag")
VAL_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainSettings:
    initial_lr: float = 1e-4
    weight_decay: float = 1e-5
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    max_epochs: int = 200
    batch_size: int = 2
    early_stop_patience: int = 30
    seed: int = 0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        for name in ("initial_lr", "plateau_patience", "max_epochs", "batch_size", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience >= self.early_stop_patience:
            raise ConfigError("plateau_patience must be smaller than early_stop_patience")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}")

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainSettings":
        return cls(**d)


@dataclass(frozen=True)
class TrainState:
    """Schedule and stopping counters; ``reductions`` counts LR drops so far."""

    current_lr: float
    best_val_loss: float = math.inf
    best_val_iou: float = -math.inf
    epochs_since_loss_improvement: int = 0
    epochs_since_any_improvement: int = 0
    epoch: int = 0
    reductions: int = 0

    @classmethod
    def initial(cls, ts: TrainSettings) -> "TrainState":
        return cls(current_lr=ts.initial_lr)


def plateau_step(state: TrainState, val_loss: float, ts: TrainSettings) -> TrainState:
    """Reduce the LR once the validation loss has failed to improve for ``plateau_patience`` epochs."""
    if val_loss < state.best_val_loss:
        return replace(state, best_val_loss=val_loss, epochs_since_loss_improvement=0)
    bad = state.epochs_since_loss_improvement + 1
    if bad >= ts.plateau_patience:
        m = state.reductions + 1
        return replace(state, current_lr=ts.initial_lr * ts.plateau_factor ** m, reductions=m,
                       epochs_since_loss_improvement=0)
    return replace(state, epochs_since_loss_improvement=bad)


def checkpoint_decision(prev_best_loss: float, prev_best_iou: float, val_loss: float, val_iou: float) -> bool:
    return val_loss < prev_best_loss or val_iou > prev_best_iou


def early_stop_decision(epochs_since_any_improvement: int, ts: TrainSettings) -> bool:
    return epochs_since_any_improvement >= ts.early_stop_patience


def advance(state: TrainState, val_loss: float, val_iou: float, ts: TrainSettings) -> Tuple[TrainState, bool]:
    """One end-of-epoch update. Returns the new state and whether to checkpoint."""
    saved = checkpoint_decision(state.best_val_loss, state.best_val_iou, val_loss, val_iou)
    new = plateau_step(state, val_loss, ts)
    return replace(
        new,
        best_val_iou=max(state.best_val_iou, val_iou),
        epochs_since_any_improvement=0 if saved else state.epochs_since_any_improvement + 1,
        epoch=state.epoch + 1,
    ), saved


# -- checkpoints -------------------------------------------------------------------

@dataclass
class CheckpointRecord:
    model_state: Dict[str, torch.Tensor]
    epoch: int
    best_val_loss: float
    best_val_iou: float
    settings_snapshot: TrainSettings
    fold_index: Optional[int]
    net_cfg: NetworkConfig
    loss_cfg: LossSettings = field(default_factory=LossSettings)

    def metadata(self) -> Dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "best_val_iou": self.best_val_iou,
            "fold_index": self.fold_index,
            "settings": asdict(self.settings_snapshot),
            "network": asdict(self.net_cfg),
            "loss": asdict(self.loss_cfg),
        }

    def build_model(self) -> FUSegNet:
        # weights come from the checkpoint, never from the pretrained download
        model = FUSegNet(replace(self.net_cfg, pretrained=False))
        model.load_state_dict(self.model_state)
        return model.eval()


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(record: CheckpointRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(record.model_state, path)
    sidecar_path(path).write_text(json.dumps(record.metadata(), indent=2) + "\n")
    return path


def load_checkpoint(path) -> CheckpointRecord:
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.is_file():
        raise DatasetError(f"checkpoint not found: {path}")
    if not meta_path.is_file():
        raise DatasetError(f"checkpoint metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"{meta_path}: unsupported format_version {meta.get('format_version')!r}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    return CheckpointRecord(
        model_state=state,
        epoch=int(meta["epoch"]),
        best_val_loss=float(meta["best_val_loss"]),
        best_val_iou=float(meta["best_val_iou"]),
        settings_snapshot=TrainSettings(**meta["settings"]),
        fold_index=meta["fold_index"],
        net_cfg=NetworkConfig(**meta["network"]),
        loss_cfg=LossSettings(**meta.get("loss", {})),
    )


# -- training ----------------------------------------------------------------------

def _to_batch(samples: Sequence[SampleRecord], mean, std) -> Tuple[torch.Tensor, torch.Tensor]:
    xs, ys = zip(*(preprocess(s, mean, std) for s in samples))
    x = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack(ys))[:, None]
    return x, y


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _forward_batch(model: FUSegNet, samples: Sequence[SampleRecord], loss_cfg: LossSettings):
    x, y = _to_batch(samples, model.mean, model.std)
    pred = model(x)
    return pred, y, hybrid_loss(pred, y, loss_cfg)


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss ({loss.item()}) during {where}")


def train_epoch(model, optimizer, records: Sequence[SampleRecord], loss_cfg: LossSettings,
                ts: TrainSettings, plan: Optional[AugmentationPlan], epoch: int) -> float:
    model.train()
    order = np.random.default_rng([ts.seed, epoch]).permutation(len(records))
    total, n = 0.0, 0
    for idx in _batches(order, ts.batch_size):
        batch = [records[i] for i in idx]
        if plan is not None:
            batch = [augment(r, plan, sample_seed(ts.seed, r.id, epoch)) for r in batch]
        _, _, loss = _forward_batch(model, batch, loss_cfg)
        _check_finite(loss, f"training epoch {epoch}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item() * len(batch)
        n += len(batch)
    return total / n


@torch.no_grad()
def validate(model, records: Sequence[SampleRecord], loss_cfg: LossSettings,
             batch_size: int) -> Tuple[float, float]:
    """Mean hybrid loss and data-based IoU (threshold 0.5) over unaugmented samples."""
    model.eval()
    total, n = 0.0, 0
    tp = fp = fn = 0
    for batch in _batches(list(records), batch_size):
        pred, y, loss = _forward_batch(model, batch, loss_cfg)
        _check_finite(loss, "validation")
        total += loss.item() * len(batch)
        n += len(batch)
        p, g = pred >= VAL_THRESHOLD, y > 0.5
        tp += int((p & g).sum())
        fp += int((p & ~g).sum())
        fn += int((~p & g).sum())
    den = tp + fp + fn
    iou = tp / den if den else 1.0
    return total / n, iou


def train_model(train_records: Sequence[SampleRecord], val_records: Sequence[SampleRecord],
                net_cfg: NetworkConfig, loss_cfg: LossSettings = LossSettings(),
                ts: TrainSettings = TrainSettings(), plan: Optional[AugmentationPlan] = AugmentationPlan(),
                out_dir=None, fold_index: Optional[int] = None) -> CheckpointRecord:
    """Train one model and return its best checkpoint.

    With ``out_dir`` set, the best checkpoint is written to ``model.pt`` (plus
    ``model.json``) each time it changes and every epoch appends a row to
    ``log.csv``. ``plan=None`` disables augmentation.
    """
    if not train_records:
        raise DatasetError("training split is empty")
    if not val_records:
        raise DatasetError("validation split is empty")
    torch.manual_seed(ts.seed)
    model = FUSegNet(net_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=ts.initial_lr, weight_decay=ts.weight_decay)
    state = TrainState.initial(ts)
    best: Optional[CheckpointRecord] = None

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(1, ts.max_epochs + 1):
            lr = state.current_lr
            train_loss = train_epoch(model, optimizer, train_records, loss_cfg, ts, plan, epoch)
            val_loss, val_iou = validate(model, val_records, loss_cfg, ts.batch_size)
            state, saved = advance(state, val_loss, val_iou, ts)
            if saved:
                best = CheckpointRecord(copy.deepcopy(model.state_dict()), epoch, state.best_val_loss,
                                        state.best_val_iou, ts, fold_index, net_cfg, loss_cfg)
                if out_dir is not None:
                    save_checkpoint(best, out_dir / "model.pt")
            if writer is not None:
                writer.writerow([epoch, f"{train_loss:.8f}", f"{val_loss:.8f}", f"{val_iou:.8f}", f"{lr:.3e}", int(saved)])
                log_file.flush()
            log.info("epoch %d train %.4f val %.4f iou %.4f lr %.1e%s", epoch, train_loss, val_loss,
                     val_iou, lr, " *" if saved else "")
            for group in optimizer.param_groups:
                group["lr"] = state.current_lr
            if early_stop_decision(state.epochs_since_any_improvement, ts):
                log.info("early stop after epoch %d", epoch)
                break
    finally:
        if writer is not None:
            log_file.close()
    # the first epoch always improves on the infinite initial bests
    assert best is not None
    return best


def train_fold(records: Sequence[SampleRecord], manifest: FoldManifest, fold: int, net_cfg: NetworkConfig,
               loss_cfg: LossSettings = LossSettings(), ts: TrainSettings = TrainSettings(),
               plan: Optional[AugmentationPlan] = AugmentationPlan(), out_dir=None) -> CheckpointRecord:
    """Train on every fold except ``fold`` and validate on ``fold``."""
    if not records:
        raise DatasetError("dataset is empty")
    train, val = split_records(records, manifest, fold)
    return train_model(train, val, net_cfg, loss_cfg, ts, plan, out_dir, fold_index=fold)


def train_holdout(records: Sequence[SampleRecord], net_cfg: NetworkConfig,
                  loss_cfg: LossSettings = LossSettings(), ts: TrainSettings = TrainSettings(),
                  plan: Optional[AugmentationPlan] = AugmentationPlan(), out_dir=None) -> CheckpointRecord:
    """Single-model run on a random train/validation split."""
    if not records:
        raise DatasetError("dataset is empty")
    train, val = holdout_split(records, ts.holdout_fraction, ts.seed)
    return train_model(train, val, net_cfg, loss_cfg, ts, plan, out_dir)


def train_cross_validation(records: Sequence[SampleRecord], manifest: FoldManifest, net_cfg: NetworkConfig,
                           loss_cfg: LossSettings = LossSettings(), ts: TrainSettings = TrainSettings(),
                           plan: Optional[AugmentationPlan] = AugmentationPlan(),
                           out_dir=None) -> List[CheckpointRecord]:
    """One model per fold; the results form an ensemble."""
    out = []
    for fold in range(manifest.k):
        sub = None if out_dir is None else Path(out_dir) / f"fold{fold}"
        out.append(train_fold(records, manifest, fold, net_cfg, loss_cfg, ts, plan, sub))
    return out
