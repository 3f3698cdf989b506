"""Training loop: seeded batching, Adam steps on the Soft-IoU loss, CSV
logging, best-checkpoint tracking and epoch-granular resumption."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .data import Sample, batch_tensor
from .metrics import evaluate_masks
from .network import SmallTargetNet, predict_mask
from .optim import Adam
from .tensor import Tensor, backward, no_grad, soft_iou_loss

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,step,loss,val-iou,val-pd,val-fa"


@dataclass
class TrainSettings:
    epochs: int = 30
    lr: float = 5e-4
    batch: int = 8
    seed: int = 0
    threshold: float = 0.5
    match_radius: float = 3.0


@dataclass
class TrainResult:
    best_val_iou: float
    best_epoch: int
    log_path: Path
    best_path: Path
    last_path: Path


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _snap_prototypes(model: SmallTargetNet) -> None:
    """Round live prototypes to fp32 so in-memory state matches the checkpoint."""
    for site in model.ssr_sites.values():
        for proto in site.prototypes:
            if proto.initialized:
                proto.p_mu = proto.p_mu.astype(np.float32).astype(np.float64)
                proto.p_sigma = proto.p_sigma.astype(np.float32).astype(np.float64)


def _save(model: SmallTargetNet, optimizer: Adam, epoch: int, path: Path,
          best_iou: float = -1.0, best_epoch: int = -1) -> None:
    state = model.state_dict()
    state.update(optimizer.state_arrays())
    state["meta.epoch"] = np.array([float(epoch)])
    state["meta.best_iou"] = np.array([float(best_iou)])
    state["meta.best_epoch"] = np.array([float(best_epoch)])
    save_arrays(path, state)
    _snap_prototypes(model)


def evaluate_model(model: SmallTargetNet, samples: list[Sample], threshold: float = 0.5,
                   match_radius: float = 3.0, batch: int = 8):
    """Eval-mode forward over samples; returns the metrics report."""
    preds, gts = [], []
    with no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            x, _, _ = batch_tensor(chunk, dtype=model.cfg.dtype)
            prob = model.forward(x, mode="eval")
            masks = predict_mask(prob.values, threshold)
            for j, s in enumerate(chunk):
                preds.append(masks[j, 0])
                gts.append(s.mask)
    return evaluate_masks(preds, gts, match_radius)


def train_loop(model: SmallTargetNet, train_samples: list[Sample],
               val_samples: list[Sample], settings: TrainSettings, out_dir,
               resume_from=None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_samples:
        raise ValueError("training set is empty")
    if settings.batch > len(train_samples):
        raise ValueError(
            f"batch size {settings.batch} exceeds dataset size {len(train_samples)}"
        )

    optimizer = Adam(model.named_parameters(), lr=settings.lr)
    log_path = out_dir / "train_log.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    start_epoch = 0
    best_iou = -1.0
    best_epoch = -1
    log_lines = [LOG_HEADER + "\n"]
    if resume_from is not None:
        arrays = load_arrays(resume_from)
        model.load_state_dict(arrays)
        optimizer.load_state_arrays(arrays)
        _snap_prototypes(model)
        start_epoch = int(arrays.get("meta.epoch", np.zeros(1)).reshape(-1)[0]) + 1
        best_iou = float(arrays.get("meta.best_iou", -np.ones(1)).reshape(-1)[0])
        best_epoch = int(arrays.get("meta.best_epoch", -np.ones(1)).reshape(-1)[0])
        if log_path.exists():
            log_lines = log_path.read_text().splitlines(keepends=True)
        log.info("resuming from %s at epoch %d", resume_from, start_epoch)

    global_step = start_epoch * max(1, len(train_samples) // settings.batch)
    for epoch in range(start_epoch, settings.epochs):
        rng = np.random.default_rng([settings.seed, epoch])
        order = rng.permutation(len(train_samples))
        epoch_losses = []
        for b0 in range(0, len(order) - settings.batch + 1, settings.batch):
            chunk = [train_samples[i] for i in order[b0 : b0 + settings.batch]]
            x, y, domain_ids = batch_tensor(chunk, dtype=model.cfg.dtype)
            prob = model.forward(x, mode="train", domain_ids=domain_ids)
            loss = soft_iou_loss(prob, y)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            lv = loss.item()
            epoch_losses.append(lv)
            log_lines.append(f"{epoch},{global_step},{_fmt(lv)},,,\n")
            global_step += 1

        report = evaluate_model(
            model, val_samples, settings.threshold, settings.match_radius, settings.batch
        ) if val_samples else None
        if report is not None:
            log_lines.append(
                f"{epoch},{global_step},{_fmt(np.mean(epoch_losses))},"
                f"{_fmt(report.iou)},{_fmt(report.pd)},{_fmt(report.fa)}\n"
            )
            if report.iou > best_iou:
                best_iou = report.iou
                best_epoch = epoch
                _save(model, optimizer, epoch, best_path, best_iou, best_epoch)
        _save(model, optimizer, epoch, last_path, best_iou, best_epoch)
        log_path.write_text("".join(log_lines))

    if not best_path.exists():
        _save(model, optimizer, settings.epochs - 1, best_path, best_iou, best_epoch)
    return TrainResult(
        best_val_iou=best_iou,
        best_epoch=best_epoch,
        log_path=log_path,
        best_path=best_path,
        last_path=last_path,
    )
