"""End-to-end training: Adam with linear warmup + cosine annealing, per-epoch
validation, best-only checkpointing, and deterministic batch preparation.

Batches are whole scans, padded to the longest scan in the batch. The loss is
a class-weighted binary cross-entropy computed only at label-masked valid
positions, normalized by the count of valid slices, so padding contributes
exactly zero. Fixing the seed fixes weight init, batch order, and every
augmentation draw, which makes runs bit-reproducible on one device.
"""

from __future__ import annotations

import csv
import math
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from torch.nn import functional as F

from . import metrics
from .augmentation import augment_scan, cutmix_scan_batch
from .config import RunConfig, TrainConfig, build_run_config, resolved_dict
from .errors import ConfigError, DataError, NonFiniteLossError
from .ingest import assemble_study, group_by_study, load_manifest, resolve_raw_paths
from .metrics import LossWeights, MetricReport
from .model import ModelConfig, SequenceBatch, SliceSequenceModel, build_model, collate_scans
from .windowing import stack_windows

HISTORY_FIELDS = ("epoch", "step", "lr", "train_loss", "val_loss", "timestamp")


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Learning rate at a 0-based optimization step.

    Linear ramp 0 -> peak_lr over the warmup steps, then half-cosine decay
    from peak_lr down to eta_min at total_steps. Both branches give peak_lr
    at the junction.
    """
    warmup = cfg.warmup_steps or 0
    if total_steps <= warmup:
        raise ConfigError(f"total_steps ({total_steps}) must exceed warmup_steps ({warmup})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.eta_min + 0.5 * (cfg.peak_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# data pipeline: manifest -> windowed scan arrays -> padded batches


class ScanDataset:
    """Loads scans from a manifest and serves windowed [0,1] image stacks.

    HU volumes are cached in memory after the first load; all outputs are
    deterministic functions of the manifest and config.
    """

    def __init__(self, manifest_path: str | Path, run_cfg: RunConfig, require_labels: bool = False):
        records = resolve_raw_paths(load_manifest(manifest_path), manifest_path)
        if not records:
            raise DataError(f"manifest {manifest_path} is empty")
        self.manifest_path = Path(manifest_path)
        self.run_cfg = run_cfg
        self.studies = group_by_study(records)
        self.study_ids = list(self.studies)
        if require_labels:
            unlabeled = [r.slice_id for recs in self.studies.values() for r in recs if r.labels is None]
            if unlabeled:
                raise DataError(
                    f"manifest {manifest_path} has {len(unlabeled)} unlabeled slices "
                    f"(first: {unlabeled[0]}); labels are required here"
                )
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.study_ids)

    @property
    def n_slices(self) -> int:
        return sum(len(recs) for recs in self.studies.values())

    def slice_ids(self, study_id: str) -> list[str]:
        return [r.slice_id for r in self.studies[study_id]]

    def scan_arrays(self, study_id: str) -> tuple[np.ndarray, np.ndarray | None]:
        """One scan as (images (S,3,H,W) float32 in [0,1], labels (S,6) float32 or None)."""
        if study_id not in self._cache:
            volume = assemble_study(self.studies[study_id])
            target_h, target_w = self.run_cfg.model.input_size
            channels = []
            for hu in volume.slices:
                img = stack_windows(hu, self.run_cfg.windows).astype(np.float32)
                if img.shape[1:] != (target_h, target_w):
                    hwc = cv2.resize(
                        np.moveaxis(img, 0, -1), (target_w, target_h), interpolation=cv2.INTER_LINEAR
                    )
                    img = np.moveaxis(hwc, -1, 0)
                channels.append(img)
            self._cache[study_id] = np.stack(channels, axis=0)
        images = self._cache[study_id]
        records = self.studies[study_id]
        if all(r.labels is not None for r in records):
            labels = np.array([r.labels for r in records], dtype=np.float32)
        else:
            labels = None
        return images, labels


def _apply_channel_norm(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.channel_norm is None:
        return images
    mean, std = cfg.channel_norm
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (images - mean) / std


def make_batch(
    dataset: ScanDataset,
    study_ids: list[str],
    scans: list[tuple[np.ndarray, np.ndarray | None]] | None = None,
) -> SequenceBatch:
    """Normalize and pad scans into a SequenceBatch (scans override dataset arrays when given)."""
    if scans is None:
        scans = [dataset.scan_arrays(sid) for sid in study_ids]
    normed = [(_apply_channel_norm(imgs, dataset.run_cfg.model), labs) for imgs, labs in scans]
    return collate_scans(normed, study_ids=study_ids)


def iter_eval_batches(dataset: ScanDataset, batch_size: int):
    ids = dataset.study_ids
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        yield make_batch(dataset, chunk)


# ---------------------------------------------------------------------------
# loss


def masked_weighted_bce(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights | None = None,
) -> torch.Tensor:
    """Class-weighted BCE over valid positions only.

    loss = sum_c w_c * (1/N) * sum_{valid i} bce(z_ic, y_ic) with
    N = number of valid slices, so d loss / d z_ic = w_c * (sigmoid(z) - y) / N
    at valid positions and exactly 0 at padded ones.
    """
    weights = weights or LossWeights()
    w = torch.as_tensor(weights.as_array(), dtype=logits.dtype, device=logits.device)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    bce = bce * mask.unsqueeze(-1)
    n_valid = mask.sum()
    per_class = bce.sum(dim=(0, 1)) / n_valid
    return (w * per_class).sum()


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    rng_states: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    model: SliceSequenceModel,
    run_cfg: RunConfig,
    state: TrainState,
) -> None:
    """Atomic write: serialize to a temp file in the same directory, then rename."""
    path = Path(path)
    # tensors go in as numpy arrays: pickling torch tensors directly embeds a
    # memory-address storage key, which would make equal checkpoints differ byte-wise
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": resolved_dict(run_cfg),
        "model_state": {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()},
        "epoch": state.epoch,
        "best_val_loss": state.best_val_loss,
        "best_epoch": state.best_epoch,
        "seed": run_cfg.train.seed,
        "rng_states": {
            k: (v.numpy() if isinstance(v, torch.Tensor) else v)
            for k, v in state.rng_states.items()
        },
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        pickle.dump(payload, f, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[SliceSequenceModel, RunConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        payload = pickle.load(f)
    run_cfg = build_run_config(payload["config"])
    model = build_model(run_cfg.model)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in payload["model_state"].items()})
    model.eval()
    return model, run_cfg, payload


# ---------------------------------------------------------------------------
# evaluation


def _gather_predictions(
    model: SliceSequenceModel, dataset: ScanDataset, batch_size: int
) -> tuple[np.ndarray, np.ndarray | None, list[str], list[str]]:
    """Run the model over a dataset; returns (probs N×6, targets N×6 or None, slice_ids, study_of_slice)."""
    model.eval()
    probs_rows, target_rows, slice_ids, study_of_slice = [], [], [], []
    have_labels = True
    for batch in iter_eval_batches(dataset, batch_size):
        probs = model.predict_proba(batch)
        for i, sid in enumerate(batch.study_ids):
            n = int(batch.lengths[i].item())
            probs_rows.append(probs[i, :n].numpy())
            slice_ids.extend(dataset.slice_ids(sid))
            study_of_slice.extend([sid] * n)
            _, labels = dataset.scan_arrays(sid)
            if labels is None:
                have_labels = False
            else:
                target_rows.append(labels)
    preds = np.concatenate(probs_rows, axis=0).astype(np.float64)
    targets = np.concatenate(target_rows, axis=0).astype(np.float64) if have_labels else None
    return preds, targets, slice_ids, study_of_slice


def evaluate_model(model: SliceSequenceModel, dataset: ScanDataset, batch_size: int) -> MetricReport:
    preds, targets, _, _ = _gather_predictions(model, dataset, batch_size)
    if targets is None:
        raise DataError("evaluation requires a labeled manifest")
    return metrics.compute_report(preds, targets, n_scans=len(dataset))


def validate(checkpoint_path: str | Path, manifest_path: str | Path, batch_size: int = 4) -> MetricReport:
    """Deterministic slice-level metrics for a checkpoint on a labeled manifest."""
    model, run_cfg, _ = load_checkpoint(checkpoint_path)
    dataset = ScanDataset(manifest_path, run_cfg, require_labels=True)
    return evaluate_model(model, dataset, batch_size)


def predict(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    level: str,
    out_path: str | Path,
    batch_size: int = 4,
) -> Path:
    """Write predictions at slice level (challenge long format) or scan level (max-aggregated)."""
    if level not in ("slice", "scan"):
        raise ConfigError(f"prediction level must be 'slice' or 'scan', got {level!r}")
    model, run_cfg, _ = load_checkpoint(checkpoint_path)
    dataset = ScanDataset(manifest_path, run_cfg)
    preds, _, slice_ids, study_of_slice = _gather_predictions(model, dataset, batch_size)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if level == "slice":
        metrics.write_slice_predictions(out_path, slice_ids, preds)
    else:
        study_ids = list(dict.fromkeys(study_of_slice))
        rows = []
        for sid in study_ids:
            idx = [i for i, s in enumerate(study_of_slice) if s == sid]
            rows.append(metrics.aggregate_scan(preds[idx]))
        metrics.write_scan_predictions(out_path, study_ids, np.stack(rows, axis=0))
    return out_path


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    history_path: Path
    history: list[dict]
    best_val_loss: float
    best_epoch: int


def _append_history(path: Path, row: dict) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        if new_file:
            writer.writeheader()
        writer.writerow(row)


def train(
    run_cfg: RunConfig,
    train_manifest: str | Path,
    val_manifest: str | Path,
    out_dir: str | Path,
    epoch_callback=None,
) -> TrainResult:
    """Full training run; checkpoints the best-validation model into out_dir.

    ``epoch_callback(epoch, history_row, checkpoint_path)`` is invoked after
    each epoch, mainly as a test/inspection hook.
    """
    cfg = run_cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.bin"
    history_path = out_dir / "history.csv"
    if history_path.exists():
        history_path.unlink()

    train_ds = ScanDataset(train_manifest, run_cfg, require_labels=True)
    val_ds = ScanDataset(val_manifest, run_cfg, require_labels=True)

    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size_scans)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else steps_per_epoch
    sched_cfg = TrainConfig(**{**cfg.__dict__, "warmup_steps": warmup})
    lr_at(0, sched_cfg, total_steps)  # fail fast on warmup >= total

    torch.manual_seed(cfg.seed)
    model = build_model(run_cfg.model)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
    )
    weights = LossWeights()

    state = TrainState()
    history: list[dict] = []
    last_grad_norm = float("nan")
    clip_norm = cfg.grad_clip_norm if cfg.grad_clip_norm is not None else float("inf")

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = [train_ds.study_ids[i] for i in order_rng.permutation(len(train_ds))]
        epoch_loss_sum, epoch_valid = 0.0, 0
        last_lr = 0.0

        for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size_scans)):
            chunk = order[start : start + cfg.batch_size_scans]
            aug_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, run_cfg.augment.seed, epoch, batch_idx])
            )
            scans = []
            for sid in chunk:
                images, labels = train_ds.scan_arrays(sid)
                scans.append((augment_scan(images, run_cfg.augment, aug_rng), labels))
            batch = make_batch(train_ds, chunk, scans=scans)

            images, labels = batch.images, batch.labels
            if len(chunk) >= 2 and aug_rng.random() < run_cfg.augment.cutmix_prob:
                mixed_imgs, mixed_labels, _ = cutmix_scan_batch(
                    images.numpy(),
                    labels.numpy(),
                    batch.label_mask.numpy(),
                    run_cfg.augment.cutmix_alpha,
                    aug_rng,
                )
                images = torch.from_numpy(mixed_imgs)
                labels = torch.from_numpy(mixed_labels)

            logits = model.sequence_head(model.extract_features(images, batch.lengths), batch.lengths)
            loss = masked_weighted_bce(logits, labels, batch.label_mask, weights)
            last_lr = lr_at(state.global_step, sched_cfg, total_steps)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()} at epoch {epoch} step {state.global_step}",
                    diagnostics={
                        "epoch": epoch,
                        "global_step": state.global_step,
                        "batch_study_ids": chunk,
                        "lr": last_lr,
                        "last_grad_norm": last_grad_norm,
                    },
                )
            optimizer.zero_grad()
            loss.backward()
            last_grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm))
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            optimizer.step()
            state.global_step += 1
            n_valid = batch.n_valid
            epoch_loss_sum += float(loss.item()) * n_valid
            epoch_valid += n_valid

        val_report = evaluate_model(model, val_ds, cfg.batch_size_scans)
        model.train()
        state.epoch = epoch
        if val_report.weighted_log_loss < state.best_val_loss:
            state.best_val_loss = val_report.weighted_log_loss
            state.best_epoch = epoch
            state.rng_states = {
                "torch": torch.get_rng_state(),
                "seed": cfg.seed,
            }
            save_checkpoint(checkpoint_path, model, run_cfg, state)

        row = {
            "epoch": epoch,
            "step": state.global_step,
            "lr": repr(last_lr),
            "train_loss": repr(epoch_loss_sum / epoch_valid),
            "val_loss": repr(val_report.weighted_log_loss),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        _append_history(history_path, row)
        history.append(row)
        if epoch_callback is not None:
            epoch_callback(epoch, row, checkpoint_path)

    return TrainResult(
        checkpoint_path=checkpoint_path,
        history_path=history_path,
        history=history,
        best_val_loss=state.best_val_loss,
        best_epoch=state.best_epoch,
    )
