"""
Two-stage training: contrastive pretraining of the backbone (stage 1), then joint
few-shot training of backbone and discriminator with the backbone frozen for the
final epochs (stage 2).
"""
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader

from wsn_anomaly.data_classes import (
    AttributedGraphSample,
    BackboneConfig,
    DatasetSplit,
    GlobalConfig,
    MetricsReport,
)
from wsn_anomaly.errors import ConfigError, DivergenceError, EpisodeError, LossError, ShortageError
from wsn_anomaly.model.backbone import Backbone, samples_to_tensors
from wsn_anomaly.model.checkpoint import config_echo, restore_backbone, restore_detector, save_checkpoint
from wsn_anomaly.model.detector import AnomalyDetector
from wsn_anomaly.model.discriminator import (
    AnomalyBuffer,
    classification_losses,
    contrastive_loss_disc,
    joint_loss,
    sample_episode,
)
from wsn_anomaly.model.pretrain import pretrain_loss, pretrain_step
from wsn_anomaly.utils.utils import derive_seed, seed_everything, tensor_hash, write_jsonl

from .metrics import evaluate, majority_baseline

logger = logging.getLogger(__name__)

# Validation losses reuse one fixed RNG stream so epochs stay comparable.
VALIDATION_EPOCH = -1


@dataclass
class StageResult:
    best_path: Path
    last_path: Path
    metrics_path: Path
    history: List[dict] = field(default_factory=list)
    summary: Dict[str, dict] = field(default_factory=dict)


def bind_backbone_config(config: BackboneConfig, samples: Sequence[AttributedGraphSample]) -> BackboneConfig:
    """Fill N, M and W from the data so the model matches the dataset."""
    if not samples:
        raise ConfigError("cannot size the backbone from an empty partition")
    n, m, w = samples[0].X.shape
    return BackboneConfig.model_validate(
        {**config.model_dump(), "num_nodes": n, "num_modalities": m, "window_length": w}
    )


def make_loader(samples: Sequence[AttributedGraphSample], batch_size: int, seed: int, shuffle: bool = True) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(list(samples), batch_size=batch_size, shuffle=shuffle, generator=generator, collate_fn=list)


def labels_tensor(samples: Sequence[AttributedGraphSample]) -> torch.Tensor:
    n = samples[0].num_nodes
    return torch.as_tensor(
        np.stack([s.node_labels if s.node_labels is not None else np.full(n, -1) for s in samples]), dtype=torch.long
    )


def _metrics_header(stage: int, config: GlobalConfig, manifest_hash: str) -> dict:
    return {
        "header": True,
        "stage": stage,
        "batch_size": config.train.batch_size,
        "lr": config.train.learning_rate,
        "seed": config.train.seed,
        "manifest_hash": manifest_hash,
    }


def _adam(params, config: GlobalConfig) -> torch.optim.Adam:
    t = config.train
    return torch.optim.Adam(params, lr=t.learning_rate, betas=tuple(t.adam_betas), eps=t.adam_eps)


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(epoch, step, value)


# ---------------------------------
# Stage 1
# ---------------------------------

@torch.no_grad()
def pretrain_validation_loss(backbone: Backbone, samples: Sequence[AttributedGraphSample], config: GlobalConfig) -> Optional[float]:
    backbone.eval()
    losses = []
    size = config.train.batch_size
    for offset in range(0, len(samples), size):
        loss = pretrain_loss(samples[offset : offset + size], backbone, config.pretrain, config.train.seed, VALIDATION_EPOCH, offset)
        if loss is not None:
            losses.append(float(loss))
    return statistics.fmean(losses) if losses else None


def run_stage1(config: GlobalConfig, split: DatasetSplit, out_dir: Path, manifest_hash: str = "") -> StageResult:
    """
    Contrastive pretraining. Writes backbone_best.pt (lowest validation loss),
    backbone_last.pt and stage1_metrics.jsonl into out_dir.
    """
    out_dir = Path(out_dir)
    t = config.train
    seed_everything(t.seed)
    bc = bind_backbone_config(config.backbone, split.train)
    backbone = Backbone(bc)
    optimizer = _adam(backbone.parameters(), config)
    loader = make_loader(split.train, t.batch_size, t.seed)
    echo = config_echo(bc)

    result = StageResult(out_dir / "backbone_best.pt", out_dir / "backbone_last.pt", out_dir / "stage1_metrics.jsonl")
    write_jsonl(result.metrics_path, [_metrics_header(1, config, manifest_hash)])
    best = math.inf

    for epoch in range(1, t.stage1_epochs + 1):
        losses = []
        for step, batch in enumerate(loader):
            loss = pretrain_step(batch, backbone, optimizer, config.pretrain, t.seed, epoch, step * t.batch_size)
            if loss is None:
                continue
            _check_finite(loss, epoch, step)
            losses.append(loss)
        mean_loss = statistics.fmean(losses) if losses else float("nan")
        val_loss = pretrain_validation_loss(backbone, split.validation, config)
        if val_loss is None:
            val_loss = mean_loss
        _check_finite(val_loss, epoch, len(losses))

        record = {"epoch": epoch, "mean_loss": mean_loss, "val_loss": val_loss, "lr": t.learning_rate, "seed": t.seed}
        result.history.append(record)
        write_jsonl(result.metrics_path, [record], append=True)
        logger.info("Stage 1 epoch %d/%d: loss %.4f, validation %.4f", epoch, t.stage1_epochs, mean_loss, val_loss)

        if val_loss < best:
            best = val_loss
            save_checkpoint(result.best_path, backbone, "backbone", echo, {"epoch": epoch, "val_loss": val_loss})
        if epoch % t.save_interval == 0 or epoch == t.stage1_epochs:
            save_checkpoint(result.last_path, backbone, "backbone", echo, {"epoch": epoch, "val_loss": val_loss})

    return result


# ---------------------------------
# Stage 2
# ---------------------------------

@torch.no_grad()
def embed_partition(backbone: Backbone, samples: Sequence[AttributedGraphSample], batch_size: int = 64) -> torch.Tensor:
    backbone.eval()
    chunks = []
    for offset in range(0, len(samples), batch_size):
        X, A = samples_to_tensors(samples[offset : offset + batch_size], backbone.dtype)
        chunks.append(backbone(X, A))
    return torch.cat(chunks, dim=0)


def refresh_support(model: AnomalyDetector, samples: Sequence[AttributedGraphSample], buffer: AnomalyBuffer, seed: int) -> bool:
    """
    Draw a fresh inference support set from the training split. The live buffer is not
    modified.
    """
    embeddings = embed_partition(model.backbone, samples)
    scratch = buffer.copy()
    try:
        episode = sample_episode(embeddings, labels_tensor(samples), scratch, model.discriminator.config.shots, seed)
    except (EpisodeError, ShortageError) as exc:
        logger.warning("Support set not refreshed: %s", exc)
        return False
    model.discriminator.set_support(episode.support, episode.support_labels)
    return True


@torch.no_grad()
def evaluate_model(model: AnomalyDetector, samples: Sequence[AttributedGraphSample], batch_size: int = 64) -> MetricsReport:
    """Node-level metrics against the full ground truth; nodes with unknown truth are skipped."""
    model.eval()
    predictions, truth = [], []
    for offset in range(0, len(samples), batch_size):
        chunk = samples[offset : offset + batch_size]
        X, A = samples_to_tensors(chunk, model.dtype)
        _, labels = model(X, A)
        gt = np.stack([s.truth if s.truth is not None else np.full(s.num_nodes, -1) for s in chunk])
        known = gt >= 0
        predictions.append(labels.numpy()[known])
        truth.append(gt[known])
    if not predictions:
        return evaluate([], [])
    return evaluate(np.concatenate(predictions), np.concatenate(truth))


def freeze_backbone(model: AnomalyDetector) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model.backbone.eval()


def run_stage2(
    config: GlobalConfig,
    split: DatasetSplit,
    out_dir: Path,
    backbone_checkpoint: Optional[Path] = None,
    manifest_hash: str = "",
) -> StageResult:
    """
    Joint training with the joint loss. The backbone is frozen after
    freeze_backbone_after epochs. Writes detector_best.pt (highest validation F1),
    detector_last.pt, stage2_metrics.jsonl and stage2_summary.json.
    """
    out_dir = Path(out_dir)
    t, dc = config.train, config.discriminator
    seed_everything(t.seed)
    bc = bind_backbone_config(config.backbone, split.train)

    model = AnomalyDetector(bc, dc)
    if t.pretrain and backbone_checkpoint is not None:
        model.backbone.load_state_dict(restore_backbone(backbone_checkpoint, bc).state_dict())
        logger.info("Initialised backbone from %s", backbone_checkpoint)
    else:
        logger.info("Training backbone from scratch (pretraining disabled or no checkpoint)")

    buffer = AnomalyBuffer(dc.buffer_capacity)
    optimizer = _adam(model.parameters(), config)
    loader = make_loader(split.train, t.batch_size, t.seed)
    echo = config_echo(bc, dc)

    result = StageResult(out_dir / "detector_best.pt", out_dir / "detector_last.pt", out_dir / "stage2_metrics.jsonl")
    write_jsonl(result.metrics_path, [{**_metrics_header(2, config, manifest_hash), "omega": t.omega}])
    best_f1, best_epoch = -1.0, 0
    frozen = False

    for epoch in range(1, t.stage2_epochs + 1):
        if not frozen and epoch > t.freeze_backbone_after:
            freeze_backbone(model)
            optimizer = _adam(model.discriminator.parameters(), config)
            frozen = True
            logger.info("Backbone frozen from epoch %d", epoch)
        if not frozen:
            model.backbone.train()
        model.discriminator.train()

        losses, skipped = [], 0
        for step, batch in enumerate(loader):
            X, A = samples_to_tensors(batch, model.dtype)
            with torch.set_grad_enabled(not frozen):
                embeddings = model.backbone(X, A)
            try:
                episode = sample_episode(
                    embeddings, labels_tensor(batch), buffer, dc.shots, derive_seed(t.seed, epoch, step), f"epoch{epoch}/step{step}"
                )
                if episode.borrowed_sources:
                    logger.debug("Epoch %d step %d borrowed anomalies from %s", epoch, step, episode.borrowed_sources)
                predictions = model.discriminator.forward_episode(episode)
                ins, dis = classification_losses(predictions, episode.query_labels)
            except (EpisodeError, ShortageError, LossError) as exc:
                skipped += 1
                logger.warning("Epoch %d step %d skipped: %s", epoch, step, exc)
                continue
            if episode.positives.shape[0]:
                contrast = contrastive_loss_disc(episode.anchor, episode.positives, episode.negatives, dc.contrast_temperature)
            else:
                contrast = embeddings.new_zeros(())
            loss = joint_loss(t.omega, contrast, ins, dis)
            if not loss.requires_grad:
                skipped += 1
                continue
            _check_finite(float(loss.detach()), epoch, step)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        refresh_support(model, split.train, buffer, derive_seed(t.seed, epoch, -1))
        mean_loss = statistics.fmean(losses) if losses else float("nan")
        report = evaluate_model(model, split.validation) if bool(model.discriminator.support_ready) else None
        f1 = report.f1 if report is not None else 0.0

        record = {
            "epoch": epoch,
            "mean_loss": mean_loss,
            "val_precision": report.precision if report else 0.0,
            "val_recall": report.recall if report else 0.0,
            "val_f1": f1,
            "lr": t.learning_rate,
            "seed": t.seed,
            "frozen": frozen,
            "skipped_batches": skipped,
            "backbone_hash": tensor_hash(model.backbone.state_dict().values()),
        }
        result.history.append(record)
        write_jsonl(result.metrics_path, [record], append=True)
        logger.info(
            "Stage 2 epoch %d/%d: loss %.4f, validation P %.3f R %.3f F1 %.3f%s",
            epoch,
            t.stage2_epochs,
            mean_loss,
            record["val_precision"],
            record["val_recall"],
            f1,
            " (backbone frozen)" if frozen else "",
        )

        if report is not None and f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            save_checkpoint(result.best_path, model, "detector", echo, {"epoch": epoch, "val_f1": f1})
        if epoch % t.save_interval == 0 or epoch == t.stage2_epochs:
            save_checkpoint(result.last_path, model, "detector", echo, {"epoch": epoch, "val_f1": f1})

        if t.early_stopping_patience is not None and best_epoch:
            if epoch - best_epoch >= t.early_stopping_patience:
                logger.info("Early stopping at epoch %d (best %d)", epoch, best_epoch)
                if epoch % t.save_interval and epoch != t.stage2_epochs:
                    save_checkpoint(result.last_path, model, "detector", echo, {"epoch": epoch, "val_f1": f1})
                break

    if not result.best_path.is_file():
        save_checkpoint(result.best_path, model, "detector", echo, {"epoch": t.stage2_epochs, "val_f1": 0.0})
    result.summary = summarize(result, split)
    (out_dir / "stage2_summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True), encoding="utf-8")
    return result


def summarize(result: StageResult, split: DatasetSplit) -> Dict[str, dict]:
    """Test metrics of the best and the last checkpoint, plus the majority-class baseline."""
    summary = {}
    for name, path in (("best", result.best_path), ("last", result.last_path)):
        if path.is_file():
            summary[name] = evaluate_model(restore_detector(path), split.test).model_dump()
    truth = [s.truth for s in split.test if s.truth is not None]
    if truth:
        gt = np.concatenate(truth)
        summary["majority_baseline"] = majority_baseline(gt[gt >= 0]).model_dump()
    return summary


# ---------------------------------
# Omega sweep
# ---------------------------------

def omega_sweep(
    config: GlobalConfig,
    split: DatasetSplit,
    out_dir: Path,
    omegas: Sequence[float] = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8),
    seeds: Sequence[int] = (1, 2, 3),
    backbone_checkpoint: Optional[Path] = None,
    manifest_hash: str = "",
) -> List[dict]:
    """
    Stage 2 for every (omega, seed) cell from the same stage-1 checkpoint; one row per
    omega with mean and spread of the best-checkpoint test F1.
    """
    if len(omegas) < 2:
        raise ConfigError("an omega sweep needs at least two omega values")
    if not seeds:
        raise ConfigError("an omega sweep needs at least one seed")
    out_dir = Path(out_dir)
    rows = []
    for omega in omegas:
        scores = []
        for seed in seeds:
            train = config.train.model_copy(update={"omega": float(omega), "seed": int(seed)})
            cell = config.model_copy(update={"train": train})
            result = run_stage2(cell, split, out_dir / f"omega_{omega:g}_seed_{seed}", backbone_checkpoint, manifest_hash)
            scores.append(result.summary.get("best", {}).get("f1", 0.0))
        rows.append(
            {
                "omega": float(omega),
                "f1_mean": statistics.fmean(scores),
                "f1_std": statistics.pstdev(scores),
                "f1_values": scores,
                "seeds": list(seeds),
            }
        )
        logger.info("omega %.2f: F1 %.4f +- %.4f", omega, rows[-1]["f1_mean"], rows[-1]["f1_std"])
    write_jsonl(out_dir / "omega_sweep.jsonl", rows)
    return rows
