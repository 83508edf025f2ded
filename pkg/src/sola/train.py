"""Training loops (supervised and weakly supervised) and evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample, load_dataset
from .metrics import EvalReport
from .model import BackboneSpec, ConfigurationError, ModelFlags, SolaModel, build, save_checkpoint
from .supervision import AnomalyGroundTruth, LossWeights, anomaly_ground_truth, single_side_loss, supervised_loss

logger = logging.getLogger(__name__)

ENV_PREFIX = "SOLA_"

MODES = ("sup", "weakly-sup")


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; serialized next to checkpoints."""

    mode: str = "weakly-sup"
    train_dir: str = ""
    eval_dir: str = ""
    out_dir: str = "runs/run"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    backbone: str = "tiny"
    grid: int = 16
    stages_used: int = 3
    input_size: int = 256
    use_noise_branch: bool = True
    use_lem: bool = True
    constraint_mode: str = "asrm"
    noise_consumes_fused: bool = False
    seed: int = 0
    deterministic: bool = False
    save_filters: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.betas = tuple(self.betas)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(
            family=self.backbone,
            stages_used=self.stages_used,
            grid=self.grid,
            input_size=self.input_size,
        )

    def model_flags(self) -> ModelFlags:
        return ModelFlags(
            use_noise_branch=self.use_noise_branch,
            use_lem=self.use_lem,
            constraint_mode=self.constraint_mode,
            noise_consumes_fused=self.noise_consumes_fused,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path, apply_env: bool = True) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        cfg = cls.from_dict(raw)
        return apply_env_overrides(cfg) if apply_env else cfg


def apply_env_overrides(cfg: RunConfig) -> RunConfig:
    """Override any config field from SOLA_<FIELD> environment variables."""
    updates = {}
    for f in dataclasses.fields(cfg):
        raw = os.environ.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        if f.type in ("int",):
            updates[f.name] = int(raw)
        elif f.type in ("float",):
            updates[f.name] = float(raw)
        elif f.type in ("bool",):
            updates[f.name] = raw.lower() in ("1", "true", "yes", "on")
        elif f.name == "betas":
            updates[f.name] = tuple(float(v) for v in raw.split(","))
        else:
            updates[f.name] = raw
    return dataclasses.replace(cfg, **updates) if updates else cfg


@dataclass
class PackedDataset:
    """In-memory dataset: uint8 images plus labels and optional ground truth."""

    images: torch.Tensor
    labels: torch.Tensor
    ground_truth: list[AnomalyGroundTruth] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch_images(self, idx) -> torch.Tensor:
        return self.images[idx].to(torch.float32) / 255.0


def pack_samples(samples, with_ground_truth: bool = False, patch_pixels: int = 16) -> PackedDataset:
    images, labels, gts = [], [], []
    for s in samples:
        images.append(torch.from_numpy((s.image * 255).round().astype(np.uint8)).permute(2, 0, 1))
        labels.append(float(s.label))
        if with_ground_truth:
            if s.label == 1 and s.mask is None:
                raise ConfigurationError(
                    f"supervised mode needs masks for every fake; {s.name} has none"
                )
            mask = s.mask if s.mask is not None else np.zeros(s.image.shape[:2], dtype=np.uint8)
            gts.append(anomaly_ground_truth(mask, patch_pixels))
    if not images:
        raise ConfigurationError("dataset is empty")
    return PackedDataset(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.float32),
        ground_truth=gts if with_ground_truth else None,
    )


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_path: Path
    best_auc: float
    epoch_eval_aucs: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _batch_loss(model: SolaModel, cfg: RunConfig, images, labels, gts):
    maps, logits = model(images)
    w = cfg.loss_weights()
    if cfg.mode == "sup":
        loss = supervised_loss(maps.first_order, maps.second_order, gts, logits, labels, w)
        cls = F.binary_cross_entropy_with_logits(logits.reshape(-1), labels)
        parts = {"loss_cls": cls.item()}
    else:
        cls = F.binary_cross_entropy_with_logits(logits.reshape(-1), labels)
        side = single_side_loss(maps.first_order, maps.second_order, labels, w)
        loss = w.alpha * cls + side
        parts = {"loss_cls": cls.item(), "loss_single_side": side.item()}
    return loss, logits, parts


def train(cfg: RunConfig, on_step=None, on_epoch=None) -> TrainResult:
    """Run one training job; returns checkpoint and metric locations.

    ``on_step(model, step)`` fires after each optimizer update and
    constraint projection; ``on_epoch(model, epoch, eval_auc)`` after each
    epoch's evaluation.
    """
    started = time.time()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)

    train_set = pack_samples(
        load_dataset(cfg.train_dir),
        with_ground_truth=cfg.mode == "sup",
        patch_pixels=cfg.input_size // cfg.grid,
    )
    eval_set = pack_samples(load_dataset(cfg.eval_dir)) if cfg.eval_dir else None

    model = build(cfg.backbone_spec(), cfg.model_flags(), seed=cfg.seed)
    logger.info("model built: %d parameters", model.parameter_count())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)

    metrics_path = out_dir / "metrics.jsonl"
    cfg_hash = cfg.config_hash()
    filters_dir = out_dir / "filters"
    if cfg.save_filters:
        filters_dir.mkdir(exist_ok=True)
        np.save(filters_dir / "epoch_000.npy", model.asrm.weight.detach().numpy())

    rng = np.random.default_rng(cfg.seed)
    best_auc, best_path = -1.0, out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    epoch_aucs = []
    step = 0
    with metrics_path.open("a") as metrics:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(train_set))
            epoch_scores, epoch_labels, epoch_losses = [], [], []
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
                images = train_set.batch_images(idx)
                labels = train_set.labels[idx]
                gts = [train_set.ground_truth[i] for i in idx.tolist()] if cfg.mode == "sup" else None
                loss, logits, parts = _batch_loss(model, cfg, images, labels, gts)
                opt.zero_grad()
                loss.backward()
                opt.step()
                model.asrm.project()
                record = {
                    "config_hash": cfg_hash,
                    "epoch": epoch,
                    "step": step,
                    "loss": loss.item(),
                    **parts,
                }
                metrics.write(json.dumps(record) + "\n")
                epoch_losses.append(loss.item())
                epoch_scores.extend(torch.sigmoid(logits.detach()).reshape(-1).tolist())
                epoch_labels.extend(labels.tolist())
                if on_step is not None:
                    on_step(model, step)
                step += 1

            try:
                train_auc = EvalReport.from_scores(epoch_scores, epoch_labels).auc
            except ValueError:
                train_auc = float("nan")
            eval_auc = float("nan")
            if eval_set is not None:
                eval_auc = evaluate_packed(model, eval_set, cfg.batch_size).auc
                epoch_aucs.append(eval_auc)
                if eval_auc > best_auc:
                    best_auc = eval_auc
                    save_checkpoint(model, best_path, extra={"epoch": epoch, "eval_auc": eval_auc})
            metrics.write(
                json.dumps(
                    {
                        "config_hash": cfg_hash,
                        "epoch": epoch,
                        "step": step,
                        "epoch_summary": True,
                        "mean_loss": float(np.mean(epoch_losses)),
                        "train_auc": train_auc,
                        "eval_auc": eval_auc,
                    }
                )
                + "\n"
            )
            metrics.flush()
            if cfg.save_filters:
                np.save(filters_dir / f"epoch_{epoch + 1:03d}.npy", model.asrm.weight.detach().numpy())
            logger.info(
                "epoch %d: mean loss %.4f, train AUC %.4f, eval AUC %.4f", epoch,
                float(np.mean(epoch_losses)), train_auc, eval_auc,
            )
            if on_epoch is not None and on_epoch(model, epoch, eval_auc):
                break

    save_checkpoint(model, last_path, extra={"epochs_run": cfg.epochs})
    if best_auc < 0:
        best_path = last_path
        best_auc = float("nan")
    return TrainResult(
        out_dir=out_dir,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        metrics_path=metrics_path,
        best_auc=best_auc,
        epoch_eval_aucs=epoch_aucs,
        seconds=time.time() - started,
    )


@torch.no_grad()
def model_scores(model: SolaModel, packed: PackedDataset, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    scores = []
    for start in range(0, len(packed), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(packed)))
        _, logits = model(packed.batch_images(idx))
        scores.extend(torch.sigmoid(logits).reshape(-1).tolist())
    model.train(was_training)
    return np.asarray(scores)


def evaluate_packed(model: SolaModel, packed: PackedDataset, batch_size: int = 32,
                    metadata: dict | None = None) -> EvalReport:
    scores = model_scores(model, packed, batch_size)
    return EvalReport.from_scores(scores, packed.labels.numpy().astype(int), metadata)


def evaluate(model: SolaModel, dataset_dir, batch_size: int = 32) -> EvalReport:
    """Frame-level AUC and accuracy of a model over an on-disk dataset."""
    packed = pack_samples(load_dataset(dataset_dir))
    return evaluate_packed(model, packed, batch_size, metadata={"dataset": str(dataset_dir)})
