"""Pretraining loop: sample -> augment -> embed -> dispatch loss -> Adam step."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentPolicy, apply, make_policy, worker_rng
from .errors import ConfigError, TrainingDivergedError
from .loss import EmbeddingBatch, per_anchor_losses
from .model import EncoderSpec, build_model, load_checkpoint, save_checkpoint
from .sampler import SampleTable, SamplerConfig, SamplerState, plan_epoch

log = logging.getLogger(__name__)

# RNG stream tags for augmentation draws
_TRAIN_AUG, _VAL_AUG, _SPLIT = 11, 12, 13


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 10
    batch_size: int = 32
    tau: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: EncoderSpec = field(default_factory=EncoderSpec)
    # None means the default pretraining policy sized to the data
    augment: Optional[dict] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if isinstance(self.model, dict):
            self.model = EncoderSpec(**self.model)
        self.betas = tuple(self.betas)
        # the batch size and seed are owned here and mirrored into the sampler
        self.sampler.batch_size = self.batch_size
        self.sampler.seed = self.seed
        self.validate()

    def validate(self):
        if self.optimizer != "adam":
            raise ConfigError(f"train.optimizer must be 'adam', got {self.optimizer!r}")
        for name in ("lr", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be nonnegative")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"train.epochs must be a positive integer, got {self.epochs!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"train.val_fraction must be in [0, 1), got {self.val_fraction}")
        self.sampler.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**known)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PretrainResult:
    checkpoint: dict
    log: list[dict]
    best_checkpoint: Optional[dict] = None
    out_dir: Optional[Path] = None

    def train_losses(self) -> list[float]:
        return [r["loss"] for r in self.log if r["kind"] == "train"]

    def epoch_means(self) -> list[float]:
        return [r["train_loss"] for r in self.log if r["kind"] == "epoch"]


def split_by_scan(scan_ids, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices of the (train, val) split; no scan contributes to both."""
    scan_ids = np.asarray(scan_ids)
    scans = np.unique(scan_ids)
    n_val = int(round(val_fraction * len(scans)))
    if val_fraction > 0 and len(scans) >= 2:
        n_val = min(max(n_val, 1), len(scans) - 1)
    perm = worker_rng(seed, _SPLIT).permutation(len(scans))
    val_scans = set(scans[perm[:n_val]].tolist())
    is_val = np.array([s in val_scans for s in scan_ids], dtype=bool)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def two_views(policy: AugmentPolicy, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """(2N, H, W): views a, b of each image, interleaved."""
    out = np.empty((2 * len(images),) + images.shape[1:], np.float32)
    for k, im in enumerate(images):
        out[2 * k] = apply(policy, im, rng)
        out[2 * k + 1] = apply(policy, im, rng)
    return out


def _batch_loss(model, views, anatomy, tau):
    z = model(torch.from_numpy(views).unsqueeze(1))
    batch = EmbeddingBatch.interleaved(z, anatomy, tau)
    losses, branch = per_anchor_losses(batch)
    return losses.mean(), branch, z


def _branch_name(frac: float) -> str:
    if frac == 0:
        return "instance"
    if frac == 1:
        return "anatomy"
    return "mixed"


def _dump_batch(out_dir, epoch, step, indices, views, z):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_batch_e{epoch}_s{step}.npz"
    np.savez(path, indices=indices, views=views, z=z.detach().numpy())
    return path


def _validation_loss(model, policy, images, table, cfg: TrainConfig):
    if len(table) < 2:
        return None
    vcfg = SamplerConfig(batch_size=min(cfg.batch_size, len(table)), anatomy_ratio=cfg.sampler.anatomy_ratio,
                         granularity=cfg.sampler.granularity, mode=cfg.sampler.mode, seed=cfg.seed)
    try:
        plan = plan_epoch(table, vcfg, epoch=0)
    except ConfigError:
        # validation scans without labels: fall back to the instance objective
        vcfg = SamplerConfig(batch_size=vcfg.batch_size, mode="simclr", seed=cfg.seed)
        plan = plan_epoch(table, vcfg, epoch=0)
    was = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for b, bp in enumerate(plan):
            views = two_views(policy, images[bp.indices], worker_rng(cfg.seed, _VAL_AUG, b))
            loss, _, _ = _batch_loss(model, views, bp.anatomy, cfg.tau)
            total += float(loss)
    model.train(was)
    return total / max(len(plan), 1)


def _payload(model, optimizer, cfg, state: SamplerState, step, log_records, taxonomy_hash, val_loss):
    return {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "encoder_spec": cfg.model.to_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "taxonomy_hash": taxonomy_hash,
        "sampler_state": state.to_dict(),
        "epoch": state.epoch,
        "global_step": step,
        "torch_rng": torch.get_rng_state(),
        "val_loss": val_loss,
        "log": [dict(r) for r in log_records],
    }


def pretrain(config: TrainConfig, manifest, out_dir=None, images: Optional[np.ndarray] = None,
             resume_from=None, max_steps: Optional[int] = None) -> PretrainResult:
    """Run contrastive pretraining.

    ``images`` may be passed to skip loading from disk (must align with the
    manifest). ``max_steps`` stops early after that many optimiser steps in
    this call, which together with ``checkpoint_every`` lets tests interrupt
    and resume a run.
    """
    config.validate()
    if images is None:
        images = manifest.load_images()
    table = SampleTable.from_manifest(manifest)
    taxonomy = manifest.taxonomy
    train_idx, val_idx = split_by_scan(table.scan, config.val_fraction, config.seed)
    train_table = SampleTable(table.fine[train_idx], table.coarse[train_idx], table.scan[train_idx])
    val_table = SampleTable(table.fine[val_idx], table.coarse[val_idx], table.scan[val_idx])
    train_images, val_images = images[train_idx], images[val_idx]

    policy = (AugmentPolicy.from_dict(config.augment) if config.augment
              else make_policy("pretrain", images.shape[1:]))
    if tuple(policy.image_size) != tuple(images.shape[1:]):
        raise ConfigError(f"augment.image_size {policy.image_size} does not match data {images.shape[1:]}")

    model = build_model(config.model, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas,
                                 weight_decay=config.weight_decay)
    records: list[dict] = []
    start_epoch, cursor, global_step = 0, 0, 0
    best_val, best_payload = math.inf, None
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        if ckpt["config_hash"] != config.digest():
            raise ConfigError("checkpoint was produced with a different configuration")
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["torch_rng"])
        start_epoch = ckpt["sampler_state"]["epoch"]
        cursor = ckpt["sampler_state"]["cursor"]
        global_step = ckpt["global_step"]
        records = [dict(r) for r in ckpt["log"]]
        vals = [r["val_loss"] for r in records if r["kind"] == "epoch" and r["val_loss"] is not None]
        best_val = min(vals, default=math.inf)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch, cur, val_loss=None):
        return _payload(model, optimizer, config, SamplerState(config.seed, epoch, cur), global_step,
                        records, taxonomy.digest(), val_loss)

    steps_this_call = 0
    model.train()
    for epoch in range(start_epoch, config.epochs):
        plan = plan_epoch(train_table, config.sampler, epoch, taxonomy)
        if len(plan) == 0:
            raise ConfigError(f"training split has {len(train_table)} frames, fewer than one batch")
        for step, bp in enumerate(plan.batches):
            if step < cursor:
                continue
            views = two_views(policy, train_images[bp.indices], worker_rng(config.seed, _TRAIN_AUG, epoch, step))
            loss, branch, z = _batch_loss(model, views, bp.anatomy, config.tau)
            if not torch.isfinite(loss):
                dump = _dump_batch(out, epoch, step, train_idx[bp.indices], views, z)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}", dump)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            frac = float(branch.float().mean())
            records.append({"kind": "train", "step": global_step, "epoch": epoch,
                            "branch": _branch_name(frac), "anatomy_fraction": frac, "loss": loss.item()})
            global_step += 1
            steps_this_call += 1
            if out is not None and config.checkpoint_every and global_step % config.checkpoint_every == 0:
                save_checkpoint(out / "last.pt", checkpoint(epoch, step + 1))
            if max_steps is not None and steps_this_call >= max_steps:
                result_ckpt = checkpoint(epoch, step + 1)
                return PretrainResult(result_ckpt, records, best_payload, out)
        cursor = 0

        val_loss = _validation_loss(model, policy, val_images, val_table, config)
        epoch_train = [r for r in records if r["kind"] == "train" and r["epoch"] == epoch]
        records.append({
            "kind": "epoch", "epoch": epoch,
            "train_loss": float(np.mean([r["loss"] for r in epoch_train])),
            "val_loss": val_loss,
            "anatomy_branch_fraction": float(np.mean([r["anatomy_fraction"] for r in epoch_train])),
            "sampler_branch_fraction": plan.stats["anatomy_branch_fraction"],
        })
        log.info("epoch %d train %.4f val %s", epoch, records[-1]["train_loss"], val_loss)
        payload = checkpoint(epoch + 1, 0, val_loss)
        if val_loss is not None and val_loss < best_val:
            best_val, best_payload = val_loss, payload
            if out is not None:
                save_checkpoint(out / "best.pt", payload)
        if out is not None:
            save_checkpoint(out / "last.pt", payload)

    final = checkpoint(config.epochs, 0, records[-1].get("val_loss") if records else None)
    if out is not None:
        write_log(records, out / "loss_log.jsonl")
    return PretrainResult(final, records, best_payload, out)


def write_log(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
