"""Desk-scale comparison of pretraining variants by linear-probe macro-F1.

Each seed renders a pretraining set (half labeled) and an independent,
fully labeled downstream set from the same taxonomy. Every variant is
pretrained on the first and probed on the second with a frozen encoder.

Variants are named ``random``, ``simclr``, ``clpi`` or
``awcl:<granularity>[@<ratio>]``, e.g. ``awcl:fine@0.1``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetManifest, SyntheticSpec, render_synthetic
from .errors import ConfigError
from .evaluation import EvalConfig, compute_embeddings, partial_finetune, silhouette
from .model import EncoderSpec
from .sampler import SamplerConfig
from .train import TrainConfig, pretrain

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("random", "simclr", "clpi", "awcl:fine", "awcl:coarse", "awcl:fine@0.1", "awcl:fine@0.8")


def parse_variant(name: str) -> Optional[SamplerConfig]:
    """Sampler settings for a variant name; ``None`` means no pretraining."""
    if name == "random":
        return None
    mode, _, rest = name.partition(":")
    if mode in ("simclr", "clpi"):
        if rest:
            raise ConfigError(f"variant {name!r}: {mode} takes no granularity")
        return SamplerConfig(mode=mode)
    if mode != "awcl":
        raise ConfigError(f"unknown variant {name!r}")
    gran, _, ratio = rest.partition("@")
    try:
        return SamplerConfig(mode="awcl", granularity=gran or "fine", anatomy_ratio=float(ratio) if ratio else 1.0)
    except ValueError as exc:
        raise ConfigError(f"variant {name!r}: {exc}") from None


@dataclass
class BenchmarkConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = DEFAULT_VARIANTS
    epochs: int = 10
    pretrain_data: SyntheticSpec = field(default_factory=SyntheticSpec)
    # the downstream set only needs to be big enough for a stable probe
    downstream_scans: int = 20
    downstream_frames: int = 100
    model: EncoderSpec = field(default_factory=lambda: EncoderSpec(backbone="small-cnn", feature_dim=64, width=16))
    downstream_seed_offset: int = 10_000

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        self.variants = tuple(self.variants)
        for v in self.variants:
            parse_variant(v)


@dataclass
class BenchmarkResult:
    f1: dict            # variant -> list of per-seed macro-F1
    silhouette: dict    # variant -> list of per-seed silhouettes (fine labels)
    seconds: dict       # variant -> list of per-seed wall-clock
    frozen: dict        # variant -> per-seed flags: encoder hash unchanged by the probe
    config: dict

    def mean(self, variant: str) -> float:
        return float(np.mean(self.f1[variant]))

    def wins(self, a: str, b: str) -> int:
        """Seeds on which ``a`` scores at least as high as ``b``."""
        return int(sum(x >= y for x, y in zip(self.f1[a], self.f1[b])))

    def table(self) -> str:
        seeds = self.config["seeds"]
        head = "variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean\tsilhouette"
        rows = [head]
        for v, scores in self.f1.items():
            cells = "\t".join(f"{x:.4f}" for x in scores)
            rows.append(f"{v}\t{cells}\t{np.mean(scores):.4f}\t{np.mean(self.silhouette[v]):.4f}")
        return "\n".join(rows)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def run_benchmark(cfg: BenchmarkConfig, progress=None) -> BenchmarkResult:
    f1 = {v: [] for v in cfg.variants}
    sil = {v: [] for v in cfg.variants}
    secs = {v: [] for v in cfg.variants}
    frozen = {v: [] for v in cfg.variants}
    for seed in cfg.seeds:
        images, entries, tax = render_synthetic(dataclasses.replace(cfg.pretrain_data, seed=seed))
        manifest = DatasetManifest(entries, "taxonomy.tsv", tax)
        down_spec = dataclasses.replace(cfg.pretrain_data, seed=cfg.downstream_seed_offset + seed,
                                        n_scans=cfg.downstream_scans, frames_per_scan=cfg.downstream_frames,
                                        label_fraction=1.0)
        d_images, d_entries, _ = render_synthetic(down_spec)
        downstream = DatasetManifest(d_entries, "taxonomy.tsv", tax)
        d_labels = [e.fine_label for e in d_entries]
        probe = EvalConfig.for_task("2", "partial", head="classifier", augment=False, seed=seed)
        for variant in cfg.variants:
            start = time.perf_counter()
            sampler = parse_variant(variant)
            if sampler is None:
                source = None
            else:
                tcfg = TrainConfig(epochs=cfg.epochs, seed=seed, model=cfg.model,
                                   sampler=sampler)
                source = pretrain(tcfg, manifest, images=images).checkpoint
            res = partial_finetune(source, probe, downstream, images=d_images, spec=cfg.model)
            feats = compute_embeddings(source, d_images, "penultimate", spec=cfg.model, seed=seed)
            f1[variant].append(float(res.summary["macro_f1"][0]))
            sil[variant].append(float(silhouette(feats, d_labels)))
            secs[variant].append(time.perf_counter() - start)
            frozen[variant].append(res.encoder_hash_before == res.encoder_hash_after)
            msg = f"seed {seed} {variant}: macro-F1 {f1[variant][-1]:.4f} ({secs[variant][-1]:.0f}s)"
            log.info(msg)
            if progress:
                progress(msg)
    config = {"seeds": list(cfg.seeds), "variants": list(cfg.variants), "epochs": cfg.epochs,
              "pretrain_data": dataclasses.asdict(cfg.pretrain_data), "model": cfg.model.to_dict(),
              "downstream_scans": cfg.downstream_scans, "downstream_frames": cfg.downstream_frames}
    return BenchmarkResult(f1, sil, secs, frozen, config)
