"""Mini-batch composition for simclr / clpi / awcl pretraining.

An epoch plan is fully determined by ``(config.seed, epoch)``. The subset of
labeled frames allowed to form anatomy positives (the anatomy ratio) depends
on the seed only, so it stays fixed across epochs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .augment import worker_rng
from .errors import ConfigError
from .loss import UNLABELED

MODES = ("simclr", "clpi", "awcl")
GRANULARITIES = ("fine", "coarse", "none")

# RNG stream tags
_SELECT, _SHUFFLE, _TIEBREAK = 101, 102, 103


@dataclass
class SamplerConfig:
    batch_size: int = 32
    anatomy_ratio: float = 1.0
    granularity: str = "fine"
    mode: str = "awcl"
    seed: int = 0

    def __post_init__(self):
        if self.mode in ("simclr", "clpi"):
            self.granularity = "none"
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"sampler.mode must be one of {MODES}, got {self.mode!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"sampler.granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.mode == "awcl" and self.granularity == "none":
            raise ConfigError("sampler.granularity must be 'fine' or 'coarse' in awcl mode")
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigError(f"sampler.batch_size must be an integer >= 2, got {self.batch_size!r}")
        if not (isinstance(self.anatomy_ratio, (int, float)) and 0.0 <= self.anatomy_ratio <= 1.0):
            raise ConfigError(f"sampler.anatomy_ratio must be in [0, 1], got {self.anatomy_ratio!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleTable:
    """Per-frame labels the sampler needs; ``-1`` marks a missing label."""

    fine: np.ndarray
    coarse: np.ndarray
    scan: np.ndarray

    def __post_init__(self):
        self.fine = np.asarray(self.fine, dtype=np.int64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        self.scan = np.asarray(self.scan)
        if not (len(self.fine) == len(self.coarse) == len(self.scan)):
            raise ValueError("fine, coarse and scan arrays must have equal length")

    def __len__(self):
        return len(self.fine)

    @classmethod
    def from_manifest(cls, manifest) -> "SampleTable":
        return cls(manifest.fine_labels(), manifest.coarse_labels(), np.array(manifest.scan_ids()))

    def labels(self, granularity: str) -> np.ndarray:
        if granularity == "fine":
            return self.fine
        if granularity == "coarse":
            return self.coarse
        return np.full(len(self), UNLABELED, dtype=np.int64)


@dataclass
class BatchPlan:
    indices: np.ndarray
    # per-sample ids used for positives at the plan's own granularity (-1 = unlabeled)
    anatomy: np.ndarray
    # participation-masked fine / coarse ids, kept so positives can be rebuilt at either granularity
    fine: np.ndarray
    coarse: np.ndarray
    granularity: str

    def __len__(self):
        return len(self.indices)

    def row_anatomy(self) -> np.ndarray:
        """Anatomy ids for the 2N interleaved view rows."""
        return np.repeat(self.anatomy, 2)


@dataclass
class EpochPlan:
    epoch: int
    batches: list[BatchPlan]
    participating: np.ndarray
    dropped: np.ndarray
    # participating frames that ended up without a same-class partner in their batch
    unpaired: int = 0
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def participating_count(n_labeled: int, ratio: float) -> int:
    return math.floor(ratio * n_labeled + 1e-9)


def select_participating(labels: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Pick exactly floor(ratio * #labeled) labeled frames, stratified by class.

    Per-class quotas use largest-remainder apportionment, ties broken by a
    seeded permutation; members are drawn uniformly within each class.
    """
    labeled = np.flatnonzero(labels != UNLABELED)
    k = participating_count(len(labeled), ratio)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    classes, counts = np.unique(labels[labeled], return_counts=True)
    exact = ratio * counts
    quota = np.floor(exact + 1e-9).astype(np.int64)
    short = k - int(quota.sum())
    if short > 0:
        tie = worker_rng(seed, _TIEBREAK).permutation(len(classes))
        frac = exact - quota
        order = sorted(range(len(classes)), key=lambda c: (-round(frac[c], 12), tie[c]))
        for c in order[:short]:
            quota[c] += 1
    rng = worker_rng(seed, _SELECT)
    chosen = []
    for cls, q in zip(classes, quota):
        members = labeled[labels[labeled] == cls]
        if q:
            chosen.append(rng.choice(members, size=int(q), replace=False))
    return np.sort(np.concatenate(chosen))


def _units(group_of: np.ndarray, order: np.ndarray) -> list[list[int]]:
    """Chunk each group's frames (in shuffled order) into pairs; odd groups end in a triple."""
    members: dict[int, list[int]] = {}
    for idx in order:
        g = group_of[idx]
        if g != UNLABELED:
            members.setdefault(int(g), []).append(int(idx))
    units = []
    for frames in members.values():
        if len(frames) < 2:
            continue
        chunks = [frames[i:i + 2] for i in range(0, len(frames), 2)]
        if len(chunks[-1]) == 1:
            chunks[-2].extend(chunks.pop())
        units.extend(chunks)
    rank = {int(idx): r for r, idx in enumerate(order)}
    units.sort(key=lambda u: rank[u[0]])
    return units


def _pack(order: np.ndarray, group_of: np.ndarray, n: int):
    """Greedy packer: spread same-group units evenly over batches, pad with ungrouped frames."""
    units = _units(group_of, order)
    grouped = {i for u in units for i in u}
    singles = [int(i) for i in order if int(i) not in grouped]
    n_batches = len(order) // n
    total_grouped = min(len(grouped), n_batches * n)

    batches = []
    placed = 0
    ui = si = 0
    units = [list(u) for u in units]
    for b in range(n_batches):
        target = round((b + 1) * total_grouped / n_batches) if n_batches else 0
        batch: list[int] = []
        while ui < len(units) and placed < target and len(units[ui]) <= n - len(batch):
            batch += units[ui]
            placed += len(units[ui])
            ui += 1
        while si < len(singles) and len(batch) < n:
            batch.append(singles[si])
            si += 1
        while ui < len(units) and len(units[ui]) <= n - len(batch):
            batch += units[ui]
            placed += len(units[ui])
            ui += 1
        if len(batch) < n and ui < len(units):
            # a single slot left and only multi-frame units remain: split one,
            # preferring a unit whose group is already in the batch
            present = {int(group_of[i]) for i in batch}
            pick = next((k for k in range(ui, len(units)) if int(group_of[units[k][0]]) in present), ui)
            unit = units[pick]
            while len(batch) < n and unit:
                batch.append(unit.pop(0))
                placed += 1
            if not unit:
                units.pop(pick)
            elif len(unit) == 1:
                singles.insert(si, unit.pop())
                units.pop(pick)
        batches.append(np.array(batch, dtype=np.int64))
    used = set(np.concatenate(batches).tolist()) if batches else set()
    dropped = np.array([int(i) for i in order if int(i) not in used], dtype=np.int64)
    return batches, dropped


def plan_epoch(table, config: SamplerConfig, epoch: int = 0, taxonomy=None) -> EpochPlan:
    """Compose the epoch's batches.

    ``table`` is a :class:`SampleTable` or a manifest. In awcl mode only the
    selected fraction of labeled frames keeps its label; classes left with a
    single participant are packed as unlabeled frames.
    """
    if not isinstance(table, SampleTable):
        table = SampleTable.from_manifest(table)
    config.validate()
    n = config.batch_size
    order = worker_rng(config.seed, _SHUFFLE, epoch).permutation(len(table))

    if config.mode == "awcl":
        labels = table.labels(config.granularity)
        if not np.any(labels != UNLABELED):
            raise ConfigError(f"awcl mode needs {config.granularity}-labeled frames; none found")
        participating = select_participating(labels, config.anatomy_ratio, config.seed)
        group_of = np.full(len(table), UNLABELED, dtype=np.int64)
        group_of[participating] = labels[participating]
    elif config.mode == "clpi":
        participating = np.zeros(0, dtype=np.int64)
        _, scan_codes = np.unique(table.scan, return_inverse=True)
        group_of = scan_codes.astype(np.int64)
    else:
        participating = np.zeros(0, dtype=np.int64)
        group_of = np.full(len(table), UNLABELED, dtype=np.int64)

    batches_idx, dropped = _pack(order, group_of, n)

    # frames whose group has a single member in the whole pool cannot pair
    counts = np.bincount(group_of[group_of != UNLABELED]) if np.any(group_of != UNLABELED) else np.zeros(0)
    pairable = np.zeros(len(table), bool)
    has = group_of != UNLABELED
    pairable[has] = counts[group_of[has]] >= 2

    plans, unpaired, labeled_rows = [], 0, 0
    for idx in batches_idx:
        g = np.where(pairable[idx], group_of[idx], UNLABELED)
        vals, cnt = np.unique(g[g != UNLABELED], return_counts=True)
        unpaired += int(np.sum(cnt == 1))
        labeled_rows += int(np.sum(g != UNLABELED))
        if config.mode == "awcl":
            keep = g != UNLABELED
            fine = np.where(keep, table.fine[idx], UNLABELED)
            coarse = np.where(keep, table.coarse[idx], UNLABELED)
            if config.granularity == "fine" and taxonomy is not None:
                coarse = np.array([taxonomy.coarsen(int(f)) if f != UNLABELED else UNLABELED for f in fine])
        else:
            fine = coarse = np.full(len(idx), UNLABELED, dtype=np.int64)
        plans.append(BatchPlan(idx, g, fine, coarse, config.granularity if config.mode == "awcl" else "none"))

    total_rows = max(sum(len(p) for p in plans), 1)
    stats = {"n_batches": len(plans), "n_dropped": len(dropped),
             "n_participating": len(participating),
             "anatomy_branch_fraction": labeled_rows / total_rows}
    return EpochPlan(epoch, plans, participating, dropped, unpaired, stats)


def build_positive_sets(plan: BatchPlan, granularity: Optional[str] = None) -> np.ndarray:
    """A(i) over the 2N interleaved rows as a boolean matrix.

    Labeled rows see every other row with the same id at ``granularity``,
    which always includes their own second view; unlabeled rows get nothing.
    """
    granularity = granularity or plan.granularity
    if granularity == plan.granularity or granularity == "none" and plan.granularity == "none":
        ids = plan.anatomy
    elif granularity == "fine":
        ids = plan.fine
    elif granularity == "coarse":
        ids = plan.coarse
    elif granularity == "none":
        ids = np.full(len(plan), UNLABELED)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    rows = np.repeat(np.asarray(ids), 2)
    mask = (rows[:, None] == rows[None, :]) & (rows[:, None] != UNLABELED)
    np.fill_diagonal(mask, False)
    return mask


@dataclass
class SamplerState:
    seed: int
    epoch: int
    cursor: int

    def to_dict(self):
        return asdict(self)
