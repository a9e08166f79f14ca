"""Contrastive objectives: instance discrimination (NT-Xent), the anatomy-aware
positive-set loss, and the per-anchor dispatch between them.

All batch losses share one similarity matrix. Rows ``2k`` and ``2k+1`` are by
default the two views of sample ``k``, but pairing is read from metadata.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalDomainError

UNLABELED = -1
DEFAULT_TEMPERATURE = 0.5
# stands in for -inf on the masked self-similarity diagonal
MASK_VALUE = -1e9


@dataclass
class EmbeddingBatch:
    z: torch.Tensor
    sample_ids: torch.Tensor
    view_ids: torch.Tensor
    anatomy: torch.Tensor
    tau: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        n = self.z.shape[0]
        if self.z.ndim != 2:
            raise ValueError(f"z must be (2N, D), got shape {tuple(self.z.shape)}")
        self.sample_ids = torch.as_tensor(self.sample_ids, dtype=torch.long)
        self.view_ids = torch.as_tensor(self.view_ids, dtype=torch.long)
        self.anatomy = torch.as_tensor(self.anatomy, dtype=torch.long)
        for name in ("sample_ids", "view_ids", "anatomy"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per row")
        if n % 2:
            raise ValueError(f"row count must be even (two views per sample), got {n}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    @classmethod
    def interleaved(cls, z: torch.Tensor, anatomy_per_sample: Optional[Sequence[int]] = None,
                    tau: float = DEFAULT_TEMPERATURE) -> "EmbeddingBatch":
        """Rows 2k, 2k+1 are views a, b of sample k."""
        n = z.shape[0] // 2
        ids = torch.arange(n).repeat_interleave(2)
        views = torch.arange(2).repeat(n)
        if anatomy_per_sample is None:
            anatomy = torch.full((2 * n,), UNLABELED, dtype=torch.long)
        else:
            anatomy = torch.as_tensor(anatomy_per_sample, dtype=torch.long).repeat_interleave(2)
        return cls(z, ids, views, anatomy, tau)

    def __len__(self):
        return self.z.shape[0]

    def pair_index(self) -> torch.Tensor:
        """For each row, the row holding the other view of the same sample."""
        same = self.sample_ids[:, None] == self.sample_ids[None, :]
        other = self.view_ids[:, None] != self.view_ids[None, :]
        match = same & other
        if not bool((match.sum(1) == 1).all()):
            raise ValueError("every sample needs exactly two views with distinct view ids")
        return match.float().argmax(1)

    def positive_mask(self) -> torch.Tensor:
        """A(i) as a boolean matrix: same anatomy id, labeled, excluding i."""
        a = self.anatomy
        mask = (a[:, None] == a[None, :]) & (a[:, None] != UNLABELED)
        mask.fill_diagonal_(False)
        return mask

    def permuted(self, perm) -> "EmbeddingBatch":
        perm = torch.as_tensor(perm)
        return EmbeddingBatch(self.z[perm], self.sample_ids[perm], self.view_ids[perm],
                              self.anatomy[perm], self.tau)

    def with_z(self, z: torch.Tensor) -> "EmbeddingBatch":
        return EmbeddingBatch(z, self.sample_ids, self.view_ids, self.anatomy, self.tau)


def positive_sets(batch: EmbeddingBatch) -> list[list[int]]:
    return [torch.nonzero(row).flatten().tolist() for row in batch.positive_mask()]


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericalDomainError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def log_softmax_rows(batch: EmbeddingBatch) -> torch.Tensor:
    """log( exp(s_ik / tau) / sum_{k != i} exp(s_ik / tau) ) for every (i, k)."""
    zn = F.normalize(batch.z, dim=1, eps=1e-12)
    logits = zn @ zn.T / batch.tau
    eye = torch.eye(len(batch), dtype=torch.bool, device=logits.device)
    logits = logits.masked_fill(eye, MASK_VALUE)
    row_max = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - row_max
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def _check_anchor(batch, i):
    if len(batch) < 2:
        raise ValueError("contrastive loss needs at least two rows")
    if not 0 <= i < len(batch):
        raise IndexError(f"anchor {i} out of range for {len(batch)} rows")


def ntxent_loss(batch: EmbeddingBatch, i: int) -> torch.Tensor:
    """Instance-discrimination loss of anchor ``i`` against its other view."""
    _check_anchor(batch, i)
    j = int(batch.pair_index()[i])
    return -log_softmax_rows(batch)[i, j]


def anatomy_aware_loss(batch: EmbeddingBatch, i: int, positives: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Positive-set loss of anchor ``i``; the denominator keeps every other row.

    ``positives`` defaults to the anatomy positive set A(i). An empty set is a
    caller error: such anchors belong to :func:`ntxent_loss`.
    """
    _check_anchor(batch, i)
    if positives is None:
        positives = positive_sets(batch)[i]
    positives = list(positives)
    if not positives:
        raise ValueError(f"anchor {i} has an empty positive set; use ntxent_loss")
    if i in positives:
        raise ValueError("an anchor cannot be its own positive")
    return -log_softmax_rows(batch)[i, positives].mean()


def dispatch_mask(batch: EmbeddingBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor positives actually used, and which anchors take the anatomy branch."""
    pos = batch.positive_mask()
    anatomy_branch = pos.any(dim=1)
    pair = batch.pair_index()
    fallback = F.one_hot(pair, len(batch)).bool()
    return torch.where(anatomy_branch[:, None], pos, fallback), anatomy_branch


def per_anchor_losses(batch: EmbeddingBatch) -> tuple[torch.Tensor, torch.Tensor]:
    logp = log_softmax_rows(batch)
    mask, branch = dispatch_mask(batch)
    m = mask.to(logp.dtype)
    return -(logp * m).sum(1) / m.sum(1), branch


def awcl_batch_loss(batch: EmbeddingBatch) -> torch.Tensor:
    """Mean over all 2N anchors of the anatomy-aware loss where A(i) is nonempty, else NT-Xent."""
    losses, _ = per_anchor_losses(batch)
    return losses.mean()


def ntxent_batch_loss(batch: EmbeddingBatch) -> torch.Tensor:
    """Plain SimCLR objective: every anchor against its other view only."""
    logp = log_softmax_rows(batch)
    pair = batch.pair_index()
    return -logp[torch.arange(len(batch)), pair].mean()


def ntxent_anchor_mean(batch: EmbeddingBatch) -> torch.Tensor:
    return torch.stack([ntxent_loss(batch, i) for i in range(len(batch))]).mean()


def anatomy_anchor_mean(batch: EmbeddingBatch) -> torch.Tensor:
    """Mean anatomy-aware loss over anchors with a nonempty A(i)."""
    sets = positive_sets(batch)
    terms = [anatomy_aware_loss(batch, i, s) for i, s in enumerate(sets) if s]
    if not terms:
        raise ValueError("no anchor has a nonempty positive set")
    return torch.stack(terms).mean()


# five-point central stencil: f'(x) ~ sum_k w_k f(x + s_k h) / h, error O(h^4)
_STENCIL = ((-2.0, 1 / 12), (-1.0, -8 / 12), (1.0, 8 / 12), (2.0, -1 / 12))


def _evaluate_all(loss_fn, batch: EmbeddingBatch, zs: torch.Tensor) -> torch.Tensor:
    fn = lambda zz: loss_fn(batch.with_z(zz))  # noqa: E731
    try:
        return torch.func.vmap(fn)(zs)
    except Exception:  # losses with data-dependent control flow cannot be vmapped
        return torch.stack([fn(zz) for zz in zs])


def finite_difference_check(loss_fn: Callable[[EmbeddingBatch], torch.Tensor], batch: EmbeddingBatch,
                            eps: float = 1e-4) -> float:
    """Max relative error between autograd and a five-point central difference w.r.t. z.

    Runs in float64. Returns NaN (with a warning) for degenerate batches whose
    rows all point the same way, where cosine gradients vanish.
    """
    if not 1e-6 <= eps <= 1e-3:
        warnings.warn(f"eps={eps} outside the recommended [1e-6, 1e-3]")
    z = batch.z.detach().to(torch.float64).clone()
    zn = F.normalize(z, dim=1)
    if torch.allclose(zn, zn[:1].expand_as(zn), atol=1e-12):
        warnings.warn("degenerate batch (all rows parallel); gradient check skipped")
        return math.nan

    zg = z.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss_fn(batch.with_z(zg)), zg)
    m = z.numel()
    basis = torch.eye(m, dtype=torch.float64).view(m, *z.shape)
    with torch.no_grad():
        numeric = torch.zeros(m, dtype=torch.float64)
        for step, weight in _STENCIL:
            numeric += weight * _evaluate_all(loss_fn, batch, z + step * eps * basis)
    numeric = numeric.view_as(z) / eps
    rel = (numeric - grad).abs() / grad.abs().clamp_min(1e-8)
    return float(rel.max())
