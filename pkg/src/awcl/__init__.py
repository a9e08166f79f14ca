"""Anatomy-aware contrastive representation learning (AWCL) for ultrasound frames."""

__version__ = "0.1.0"

from .loss import (EmbeddingBatch, anatomy_aware_loss, awcl_batch_loss, cosine_sim,
                   finite_difference_check, ntxent_batch_loss, ntxent_loss)
from .taxonomy import Taxonomy, coarsen, default_taxonomy

__all__ = [
    "EmbeddingBatch", "Taxonomy", "anatomy_aware_loss", "awcl_batch_loss", "coarsen", "cosine_sim",
    "default_taxonomy", "finite_difference_check", "ntxent_batch_loss", "ntxent_loss",
]
