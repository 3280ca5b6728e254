"""Multi-positive supervised contrastive loss.

For anchor ``i`` with positive set ``P(i)``::

    L_i = -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p / t) / sum_{a != i} exp(z_i.z_a / t) )

The denominator runs over every other element of the batch, positives
included. Anchors with an empty positive set are left out of the mean.

``supcon_loss`` and ``supcon_gradient`` are float64 numpy routines used for
verification and reporting; ``supcon_loss_torch`` is the autograd version the
trainer optimizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from dfacon.errors import ConfigurationError, NormalizationError, UndefinedLossError

NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LossReport:
    total: float
    per_anchor: dict[int, float] = field(default_factory=dict)
    anchors_counted: int = 0


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ConfigurationError(f"mask shape {mask.shape} does not match batch size {n}")
    if mask.diagonal().any():
        raise ConfigurationError("positive mask has a true diagonal entry")
    return mask


def _log_softmax_offdiag(logits: np.ndarray) -> np.ndarray:
    n = logits.shape[0]
    masked = logits.copy()
    masked[np.arange(n), np.arange(n)] = -np.inf
    row_max = masked.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    lse = row_max + np.log(np.exp(masked - row_max).sum(axis=1, keepdims=True))
    return masked - lse


def supcon_loss(embeddings, mask, config: LossConfig = LossConfig()) -> LossReport:
    z = np.asarray(embeddings, dtype=np.float64)
    n = z.shape[0]
    mask = _check_mask(mask, n)
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise NormalizationError(f"embedding {bad} has norm {norms[bad]:.8f}; unit vectors required")
    n_pos = mask.sum(axis=1)
    if not n_pos.any():
        raise UndefinedLossError("no anchor has a non-empty positive set")

    log_prob = _log_softmax_offdiag(z @ z.T / config.temperature)
    per_anchor = {}
    for i in np.flatnonzero(n_pos):
        per_anchor[int(i)] = float(-log_prob[i, mask[i]].sum() / n_pos[i])
    total = float(np.mean(list(per_anchor.values())))
    return LossReport(total=total, per_anchor=per_anchor, anchors_counted=len(per_anchor))


def supcon_gradient(embeddings, mask, config: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of the mean loss with respect to the raw (pre-normalization) inputs.

    Inputs are L2-normalized internally, so for unit-norm inputs the result is
    the gradient projected onto each vector's tangent space.
    """
    u = np.asarray(embeddings, dtype=np.float64)
    n = u.shape[0]
    mask = _check_mask(mask, n)
    n_pos = mask.sum(axis=1)
    if not n_pos.any():
        raise UndefinedLossError("no anchor has a non-empty positive set")
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("zero-length embedding cannot be normalized")
    z = u / norms
    t = config.temperature

    log_prob = _log_softmax_offdiag(z @ z.T / t)
    q = np.exp(log_prob)  # diagonal is exp(-inf) = 0
    active = n_pos > 0
    m = active.sum()
    # dL/dlogits, rows of inactive anchors are zero
    g = np.zeros_like(q)
    g[active] = q[active] - mask[active] / n_pos[active, None]
    g /= m
    grad_z = (g + g.T) @ z / t
    # back through u -> u / |u|
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    return (grad_z - radial * z) / norms


def supcon_loss_torch(z: torch.Tensor, mask: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Mean loss over anchors with positives; ``z`` must already be normalized."""
    n = z.shape[0]
    mask = mask.to(dtype=z.dtype)
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = (z @ z.T) / temperature
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(eye, 0.0)
    n_pos = mask.sum(dim=1)
    active = n_pos > 0
    if not bool(active.any()):
        raise UndefinedLossError("no anchor has a non-empty positive set")
    per_anchor = -(mask * log_prob).sum(dim=1)[active] / n_pos[active]
    return per_anchor.mean()
