"""Forgery-aware batch construction.

Each batch holds a handful of anchor groups. Every original is placed next to
a subset of its forgeries; elements that share an anchor are positives of one
another and everything else in the batch is a negative.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dfacon.data import AnchorGroup
from dfacon.errors import ConfigurationError

logger = logging.getLogger(__name__)

DEFAULT_POSITIVES_PER_ANCHOR = 3


@dataclass(frozen=True)
class ContrastiveBatch:
    items: tuple[tuple[str, str], ...]  # (image path, anchor_id)

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.items]

    @property
    def anchor_ids(self) -> list[str]:
        return [a for _, a in self.items]

    @property
    def positive_index(self) -> dict[int, frozenset[int]]:
        ids = self.anchor_ids
        return {
            i: frozenset(j for j, b in enumerate(ids) if b == a and j != i)
            for i, a in enumerate(ids)
        }

    def negative_index(self, i: int) -> frozenset[int]:
        pos = self.positive_index[i]
        return frozenset(j for j in range(self.size) if j != i and j not in pos)

    def to_json(self) -> str:
        return json.dumps({"size": self.size, "items": [list(it) for it in self.items]})


def positive_mask(batch: ContrastiveBatch) -> np.ndarray:
    ids = np.asarray(batch.anchor_ids, dtype=object)
    mask = ids[:, None] == ids[None, :]
    np.fill_diagonal(mask, False)
    return mask.astype(bool)


def default_anchors_per_batch(batch_size: int) -> int:
    return max(1, batch_size // (1 + DEFAULT_POSITIVES_PER_ANCHOR))


def _rotating_subset(n: int, k: int, epoch: int, perm: np.ndarray) -> list[int]:
    # consecutive windows of a fixed permutation so every forgery is visited across epochs
    if n <= k:
        return list(range(n))
    start = (epoch * k) % n
    return [int(perm[(start + j) % n]) for j in range(k)]


def make_batches(
    groups: Sequence[AnchorGroup],
    batch_size: int,
    anchors_per_batch: int | None = None,
    positives_per_anchor: int = DEFAULT_POSITIVES_PER_ANCHOR,
    seed: int = 0,
    epoch: int = 0,
) -> list[ContrastiveBatch]:
    """Build one epoch of batches from the training-side anchor groups.

    ``batch_size`` caps the number of elements per batch. Anchors are shuffled
    deterministically from ``(seed, epoch)``; groups with more forgeries than
    ``positives_per_anchor`` contribute a rotating window of them.
    """
    if anchors_per_batch is None:
        anchors_per_batch = max(1, batch_size // (1 + positives_per_anchor))
    if positives_per_anchor < 1 or anchors_per_batch < 1:
        raise ConfigurationError("anchors_per_batch and positives_per_anchor must be >= 1")
    if anchors_per_batch * 2 > batch_size:
        raise ConfigurationError(
            f"batch_size={batch_size} cannot hold {anchors_per_batch} anchors with at least one positive each"
        )

    usable = [g for g in groups if g.forgery_paths]
    skipped = len(groups) - len(usable)
    if skipped:
        logger.warning("skipped %d anchor group(s) with zero forgeries", skipped)
    if not usable:
        raise ConfigurationError("no anchor group with at least one forgery; batch_size not attainable")

    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(usable))
    # per-group permutation depends on seed only, so rotation windows tile it across epochs
    group_perm = {
        g.anchor_id: np.random.default_rng([seed, i]).permutation(len(g.forgery_paths))
        for i, g in enumerate(sorted(usable, key=lambda g: g.anchor_id))
    }

    batches: list[ContrastiveBatch] = []
    current: list[tuple[str, str]] = []
    n_anchors = 0
    for gi in order:
        g = usable[gi]
        picks = _rotating_subset(len(g.forgery_paths), positives_per_anchor, epoch, group_perm[g.anchor_id])
        elements = [(g.original_path, g.anchor_id)] + [(g.forgery_paths[j][0], g.anchor_id) for j in picks]
        elements = elements[: batch_size]
        if n_anchors >= anchors_per_batch or len(current) + len(elements) > batch_size:
            batches.append(ContrastiveBatch(tuple(current)))
            current, n_anchors = [], 0
        current.extend(elements)
        n_anchors += 1
    if current:
        last = ContrastiveBatch(tuple(current))
        if all(last.positive_index[i] for i in range(last.size)):
            batches.append(last)
        else:
            logger.info("dropped final partial batch with an anchor lacking in-batch positives")
    return batches
