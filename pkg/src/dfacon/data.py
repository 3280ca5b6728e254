"""Dataset schema: labeled image pairs, anchor groups and leak-free splits.

A manifest is a UTF-8 file with one JSON object per line carrying the fields
``pair_id``, ``original_path``, ``candidate_path``, ``label``, ``attack`` and
``anchor_id``. Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image

from dfacon.errors import (
    AmbiguityError,
    ConfigurationError,
    InsufficientDataError,
    ManifestParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("pair_id", "original_path", "candidate_path", "label", "attack", "anchor_id")
MANIFEST_NAME = "manifest.jsonl"


class AttackType(str, Enum):
    INPAINTING = "inpainting"
    STYLE_TRANSFER = "style_transfer"
    ADVERSARIAL = "adversarial"
    CUTMIX = "cutmix"
    NONE = "none"

    @classmethod
    def forgeries(cls) -> tuple["AttackType", ...]:
        return (cls.INPAINTING, cls.STYLE_TRANSFER, cls.ADVERSARIAL, cls.CUTMIX)


class Label(str, Enum):
    SIMILAR = "similar"
    DISSIMILAR = "dissimilar"


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    original_path: str
    candidate_path: str
    label: Label
    attack: AttackType
    anchor_id: str

    def __post_init__(self):
        if self.label is Label.SIMILAR and self.attack is AttackType.NONE:
            raise ValidationError(f"pair {self.pair_id!r}: similar pair must carry an attack type")
        if self.label is Label.DISSIMILAR and self.attack is not AttackType.NONE:
            raise ValidationError(
                f"pair {self.pair_id!r}: dissimilar pair has attack {self.attack.value!r}, expected 'none'"
            )

    @property
    def is_similar(self) -> bool:
        return self.label is Label.SIMILAR

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "original_path": self.original_path,
            "candidate_path": self.candidate_path,
            "label": self.label.value,
            "attack": self.attack.value,
            "anchor_id": self.anchor_id,
        }


@dataclass(frozen=True)
class AnchorGroup:
    anchor_id: str
    original_path: str
    forgery_paths: tuple[tuple[str, AttackType], ...] = ()

    @property
    def paths(self) -> set[str]:
        return {self.original_path, *(p for p, _ in self.forgery_paths)}


@dataclass(frozen=True)
class DatasetSplit:
    train_groups: tuple[AnchorGroup, ...]
    val_groups: tuple[AnchorGroup, ...]
    seed: int
    ratio: float

    def __post_init__(self):
        train_ids = {g.anchor_id for g in self.train_groups}
        val_ids = {g.anchor_id for g in self.val_groups}
        if train_ids & val_ids:
            raise ValidationError(f"anchor ids in both partitions: {sorted(train_ids & val_ids)[:5]}")
        overlap = _paths(self.train_groups) & _paths(self.val_groups)
        if overlap:
            raise ValidationError(f"image paths in both partitions: {sorted(overlap)[:5]}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "train": [g.anchor_id for g in self.train_groups],
            "val": [g.anchor_id for g in self.val_groups],
        }


def _paths(groups: Iterable[AnchorGroup]) -> set[str]:
    out: set[str] = set()
    for g in groups:
        out |= g.paths
    return out


def _resolve(path: str, base: Path) -> str:
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    return str(p)


def _check_decodable(path: str, pair_id: str) -> None:
    try:
        with Image.open(path) as im:
            im.verify()
    except (OSError, SyntaxError) as exc:
        raise ValidationError(f"pair {pair_id!r}: cannot decode image {path!r}: {exc}") from exc


def manifest_path(path: str | Path) -> Path:
    """Accept either a manifest file or a directory containing ``manifest.jsonl``."""
    p = Path(path)
    if p.is_dir():
        return p / MANIFEST_NAME
    if not p.exists() and p.with_suffix(".jsonl").exists():
        return p.with_suffix(".jsonl")
    return p


def load_manifest(path: str | Path, verify_images: bool = True) -> list[PairRecord]:
    path = manifest_path(path)
    base = path.parent
    records: list[PairRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(f"{path}:{lineno}: record is not an object")
            missing = [f for f in MANIFEST_FIELDS if f not in obj]
            if missing:
                raise ManifestParseError(f"{path}:{lineno}: missing fields {missing}")
            pair_id = str(obj["pair_id"])
            try:
                label = Label(obj["label"])
                attack = AttackType(obj["attack"])
            except ValueError as exc:
                raise ValidationError(f"pair {pair_id!r} (line {lineno}): {exc}") from exc
            if pair_id in seen:
                raise ValidationError(f"pair {pair_id!r} (line {lineno}): duplicate pair_id")
            seen.add(pair_id)
            rec = PairRecord(
                pair_id=pair_id,
                original_path=_resolve(obj["original_path"], base),
                candidate_path=_resolve(obj["candidate_path"], base),
                label=label,
                attack=attack,
                anchor_id=str(obj["anchor_id"]),
            )
            if verify_images:
                _check_decodable(rec.original_path, pair_id)
                _check_decodable(rec.candidate_path, pair_id)
            records.append(rec)
    return records


def write_manifest(records: Iterable[PairRecord], path: str | Path, relative_to: str | Path | None = None) -> Path:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            d = rec.to_dict()
            if base is not None:
                for key in ("original_path", "candidate_path"):
                    p = Path(d[key])
                    if p.is_absolute() and p.is_relative_to(base):
                        d[key] = p.relative_to(base).as_posix()
            fh.write(json.dumps(d, sort_keys=False) + "\n")
    return path


def group_by_anchor(records: Sequence[PairRecord]) -> list[AnchorGroup]:
    """Collect similar pairs into one group per original, in first-seen order."""
    originals: dict[str, str] = {}
    forgeries: dict[str, list[tuple[str, AttackType]]] = {}
    owner: dict[str, str] = {}
    for rec in records:
        if not rec.is_similar:
            continue
        prev = owner.get(rec.candidate_path)
        if prev is not None and prev != rec.anchor_id:
            raise AmbiguityError(
                f"candidate {rec.candidate_path!r} claimed by anchors {prev!r} and {rec.anchor_id!r}"
            )
        if rec.anchor_id not in originals:
            originals[rec.anchor_id] = rec.original_path
            forgeries[rec.anchor_id] = []
        elif originals[rec.anchor_id] != rec.original_path:
            raise AmbiguityError(f"anchor {rec.anchor_id!r} has two originals")
        if prev is None:
            owner[rec.candidate_path] = rec.anchor_id
            forgeries[rec.anchor_id].append((rec.candidate_path, rec.attack))
    return [AnchorGroup(aid, originals[aid], tuple(forgeries[aid])) for aid in originals]


def split_groups(groups: Sequence[AnchorGroup], ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(groups) < 2:
        raise InsufficientDataError(f"need at least 2 anchor groups to split, got {len(groups)}")
    order = sorted(groups, key=lambda g: g.anchor_id)
    random.Random(seed).shuffle(order)
    # half-up rounding, clamped so both partitions are non-empty
    n_train = int(math.floor(ratio * len(order) + 0.5))
    n_train = min(max(n_train, 1), len(order) - 1)
    return DatasetSplit(tuple(order[:n_train]), tuple(order[n_train:]), seed=seed, ratio=ratio)


def write_split(split: DatasetSplit, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(split.to_dict()) + "\n", encoding="utf-8")
    return path


def read_split(path: str | Path, groups: Sequence[AnchorGroup]) -> DatasetSplit:
    desc = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {g.anchor_id: g for g in groups}
    try:
        train = tuple(by_id[a] for a in desc["train"])
        val = tuple(by_id[a] for a in desc["val"])
    except KeyError as exc:
        raise ValidationError(f"split references unknown anchor {exc.args[0]!r}") from exc
    return DatasetSplit(train, val, seed=int(desc["seed"]), ratio=float(desc["ratio"]))


def pairs_for_groups(records: Iterable[PairRecord], groups: Iterable[AnchorGroup]) -> list[PairRecord]:
    """Pairs (similar or dissimilar) whose anchor belongs to ``groups``."""
    ids = {g.anchor_id for g in groups}
    return [r for r in records if r.anchor_id in ids]


def attack_histogram(records: Iterable[PairRecord]) -> dict[AttackType, int]:
    counts = Counter(r.attack for r in records if r.is_similar)
    return {a: counts.get(a, 0) for a in AttackType.forgeries()}
