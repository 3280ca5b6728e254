"""Deterministic synthetic stand-in for a forgery dataset.

Originals are procedural textures (layered sinusoids plus a few filled
shapes). Forgeries emulate the four attack kinds structurally:

* inpainting: a rectangle covering 10-30% of the image is replaced by an
  unrelated texture;
* style_transfer: the luminance structure is kept and re-coloured with a
  random palette;
* adversarial: additive noise of at most 2/255 per channel;
* cutmix: a 25-50% region is pasted from another anchor's original.

Dissimilar pairs join an original with a freshly generated unrelated texture.

Layout under ``out_dir``::

    originals/<anchor_id>.png
    forgeries/<anchor_id>_<k>_<attack>.png
    distractors/<pair_id>.png
    manifest.jsonl
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dfacon.data import MANIFEST_NAME, AttackType, Label, PairRecord, write_manifest
from dfacon.errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_anchors: int = 10
    forgeries_per_anchor: dict = field(
        default_factory=lambda: {a: 1 for a in AttackType.forgeries()}
    )
    image_size: int = 64
    n_dissimilar: int = 20
    seed: int = 0
    # When set, each anchor keeps only this many attacks from the expanded list,
    # rotated by anchor index so attack kinds stay balanced over the corpus.
    max_per_anchor: int | None = None

    def __post_init__(self):
        counts = {AttackType(k): int(v) for k, v in self.forgeries_per_anchor.items()}
        if any(v < 0 for v in counts.values()) or self.n_anchors < 0 or self.n_dissimilar < 0:
            raise ConfigurationError("synthetic counts must be non-negative")
        if AttackType.NONE in counts and counts[AttackType.NONE]:
            raise ConfigurationError("'none' is not a forgery attack")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")
        object.__setattr__(self, "forgeries_per_anchor", counts)

    def attacks_for(self, anchor_index: int) -> list[AttackType]:
        expanded = [a for a in AttackType.forgeries() for _ in range(self.forgeries_per_anchor.get(a, 0))]
        if self.max_per_anchor is None or not expanded:
            return expanded
        r = anchor_index % len(expanded)
        rotated = expanded[r:] + expanded[:r]
        return rotated[: self.max_per_anchor]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def procedural_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Float RGB image in [0, 1]: layered oriented sinusoids plus filled shapes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * rng.uniform(-0.5, 0.5, size=3)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 1, size=3)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            shape = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
        else:
            shape = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.4, 1.0))
        img[shape] = color
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _random_rect(rng: np.random.Generator, size: int, lo: float, hi: float) -> tuple[int, int, int, int]:
    area = rng.uniform(lo, hi) * size * size
    aspect = rng.uniform(0.6, 1.6)
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, size))
    w = int(np.clip(round(area / h), 1, size))
    y = int(rng.integers(0, size - h + 1))
    x = int(rng.integers(0, size - w + 1))
    return y, x, h, w


def inpaint(original: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    size = original.shape[0]
    filler = to_uint8(procedural_texture(rng, size))
    y, x, h, w = _random_rect(rng, size, 0.10, 0.30)
    out = original.copy()
    out[y:y + h, x:x + w] = filler[y:y + h, x:x + w]
    return out, (y, x, h, w)


def style_transfer(original: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lum = original.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    lum = (lum - lum.min()) / (np.ptp(lum) + 1e-12)
    # palette runs dark -> light (or reversed) so luminance edges survive the remap
    n = 4
    brightness = np.linspace(0.1, 0.9, n)[:, None]
    stops = np.clip(brightness + rng.uniform(-0.25, 0.25, size=(n, 3)), 0.0, 1.0)
    if rng.random() < 0.5:
        stops = stops[::-1]
    knots = np.linspace(0, 1, n)
    out = np.stack([np.interp(lum, knots, stops[:, c]) for c in range(3)], axis=-1)
    return to_uint8(out)


def adversarial(original: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.integers(-2, 3, size=original.shape)
    return np.clip(original.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def cutmix(original: np.ndarray, donor: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    size = original.shape[0]
    y, x, h, w = _random_rect(rng, size, 0.25, 0.50)
    out = original.copy()
    out[y:y + h, x:x + w] = donor[y:y + h, x:x + w]
    return out, (y, x, h, w)


def _save(img: np.ndarray, path: Path) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False)


def generate(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write images and ``manifest.jsonl`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir).resolve()
    try:
        for sub in ("originals", "forgeries", "distractors"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigurationError(f"output directory {out} is not writable")

    size = config.image_size
    originals = [to_uint8(procedural_texture(_rng(config.seed, 0, i), size)) for i in range(config.n_anchors)]
    anchor_ids = [f"a{i:05d}" for i in range(config.n_anchors)]
    records: list[PairRecord] = []

    for i, (aid, img) in enumerate(zip(anchor_ids, originals)):
        orig_path = out / "originals" / f"{aid}.png"
        _save(img, orig_path)
        for k, attack in enumerate(config.attacks_for(i)):
            rng = _rng(config.seed, 1, i, k)
            if attack is AttackType.INPAINTING:
                forged, _ = inpaint(img, rng)
            elif attack is AttackType.STYLE_TRANSFER:
                forged = style_transfer(img, rng)
            elif attack is AttackType.ADVERSARIAL:
                forged = adversarial(img, rng)
            else:
                if config.n_anchors < 2:
                    logger.warning("cutmix needs a second anchor; skipping for %s", aid)
                    continue
                j = int(rng.integers(0, config.n_anchors - 1))
                j = j + 1 if j >= i else j
                forged, _ = cutmix(img, originals[j], rng)
            fpath = out / "forgeries" / f"{aid}_{k}_{attack.value}.png"
            _save(forged, fpath)
            records.append(PairRecord(
                pair_id=f"s_{aid}_{k}", original_path=str(orig_path), candidate_path=str(fpath),
                label=Label.SIMILAR, attack=attack, anchor_id=aid,
            ))

    if config.n_anchors:
        for d in range(config.n_dissimilar):
            rng = _rng(config.seed, 2, d)
            i = int(rng.integers(0, config.n_anchors))
            pid = f"d_{d:05d}"
            dpath = out / "distractors" / f"{pid}.png"
            _save(to_uint8(procedural_texture(rng, size)), dpath)
            records.append(PairRecord(
                pair_id=pid, original_path=str(out / "originals" / f"{anchor_ids[i]}.png"),
                candidate_path=str(dpath), label=Label.DISSIMILAR, attack=AttackType.NONE,
                anchor_id=anchor_ids[i],
            ))

    return write_manifest(records, out / MANIFEST_NAME, relative_to=out)
