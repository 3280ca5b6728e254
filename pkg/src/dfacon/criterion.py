"""Region-wise infringement check between a generated image and an original.

A generated image ``y`` infringes an original ``x`` when, for some allowed
geometric transform ``T`` and some sufficiently large region ``R``::

    rms( A(y)[R] - A(T(x))[R] ) < f(|R|) * delta

``A`` is either the raw pixels or a Sobel edge-magnitude map, ``T(x)`` is
resized to ``y``'s frame, ``rms`` is taken over every scalar in the region and
``f(a) = clip(sqrt(a / |image|), 0.5, 1)``.

Images are float arrays in [0, 1], ``H x W`` or ``H x W x C``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from dfacon.errors import ConfigurationError, ValidationError

GRID_FRACTIONS = (0.25, 0.5, 1.0)


class Transform(str, Enum):
    """The eight symmetries of the square: rotations, optionally preceded by a horizontal flip."""

    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    HFLIP = "hflip"
    HFLIP_ROT90 = "hflip_rot90"
    HFLIP_ROT180 = "hflip_rot180"
    HFLIP_ROT270 = "hflip_rot270"

    @property
    def flip(self) -> bool:
        return self.value.startswith("hflip")

    @property
    def quarter_turns(self) -> int:
        return _QUARTER_TURNS[self.value.removeprefix("hflip").lstrip("_") or "identity"]

    @classmethod
    def from_parts(cls, flip: bool, quarter_turns: int) -> "Transform":
        q = quarter_turns % 4
        if not flip:
            return [cls.IDENTITY, cls.ROT90, cls.ROT180, cls.ROT270][q]
        return [cls.HFLIP, cls.HFLIP_ROT90, cls.HFLIP_ROT180, cls.HFLIP_ROT270][q]

    def compose(self, then: "Transform") -> "Transform":
        """The transform equal to applying ``self`` first and ``then`` second."""
        # a flip conjugates rotations: R^k F = F R^-k
        if then.flip:
            return Transform.from_parts(not self.flip, then.quarter_turns - self.quarter_turns)
        return Transform.from_parts(self.flip, self.quarter_turns + then.quarter_turns)

    def inverse(self) -> "Transform":
        return self if self.flip else Transform.from_parts(False, -self.quarter_turns)

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = img[:, ::-1] if self.flip else img
        # counter-clockwise quarter turns on the first two axes
        return np.ascontiguousarray(np.rot90(out, k=self.quarter_turns, axes=(0, 1)))


_QUARTER_TURNS = {"identity": 0, "rot90": 1, "rot180": 2, "rot270": 3}


class RepresentationDomain(str, Enum):
    PIXEL = "pixel"
    EDGE = "edge"


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    width: int
    height: int

    @property
    def area(self) -> int:
        return self.width * self.height

    def validate(self, shape: tuple[int, ...], min_area: int = 1) -> None:
        h, w = shape[:2]
        if self.width < 1 or self.height < 1 or self.x < 0 or self.y < 0 \
                or self.x + self.width > w or self.y + self.height > h:
            raise ValidationError(f"region {self} lies outside a {w}x{h} image")
        if self.area < min_area:
            raise ValidationError(f"region area {self.area} below minimum {min_area}")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "width": self.width, "height": self.height, "area": self.area}


def size_factor(area: int, image_area: int) -> float:
    """Monotone tolerance multiplier for a region of ``area`` pixels."""
    return float(np.clip(np.sqrt(area / image_area), 0.5, 1.0))


@dataclass(frozen=True)
class CriterionConfig:
    delta: float = 0.1
    min_region_fraction: float = 1.0 / 16.0
    domain: RepresentationDomain = RepresentationDomain.PIXEL
    transforms: tuple[Transform, ...] = tuple(Transform)
    fractions: tuple[float, ...] = GRID_FRACTIONS

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if not self.transforms:
            raise ConfigurationError("transform set is empty")
        object.__setattr__(self, "domain", RepresentationDomain(self.domain))
        object.__setattr__(self, "transforms", tuple(Transform(t) for t in self.transforms))

    def tolerance(self, area: int, image_area: int) -> float:
        return size_factor(area, image_area) * self.delta


@dataclass
class Witness:
    transform: Transform
    region: Region
    domain: RepresentationDomain
    distance: float
    threshold: float

    def to_dict(self) -> dict:
        return {"transform": self.transform.value, "region": self.region.to_dict(),
                "domain": self.domain.value, "distance": self.distance, "threshold": self.threshold}


@dataclass
class CriterionReport:
    infringing: bool
    witness: Witness | None
    grid: list[dict] = field(default_factory=list)

    def to_dict(self, include_grid: bool = False) -> dict:
        d = {"infringing": self.infringing, "witness": self.witness.to_dict() if self.witness else None}
        if include_grid:
            d["grid"] = self.grid
        return d

    def to_json(self, include_grid: bool = False) -> str:
        return json.dumps(self.to_dict(include_grid))


# -- representation ------------------------------------------------------------

def as_float_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def resize_to(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    if img.shape[:2] == (h, w):
        return img
    channels = img[..., None] if img.ndim == 2 else img
    out = np.stack([
        np.asarray(Image.fromarray(channels[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in range(channels.shape[2])
    ], axis=-1).astype(np.float64)
    return out[..., 0] if img.ndim == 2 else out


def edge_map(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the grayscale image, same spatial size."""
    if img.ndim == 2:
        gray = img
    elif img.shape[2] == 3:
        gray = img @ np.array([0.299, 0.587, 0.114])
    else:
        gray = img.mean(axis=2)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def represent(img: np.ndarray, domain: RepresentationDomain) -> np.ndarray:
    if RepresentationDomain(domain) is RepresentationDomain.EDGE:
        return edge_map(img)
    return img


def _aligned(y: np.ndarray, x_hat: np.ndarray, t: Transform, domain: RepresentationDomain):
    y = as_float_image(y)
    x_t = resize_to(t.apply(as_float_image(x_hat)), y.shape[:2])
    if x_t.ndim != y.ndim:
        raise ValidationError(f"channel layout differs: {y.shape} vs {x_t.shape}")
    return represent(y, domain), represent(x_t, domain)


def region_distance(y, x_hat, t: Transform, region: Region,
                    domain: RepresentationDomain = RepresentationDomain.PIXEL) -> float:
    """RMS difference between ``A(y)`` and ``A(t(x_hat))`` over ``region``."""
    y = as_float_image(y)
    region.validate(y.shape)
    domain = RepresentationDomain(domain)
    if domain is RepresentationDomain.EDGE and region.area < 2:
        raise ValidationError("edge representation is degenerate on a 1x1 region")
    a, b = _aligned(y, x_hat, Transform(t), domain)
    sl = (slice(region.y, region.y + region.height), slice(region.x, region.x + region.width))
    diff = a[sl] - b[sl]
    return float(np.sqrt(np.mean(diff * diff)))


# -- search ------------------------------------------------------------------

def region_grid(height: int, width: int, fractions: Sequence[float] = GRID_FRACTIONS,
                min_region_fraction: float = 1.0 / 16.0) -> list[Region]:
    """Sliding windows at each (height, width) fraction pair with 50% stride, in fixed order."""
    min_area = min_region_fraction * height * width
    regions = []
    for fh in fractions:
        for fw in fractions:
            h = max(1, int(round(height * fh)))
            w = max(1, int(round(width * fw)))
            if h * w < min_area - 1e-9:
                continue
            sy, sx = max(1, h // 2), max(1, w // 2)
            for y0 in range(0, height - h + 1, sy):
                for x0 in range(0, width - w + 1, sx):
                    regions.append(Region(x0, y0, w, h))
    return regions


def _window_sums(sq: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
    # summed-area table with a zero border
    sat = np.zeros((sq.shape[0] + 1, sq.shape[1] + 1))
    sat[1:, 1:] = sq.cumsum(axis=0).cumsum(axis=1)
    y0 = np.array([r.y for r in regions])
    x0 = np.array([r.x for r in regions])
    y1 = y0 + np.array([r.height for r in regions])
    x1 = x0 + np.array([r.width for r in regions])
    return sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]


def check_infringement(y, x_hat, config: CriterionConfig = CriterionConfig(),
                       keep_grid: bool = False) -> CriterionReport:
    """Search transforms x regions; the witness minimizes distance / tolerance.

    Ties keep the earliest candidate in (transform order, grid order).
    """
    y = as_float_image(y)
    h, w = y.shape[:2]
    regions = region_grid(h, w, config.fractions, config.min_region_fraction)
    if not regions:
        raise ConfigurationError("region grid is empty for this image size")
    if config.domain is RepresentationDomain.EDGE and all(r.area < 2 for r in regions):
        raise ValidationError("edge representation is degenerate on 1x1 regions")
    areas = np.array([r.area for r in regions], dtype=np.float64)
    tol = np.array([config.tolerance(r.area, h * w) for r in regions])

    best = None
    grid = []
    for t in config.transforms:
        a, b = _aligned(y, x_hat, t, config.domain)
        sq = (a - b) ** 2
        channels = 1 if sq.ndim == 2 else sq.shape[2]
        if sq.ndim == 3:
            sq = sq.sum(axis=2)
        sums = np.maximum(_window_sums(sq, regions), 0.0)
        dist = np.sqrt(sums / (areas * channels))
        ratio = dist / tol
        i = int(np.argmin(ratio))
        if dist[i] < tol[i] and (best is None or ratio[i] < best[0]):
            best = (ratio[i], Witness(t, regions[i], config.domain, float(dist[i]), float(tol[i])))
        if keep_grid:
            grid.extend({"transform": t.value, **r.to_dict(), "distance": float(d), "threshold": float(th)}
                        for r, d, th in zip(regions, dist, tol))
    return CriterionReport(best is not None, best[1] if best else None, grid)


def calibrate_delta(pairs: Sequence[tuple[np.ndarray, np.ndarray, bool]],
                    config: CriterionConfig = CriterionConfig()) -> float:
    """Pick ``delta`` maximizing F1 on labeled ``(generated, original, infringing)`` triples.

    Each pair's decision flips at its minimum distance/size-factor ratio, so the
    candidates are midpoints between consecutive sorted critical values.
    """
    from dfacon.evaluation import calibrate_from_scores

    crit = []
    for y, x_hat, _ in pairs:
        probe = check_infringement(y, x_hat, CriterionConfig(
            delta=1e9, min_region_fraction=config.min_region_fraction, domain=config.domain,
            transforms=config.transforms, fractions=config.fractions))
        w = probe.witness
        crit.append(w.distance / (w.threshold / 1e9))
    # infringing iff critical < delta, i.e. score = -critical >= -delta (up to the strict boundary)
    thr = calibrate_from_scores(-np.asarray(crit), np.array([lab for *_, lab in pairs], dtype=bool))
    # the rule is strict, so nudge past a critical value sitting exactly on the boundary
    return float(max(np.nextafter(-thr, np.inf), np.finfo(float).tiny))
