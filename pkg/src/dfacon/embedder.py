"""Encoders, projection heads and probe-point embedding.

Three encoder kinds are supported:

* ``reference_cnn``: ResNet-50 with its classification layer removed (2048-d
  features) and a 2048 -> 128 projection head.
* ``toy_cnn``: three conv blocks plus global pooling, small enough to train on
  a CPU in minutes. Feature width is configurable (default 64).
* ``external``: any inference-only embedding provider wrapped behind the
  same ``embed_paths`` surface.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn
from torch.nn import functional as F

from dfacon.errors import (
    ConfigurationError,
    ContractError,
    DecodeError,
    NumericError,
    ResourceError,
    ShapeError,
)

logger = logging.getLogger(__name__)

INPUT_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ProbePoint(str, Enum):
    ENCODER_OUTPUT = "encoder_output"
    PROJECTION_OUTPUT = "projection_output"


class EncoderKind(str, Enum):
    REFERENCE_CNN = "reference_cnn"
    TOY_CNN = "toy_cnn"
    EXTERNAL = "external"


@dataclass(frozen=True)
class ProjectionHeadConfig:
    variant: str = "mlp"
    input_dim: int = 2048
    hidden_dim: int = 2048
    output_dim: int = 128

    def __post_init__(self):
        if self.variant not in ("linear", "mlp"):
            raise ConfigurationError(f"unknown projection head variant {self.variant!r}")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = EncoderKind.TOY_CNN.value
    weights: str = "random"  # "random" or "pretrained" (reference_cnn only)
    seed: int = 0
    dim: int = 64  # toy_cnn feature width
    luma: bool = True  # toy_cnn: collapse RGB to luminance before the first conv
    head_variant: str = "mlp"
    projection_dim: int = 128


class ProjectionHead(nn.Module):
    def __init__(self, cfg: ProjectionHeadConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.variant == "linear":
            self.net = nn.Linear(cfg.input_dim, cfg.output_dim)
        else:
            self.net = nn.Sequential(
                nn.Linear(cfg.input_dim, cfg.hidden_dim),
                nn.ReLU(inplace=True),
                nn.Linear(cfg.hidden_dim, cfg.output_dim),
            )

    def forward(self, x):
        return self.net(x)


def _conv_block(cin, cout, kernel, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Luma(nn.Module):
    """Replace each pixel by its luminance, repeated over the three channels."""

    def __init__(self):
        super().__init__()
        self.register_buffer("weights", torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        return (x * self.weights).sum(1, keepdim=True).expand(-1, 3, -1, -1)


class ToyCNN(nn.Module):
    """Small CPU encoder for synthetic data: three strided conv blocks and global average pooling.

    With ``luma`` the input is reduced to luminance first, so colour-only edits
    (the synthetic style transfer) cannot dominate the features.
    """

    def __init__(self, dim: int = 64, luma: bool = True):
        super().__init__()
        w = max(8, dim // 4)
        self.features = nn.Sequential(
            *([Luma()] if luma else []),
            _conv_block(3, w, 7, 4),
            _conv_block(w, 2 * w, 3, 2),
            nn.MaxPool2d(2),
            _conv_block(2 * w, dim, 3, 2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out_dim = dim

    def forward(self, x):
        return self.features(x)


def _resnet50(weights: str) -> nn.Module:
    from torchvision.models import ResNet50_Weights, resnet50

    if weights == "pretrained":
        try:
            net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2)
        except Exception as exc:  # download or cache failure
            raise ResourceError(f"ImageNet weights for ResNet-50 unavailable: {exc}") from exc
    elif weights == "random":
        net = resnet50(weights=None)
    else:
        raise ResourceError(f"unknown weights source {weights!r}")
    net.fc = nn.Identity()
    return net


class ContrastiveModel(nn.Module):
    """Encoder followed by a projection head; ``forward`` returns both probes unnormalized."""

    def __init__(self, encoder: nn.Module, feature_dim: int, head_cfg: ProjectionHeadConfig):
        super().__init__()
        self.encoder = encoder
        self.head = ProjectionHead(head_cfg)
        self.feature_dim = feature_dim

    def forward(self, x):
        h = self.encoder(x)
        return h, self.head(h)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("zero-length embedding cannot be normalized")
    return x / norms


# -- preprocessing -----------------------------------------------------------

@lru_cache(maxsize=8192)
def _decode(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "RGBA", "P"):
                raise DecodeError(f"{path}: unsupported image mode {im.mode!r}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image {path!r}: {exc}") from exc
    arr.setflags(write=False)
    return arr


def load_rgb(path: str | Path) -> np.ndarray:
    """Decode an image file to an ``H x W x 3`` uint8 array (cached, read-only)."""
    return _decode(str(path))


def preprocess(image) -> torch.Tensor:
    """Resize to 224x224 and normalize with ImageNet channel statistics.

    Accepts a PIL image or an ``H x W x 3`` array (uint8, or float in [0, 1]).
    """
    if isinstance(image, Image.Image):
        if image.mode not in ("RGB", "L", "RGBA", "P"):
            raise DecodeError(f"unsupported image mode {image.mode!r}")
        image = np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DecodeError(f"expected an H x W x 3 RGB array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        x = torch.from_numpy(arr.astype(np.float32) / 255.0)
    else:
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    if tuple(x.shape[2:]) != (INPUT_SIZE, INPUT_SIZE):
        x = F.interpolate(x, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear",
                          align_corners=False, antialias=x.shape[2] > INPUT_SIZE or x.shape[3] > INPUT_SIZE)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return ((x - mean) / std)[0]


def preprocess_paths(paths: Sequence[str]) -> torch.Tensor:
    return torch.stack([preprocess(load_rgb(p)) for p in paths])


# -- handles ----------------------------------------------------------------

class EncoderHandle:
    """A trainable contrastive model plus the metadata needed to rebuild it."""

    def __init__(self, model: ContrastiveModel, config: EncoderConfig, device: str = "cpu"):
        self.model = model.to(device)
        self.config = config
        self.device = device
        self.trainable = True

    @property
    def head_config(self) -> ProjectionHeadConfig:
        return self.model.head.cfg

    def dim(self, probe: ProbePoint) -> int:
        probe = ProbePoint(probe)
        if probe is ProbePoint.ENCODER_OUTPUT:
            return self.model.feature_dim
        return self.head_config.output_dim

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(asdict(self.config)).encode())
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def _locate_nonfinite(self, images: torch.Tensor) -> str:
        x = images
        for name, layer in self.model.encoder.named_children():
            x = layer(x)
            if not torch.isfinite(x).all():
                return f"encoder.{name}"
        return "encoder"

    @torch.no_grad()
    def embed(self, images: torch.Tensor, probe: ProbePoint = ProbePoint.ENCODER_OUTPUT) -> np.ndarray:
        """Unit-normalized embeddings (float64, one row per image) at ``probe``."""
        probe = ProbePoint(probe)
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, INPUT_SIZE, INPUT_SIZE):
            raise ShapeError(f"expected N x 3 x {INPUT_SIZE} x {INPUT_SIZE} input, got {tuple(images.shape)}")
        was_training = self.model.training
        self.model.eval()
        try:
            h, z = self.model(images.to(self.device))
        finally:
            self.model.train(was_training)
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite activations in {self._locate_nonfinite(images.to(self.device))}")
        if not torch.isfinite(z).all():
            raise NumericError("non-finite activations in projection head")
        out = h if probe is ProbePoint.ENCODER_OUTPUT else z
        return normalize_rows(out.double().cpu().numpy())

    def embed_paths(self, paths: Sequence[str], probe: ProbePoint = ProbePoint.ENCODER_OUTPUT,
                    batch_size: int = 64) -> np.ndarray:
        chunks = [
            self.embed(preprocess_paths(paths[i:i + batch_size]), probe)
            for i in range(0, len(paths), batch_size)
        ]
        if not chunks:
            return np.zeros((0, self.dim(probe)))
        return np.concatenate(chunks)


ExternalProvider = Callable[[Sequence[str]], Sequence[tuple[str, Sequence[float], int]]]


class ExternalEncoder:
    """Inference-only wrapper around an embedding provider.

    The provider maps image paths to ``(path, vector, dim)`` triples. Only the
    encoder probe exists for external models.
    """

    trainable = False

    def __init__(self, provider: ExternalProvider, dim: int, name: str = "external"):
        self.provider = provider
        self._dim = dim
        self.name = name

    def dim(self, probe: ProbePoint) -> int:
        if ProbePoint(probe) is not ProbePoint.ENCODER_OUTPUT:
            raise ContractError(f"external encoder {self.name!r} exposes only the encoder_output probe")
        return self._dim

    def fingerprint(self) -> str:
        return hashlib.sha256(f"external:{self.name}:{self._dim}".encode()).hexdigest()

    def embed_paths(self, paths: Sequence[str], probe: ProbePoint = ProbePoint.ENCODER_OUTPUT,
                    batch_size: int = 64) -> np.ndarray:
        self.dim(probe)
        triples = list(self.provider(list(paths)))
        if len(triples) != len(paths):
            raise ContractError(f"provider returned {len(triples)} vectors for {len(paths)} paths")
        rows = []
        for want, (got, vec, dim) in zip(paths, triples):
            if str(got) != str(want):
                raise ContractError(f"provider answered {got!r} for {want!r}")
            vec = np.asarray(vec, dtype=np.float64)
            if dim != self._dim or vec.shape != (self._dim,):
                raise ContractError(f"provider returned dim {dim} (shape {vec.shape}) for {got!r}, expected {self._dim}")
            rows.append(vec)
        if not rows:
            return np.zeros((0, self._dim))
        return normalize_rows(np.stack(rows))


def make_encoder(kind: str | EncoderKind = EncoderKind.TOY_CNN, config: EncoderConfig | None = None,
                 provider: ExternalProvider | None = None, device: str = "cpu", **overrides):
    kind = EncoderKind(kind)
    if kind is EncoderKind.EXTERNAL:
        if provider is None:
            raise ConfigurationError("external encoder needs an embedding provider")
        return ExternalEncoder(provider, dim=overrides.get("dim", 0) or (config.dim if config else 0),
                               name=overrides.get("name", "external"))

    cfg = config or EncoderConfig(kind=kind.value)
    if overrides:
        cfg = EncoderConfig(**{**asdict(cfg), **overrides})
    cfg = EncoderConfig(**{**asdict(cfg), "kind": kind.value})

    if kind is EncoderKind.TOY_CNN and cfg.weights != "random":
        raise ResourceError(f"toy_cnn supports only random weights, got {cfg.weights!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if kind is EncoderKind.REFERENCE_CNN:
            encoder, feat = _resnet50(cfg.weights), 2048
        else:
            encoder, feat = ToyCNN(cfg.dim, cfg.luma), cfg.dim
        head = ProjectionHeadConfig(variant=cfg.head_variant, input_dim=feat, hidden_dim=feat,
                                    output_dim=cfg.projection_dim)
        model = ContrastiveModel(encoder, feat, head)
    return EncoderHandle(model, cfg, device=device)
