"""Encoder f, projection head g and task heads; checkpoint serialisation."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import ConfigError

BACKBONES = ("resnet18", "small-cnn")
CHECKPOINT_FORMAT = "awcl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderSpec:
    backbone: str = "resnet18"
    input_channels: int = 1
    # width of f(x); forced to 512 for resnet18
    feature_dim: int = 512
    projection_dim: int = 128
    # small-cnn only
    width: int = 32

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.backbone == "resnet18":
            self.feature_dim = 512
        for name in ("input_channels", "feature_dim", "projection_dim", "width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class SmallCNN(nn.Module):
    """Five conv layers (stride-2 downsampling after the first), global average pooling."""

    def __init__(self, in_ch: int, width: int, out_dim: int):
        super().__init__()
        chans = [in_ch, width, width, 2 * width, 2 * width, out_dim]
        strides = [1, 2, 1, 2, 1]
        layers = []
        for c_in, c_out, s in zip(chans[:-1], chans[1:], strides):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=s, padding=1, bias=False),
                       nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ResNet18Trunk(nn.Module):
    def __init__(self, in_ch: int):
        super().__init__()
        net = torchvision.models.resnet18(weights=None)
        if in_ch != 3:
            net.conv1 = nn.Conv2d(in_ch, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.backbone == "resnet18":
            self.trunk = ResNet18Trunk(spec.input_channels)
        else:
            self.trunk = SmallCNN(spec.input_channels, spec.width, spec.feature_dim)
        self.feature_dim = spec.feature_dim

    def forward_map(self, x):
        return self.trunk(x)

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.trunk(x), 1), 1)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, out_dim))

    def forward(self, h):
        return self.net(h)


class ContrastiveModel(nn.Module):
    """z = g(f(x))."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.projector = ProjectionHead(spec.feature_dim, spec.projection_dim)

    def forward(self, x):
        return self.projector(self.encoder(x))


def build_model(spec: EncoderSpec, seed: Optional[int] = None) -> ContrastiveModel:
    if seed is not None:
        torch.manual_seed(seed)
    return ContrastiveModel(spec)


def as_input(spec: EncoderSpec, images) -> torch.Tensor:
    """Convert (B, H, W) or (B, C, H, W) intensities to the encoder's input tensor."""
    x = torch.as_tensor(images, dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(1)
    if x.ndim != 4:
        raise ValueError(f"expected a batch of images (B, H, W) or (B, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[1] != spec.input_channels:
        if x.shape[1] == 1 and spec.input_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        else:
            raise ValueError(f"encoder expects {spec.input_channels} channel(s), got {x.shape[1]}")
    return x


def embed(model: ContrastiveModel, images) -> torch.Tensor:
    """Projected vectors z (not normalised)."""
    return model(as_input(model.spec, images))


def features(model: nn.Module, images) -> torch.Tensor:
    """Encoder output f(x), before the projection head."""
    encoder = model.encoder if isinstance(model, ContrastiveModel) else model
    return encoder(as_input(encoder.spec, images))


# -- task heads --------------------------------------------------------------

HEAD_KINDS = ("classifier", "nonlinear-classifier", "segmentation-decoder")


class Standardize(nn.Module):
    """Fixed per-feature affine normalisation, fitted once on training features."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("scale", torch.ones(dim))

    def fit(self, feats: torch.Tensor):
        self.mean.copy_(feats.mean(0))
        self.scale.copy_(feats.std(0, unbiased=False).clamp_min(1e-6))
        return self

    def forward(self, x):
        return (x - self.mean) / self.scale


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: Optional[int] = None):
        super().__init__()
        self.norm = Standardize(in_dim)
        if hidden is None:
            self.net = nn.Linear(in_dim, n_classes)
        else:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, n_classes))
        self.n_classes = n_classes

    def forward(self, h):
        return self.net(self.norm(h))


class SegmentationDecoder(nn.Module):
    """Skip-less upsampling decoder: (bilinear x2, conv, BN, ReLU) blocks then a 1x1 classifier."""

    def __init__(self, in_ch: int, n_classes: int, n_up: int, width: int = 64):
        super().__init__()
        blocks = []
        c = in_ch
        for k in range(n_up):
            c_out = max(width // (2 ** k), 16)
            blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                                        nn.Conv2d(c, c_out, 3, padding=1, bias=False),
                                        nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)))
            c = c_out
        self.blocks = nn.Sequential(*blocks)
        self.classify = nn.Conv2d(c, n_classes, 1)
        self.n_classes = n_classes

    def forward(self, fmap, out_size):
        y = self.classify(self.blocks(fmap))
        if tuple(y.shape[-2:]) != tuple(out_size):
            y = F.interpolate(y, size=out_size, mode="bilinear", align_corners=False)
        return y


class TaskModel(nn.Module):
    """Pretrained encoder plus a task head; the projection head is dropped."""

    def __init__(self, encoder: Encoder, kind: str, n_classes: int, image_size=None, hidden: int = 256):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ConfigError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
        self.encoder = encoder
        self.kind = kind
        self.n_classes = n_classes
        if kind == "segmentation-decoder":
            if image_size is None:
                raise ConfigError("segmentation head needs the input image size")
            with torch.no_grad():
                was = encoder.training
                encoder.eval()
                probe = encoder.forward_map(torch.zeros(1, encoder.spec.input_channels, *image_size))
                encoder.train(was)
            ratio = max(image_size[0] // probe.shape[-2], 1)
            n_up = max(int(round(torch.log2(torch.tensor(float(ratio))).item())), 0)
            self.head = SegmentationDecoder(probe.shape[1], n_classes, n_up)
        else:
            self.head = ClassifierHead(encoder.feature_dim, n_classes,
                                       hidden if kind == "nonlinear-classifier" else None)

    def forward(self, x):
        if self.kind == "segmentation-decoder":
            return self.head(self.encoder.forward_map(x), x.shape[-2:])
        return self.head(self.encoder(x))


# -- hashing and checkpoints -------------------------------------------------

def param_hash(module: nn.Module) -> str:
    """SHA-256 over the state dict (parameters and buffers) in key order."""
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, payload: dict) -> None:
    data = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(data, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an awcl checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {data.get('version')}")
    return data


def model_from_checkpoint(ckpt: dict) -> ContrastiveModel:
    spec = EncoderSpec(**ckpt["encoder_spec"])
    model = ContrastiveModel(spec)
    model.load_state_dict(ckpt["model"])
    return model
