"""Encoder-decoder segmentation network with pluggable backbones.

Every backbone satisfies one contract: five feature stages at strides
2, 4, 8, 16, 32 relative to the input. The decoder is UNet-style: each
stage upsamples 2x (nearest neighbor, then convolution), concatenates the
matching encoder skip, and applies two conv+BN+ReLU blocks. The final
layer is a per-pixel softmax over the class catalog.

Paper-scale backbones come from torchvision's canonical implementations
(randomly initialized unless a weight file is supplied); `tiny-test` is a
~50k-parameter encoder with the same contract so the full pipeline runs
in minutes on a CPU.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from snseg.core import (
    ClassCatalog,
    DEFAULT_CATALOG,
    LabelMask,
    ProbabilityMap,
    RasterImage,
)
from snseg.errors import CheckpointError, ValidationError
from snseg.preprocess import normalize_image

IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))

BACKBONE_NAMES = (
    "vgg19",
    "resnet50",
    "resnet34",
    "densenet121",
    "efficientnet-b5",
    "mobilenet",
    "tiny-test",
)

DEFAULT_DECODER_WIDTHS = (256, 128, 64, 32, 16)
TINY_DECODER_WIDTHS = (48, 32, 24, 16, 8)

# channel count of each of the five feature stages (strides 2..32)
STAGE_CHANNELS = {
    "vgg19": (64, 128, 256, 512, 512),
    "resnet50": (64, 256, 512, 1024, 2048),
    "resnet34": (64, 64, 128, 256, 512),
    "densenet121": (64, 256, 512, 1024, 1024),
    "efficientnet-b5": (24, 40, 64, 176, 2048),
    "mobilenet": (16, 24, 32, 96, 1280),
    "tiny-test": (8, 16, 24, 32, 48),
}

CHECKPOINT_SCHEMA = "snseg-checkpoint-v1"


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "efficientnet-b5"
    pretrained_weights: str | None = None
    # per-channel (mean, std) the encoder expects after /255 scaling;
    # pretrained ImageNet encoders default to the ImageNet statistics
    input_stats: tuple | None = None

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise ValidationError(f"unknown backbone {self.name!r}; choose from {BACKBONE_NAMES}")

    @property
    def stage_channel_widths(self) -> tuple[int, int, int, int, int]:
        return STAGE_CHANNELS[self.name]

    def resolved_stats(self) -> tuple | None:
        if self.input_stats is not None:
            return self.input_stats
        if self.pretrained_weights is not None:
            return IMAGENET_STATS
        return None


@dataclass(frozen=True)
class SegModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    n_classes: int = 3
    input_size: int = 1024
    decoder_channel_widths: tuple | None = None

    def __post_init__(self):
        if isinstance(self.backbone, str):
            object.__setattr__(self, "backbone", BackboneSpec(name=self.backbone))
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_size < 32 or self.input_size % 32 != 0:
            # five stride-2 stages; production sizes are 512 / 768 / 1024
            raise ValidationError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        if self.decoder_channel_widths is not None:
            widths = tuple(int(w) for w in self.decoder_channel_widths)
            if len(widths) != 5 or any(w < 1 for w in widths):
                raise ValidationError(f"decoder_channel_widths needs 5 positive entries, got {widths}")
            object.__setattr__(self, "decoder_channel_widths", widths)

    def resolved_decoder_widths(self) -> tuple:
        if self.decoder_channel_widths is not None:
            return self.decoder_channel_widths
        return TINY_DECODER_WIDTHS if self.backbone.name == "tiny-test" else DEFAULT_DECODER_WIDTHS

    def to_json_dict(self) -> dict:
        return {
            "backbone": {
                "name": self.backbone.name,
                "pretrained_weights": self.backbone.pretrained_weights,
                "input_stats": self.backbone.input_stats,
            },
            "n_classes": self.n_classes,
            "input_size": self.input_size,
            "decoder_channel_widths": list(self.resolved_decoder_widths()),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SegModelConfig":
        bb = data["backbone"]
        stats = bb.get("input_stats")
        if stats is not None:
            stats = (tuple(stats[0]), tuple(stats[1]))
        return cls(
            backbone=BackboneSpec(
                name=bb["name"],
                pretrained_weights=bb.get("pretrained_weights"),
                input_stats=stats,
            ),
            n_classes=int(data["n_classes"]),
            input_size=int(data["input_size"]),
            decoder_channel_widths=tuple(data["decoder_channel_widths"]),
        )


# ---------------------------------------------------------------------------
# Encoders


class StagedEncoder(nn.Module):
    """Runs stage modules sequentially, returning all five feature maps."""

    def __init__(self, stages: list[nn.Module], channels: list[int]):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.stage_channels = tuple(channels)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class TinyEncoder(StagedEncoder):
    """Five stride-2 conv stages, ~50k parameters."""

    def __init__(self):
        widths = (8, 16, 24, 32, 48)

        def down(cin, cout, extra=False):
            layers = [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                      nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            if extra:
                layers += [nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                           nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            return nn.Sequential(*layers)

        stages = [
            down(3, widths[0]),
            down(widths[0], widths[1]),
            down(widths[1], widths[2]),
            down(widths[2], widths[3]),
            down(widths[3], widths[4], extra=True),
        ]
        super().__init__(stages, list(widths))


def _tv_models():
    from torchvision import models

    return models


def _build_vgg19() -> StagedEncoder:
    feats = _tv_models().vgg19(weights=None).features
    cut = [0, 5, 10, 19, 28, 37]  # stage boundaries at each MaxPool output
    stages = [nn.Sequential(*[feats[i] for i in range(cut[k], cut[k + 1])]) for k in range(5)]
    return StagedEncoder(stages, [64, 128, 256, 512, 512])


def _build_resnet(name: str) -> StagedEncoder:
    m = _tv_models().resnet34(weights=None) if name == "resnet34" else _tv_models().resnet50(weights=None)
    stages = [
        nn.Sequential(m.conv1, m.bn1, m.relu),
        nn.Sequential(m.maxpool, m.layer1),
        m.layer2,
        m.layer3,
        m.layer4,
    ]
    channels = [64, 64, 128, 256, 512] if name == "resnet34" else [64, 256, 512, 1024, 2048]
    return StagedEncoder(stages, channels)


def _build_densenet121() -> StagedEncoder:
    f = _tv_models().densenet121(weights=None).features
    stages = [
        nn.Sequential(f.conv0, f.norm0, f.relu0),
        nn.Sequential(f.pool0, f.denseblock1),
        nn.Sequential(f.transition1, f.denseblock2),
        nn.Sequential(f.transition2, f.denseblock3),
        nn.Sequential(f.transition3, f.denseblock4, f.norm5, nn.ReLU(inplace=True)),
    ]
    return StagedEncoder(stages, [64, 256, 512, 1024, 1024])


def _build_efficientnet_b5() -> StagedEncoder:
    f = _tv_models().efficientnet_b5(weights=None).features
    stages = [
        nn.Sequential(f[0], f[1]),
        f[2],
        f[3],
        nn.Sequential(f[4], f[5]),
        nn.Sequential(f[6], f[7], f[8]),
    ]
    return StagedEncoder(stages, [24, 40, 64, 176, 2048])


def _build_mobilenet() -> StagedEncoder:
    f = _tv_models().mobilenet_v2(weights=None).features
    stages = [
        nn.Sequential(f[0], f[1]),
        nn.Sequential(f[2], f[3]),
        nn.Sequential(*[f[i] for i in range(4, 7)]),
        nn.Sequential(*[f[i] for i in range(7, 14)]),
        nn.Sequential(*[f[i] for i in range(14, 19)]),
    ]
    return StagedEncoder(stages, [16, 24, 32, 96, 1280])


ENCODER_BUILDERS = {
    "vgg19": _build_vgg19,
    "resnet50": lambda: _build_resnet("resnet50"),
    "resnet34": lambda: _build_resnet("resnet34"),
    "densenet121": _build_densenet121,
    "efficientnet-b5": _build_efficientnet_b5,
    "mobilenet": _build_mobilenet,
    "tiny-test": TinyEncoder,
}


# ---------------------------------------------------------------------------
# Decoder and full model


class DecoderBlock(nn.Module):
    """2x nearest upsample, concat skip (if any), two conv+BN+ReLU blocks."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = self.act(self.bn1(self.conv1(x)))
        x = self.act(self.bn2(self.conv2(x)))
        return x


class SegModel(nn.Module):
    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ENCODER_BUILDERS[config.backbone.name]()
        enc = self.encoder.stage_channels
        widths = config.resolved_decoder_widths()
        skips = [enc[3], enc[2], enc[1], enc[0], 0]
        ins = [enc[4]] + list(widths[:4])
        self.decoder = nn.ModuleList(
            [DecoderBlock(i, s, w) for i, s, w in zip(ins, skips, widths)]
        )
        self.head = nn.Conv2d(widths[4], config.n_classes, kernel_size=1)
        # background-heavy prior on the head bias: histology foreground is a
        # few percent of pixels, and starting the softmax near that prior
        # keeps early Dice gradients from drowning in false-positive mass
        prior = torch.full((config.n_classes,), 0.07 / (config.n_classes - 1))
        prior[0] = 0.93
        with torch.no_grad():
            self.head.bias.copy_(torch.log(prior))
        self.input_stats = config.backbone.resolved_stats()

    def forward(self, x):
        """Batch NCHW float input -> per-class logits NCHW at input resolution."""
        feats = self.encoder(x)
        y = feats[4]
        skips = [feats[3], feats[2], feats[1], feats[0], None]
        for block, skip in zip(self.decoder, skips):
            y = block(y, skip)
        return self.head(y)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def build(config: SegModelConfig, seed: int | None = None) -> SegModel:
    """Construct a model; a given seed pins the random initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    model = SegModel(config)
    if config.backbone.pretrained_weights is not None:
        load_encoder_weights(model, config.backbone.pretrained_weights)
    return model


def load_encoder_weights(model: SegModel, path: str | Path) -> None:
    """Load a state dict into the encoder (transfer-learning hook).

    Raises CheckpointError listing every missing, unexpected, or
    shape-mismatched layer.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"encoder weight file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = model.encoder.state_dict()
    problems = []
    for k in own:
        if k not in state:
            problems.append(f"missing key {k}")
        elif tuple(state[k].shape) != tuple(own[k].shape):
            problems.append(f"shape mismatch at {k}: file {tuple(state[k].shape)} vs model {tuple(own[k].shape)}")
    for k in state:
        if k not in own:
            problems.append(f"unexpected key {k}")
    if problems:
        raise CheckpointError(
            f"encoder weights at {path} are incompatible:\n  " + "\n  ".join(problems)
        )
    model.encoder.load_state_dict(state)


# ---------------------------------------------------------------------------
# Softmax head and inference


def softmax_head(logits: np.ndarray) -> ProbabilityMap:
    """Numerically stable per-pixel softmax over channels-last logits."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"logits must have shape (H, W, C), got {arr.shape}")
    bad = ~np.isfinite(arr).all(axis=-1)
    if bad.any():
        ij = np.argwhere(bad)[0]
        raise ValidationError(f"non-finite logits at pixel (row={ij[0]}, col={ij[1]})")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return ProbabilityMap(e / e.sum(axis=-1, keepdims=True))


def _to_batch(model: SegModel, images: np.ndarray) -> torch.Tensor:
    # images: NHWC float32 in [0, 1] (already normalized)
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def forward_probabilities(model: SegModel, images: np.ndarray) -> np.ndarray:
    """Inference on a normalized NHWC batch; returns NHWC softmax probabilities."""
    model.eval()
    with torch.no_grad():
        logits = model(_to_batch(model, images))
        probs = torch.softmax(logits, dim=1)
    return probs.permute(0, 2, 3, 1).numpy()


def predict(
    model: SegModel,
    image: RasterImage,
    catalog: ClassCatalog = DEFAULT_CATALOG,
) -> tuple[ProbabilityMap, LabelMask]:
    """Run inference on one preprocessed image.

    The image must already be at the model's input size; resizing belongs
    to the preprocessing step so that masks stay aligned.
    """
    size = model.config.input_size
    if image.height != size or image.width != size:
        raise ValidationError(
            f"image is {image.height}x{image.width} but the model expects {size}x{size}; "
            f"resize with preprocess.resize_pair first"
        )
    if catalog.n_classes != model.config.n_classes:
        raise ValidationError(
            f"catalog has {catalog.n_classes} classes but the model predicts {model.config.n_classes}"
        )
    batch = normalize_image(image, model.input_stats)[None, ...]
    probs = forward_probabilities(model, batch)[0]
    pmap = ProbabilityMap(probs)
    return pmap, LabelMask(np.argmax(probs, axis=-1).astype(np.uint8))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    model: SegModel,
    out_dir: str | Path,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    metadata: dict | None = None,
) -> Path:
    """Write a checkpoint directory: config.json + weights.pt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "model": model.config.to_json_dict(),
        "catalog": catalog.to_json(),
        "metadata": metadata or {},
    }
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    torch.save(model.state_dict(), out_dir / "weights.pt")
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[SegModel, ClassCatalog, dict]:
    ckpt_dir = Path(ckpt_dir)
    config_path = ckpt_dir / "config.json"
    weights_path = ckpt_dir / "weights.pt"
    if not config_path.exists() or not weights_path.exists():
        raise CheckpointError(f"checkpoint directory {ckpt_dir} needs config.json and weights.pt")
    try:
        doc = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint config: {e}") from e
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    config = SegModelConfig.from_json_dict(doc["model"])
    catalog = ClassCatalog.from_json(doc["catalog"])
    model = SegModel(config)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"weights do not match checkpoint config: {e}") from e
    model.eval()
    return model, catalog, doc.get("metadata", {})
