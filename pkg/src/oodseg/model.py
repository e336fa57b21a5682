"""Encoder, segmentation decoder, OoD decoder and projection head.

Shapes: the encoder maps B×3×H×W to B×C×H/8×W/8; the segmentation decoder
returns B×K×H×W logits; the OoD decoder returns B×1×H×W scores in [0, 1];
the projection head maps N×C vectors to N×64 (training only).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STRIDE = 8
PROJECTION_DIM = 64
CHECKPOINT_MAGIC = "OODSEG-CKPT-v1"
COMPONENTS = ("encoder", "seg_decoder", "ood_decoder", "proj_head")


@dataclass
class ModelConfig:
    num_classes: int = 4
    width: int = 64
    projection_dim: int = PROJECTION_DIM


def _conv_bn(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
        )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class Encoder(nn.Module):
    """Small residual CNN with three stride-2 stages (net stride 8)."""

    def __init__(self, width: int):
        super().__init__()
        w1, w2 = max(8, width // 4), max(8, width // 2)
        self.stem = _conv_bn(3, w1)
        self.stages = nn.Sequential(
            ResidualBlock(w1, w1, 2),
            ResidualBlock(w1, w2, 2),
            ResidualBlock(w2, width, 2),
        )

    def forward(self, x):
        return self.stages(self.stem(x))


class SegDecoder(nn.Module):
    """Stacked dilated convolutions, 1×1 classifier, ×8 bilinear upsample."""

    def __init__(self, width: int, num_classes: int):
        super().__init__()
        self.context = nn.Sequential(
            _conv_bn(width, width, dilation=1),
            _conv_bn(width, width, dilation=2),
        )
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, features):
        logits = self.classifier(self.context(features))
        return F.interpolate(logits, scale_factor=STRIDE, mode="bilinear", align_corners=False)


class OoDDecoder(nn.Module):
    """Per-location MLP (three hidden layers) with a sigmoid output.

    Implemented with 1×1 convolutions so it runs directly on feature maps;
    each location is processed independently.
    """

    def __init__(self, width: int):
        super().__init__()
        layers = []
        for _ in range(3):
            layers += [nn.Conv2d(width, width, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(width, 1, 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, features):
        scores = torch.sigmoid(self.mlp(features))
        return F.interpolate(scores, scale_factor=STRIDE, mode="bilinear", align_corners=False)


class ProjectionHead(nn.Module):
    def __init__(self, width: int, out_dim: int = PROJECTION_DIM):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(width, width, bias=False),
            nn.BatchNorm1d(width),
            nn.ReLU(inplace=True),
            nn.Linear(width, width, bias=False),
            nn.BatchNorm1d(width),
            nn.ReLU(inplace=True),
            nn.Linear(width, out_dim),
        )

    def forward(self, z):
        return self.mlp(z)


class ModelBundle(nn.Module):
    """All four components plus bookkeeping of which stages have run."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.encoder = Encoder(c.width)
        self.seg_decoder = SegDecoder(c.width, c.num_classes)
        self.ood_decoder = OoDDecoder(c.width)
        self.proj_head = ProjectionHead(c.width, c.projection_dim)
        self.stages_completed: list[str] = []
        self.ood_decoder_trained = False

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)


def forward_features(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    h, w = images.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"input {h}x{w} is not divisible by the encoder stride {STRIDE}")
    # channels-last inputs crash some CPU conv backward kernels
    return bundle.encoder(images.contiguous())


def forward_segmentation(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    return bundle.seg_decoder(features)


def forward_ood(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    return bundle.ood_decoder(features)


def project(bundle: ModelBundle, vectors: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Projection for the contrastive losses; refuses to run outside training."""
    if not bundle.training or not bundle.proj_head.training:
        raise RuntimeError("projection head is training-only; bundle is in inference mode")
    if vectors.shape[0] == 0:
        return vectors.new_zeros((0, bundle.config.projection_dim))
    z = bundle.proj_head(vectors)
    return F.normalize(z, dim=1, eps=1e-12) if normalize else z


# ---------------------------------------------------------------------------
# Feature batches


@dataclass
class FeatureBatch:
    vectors: torch.Tensor  # N×C
    labels: torch.Tensor  # N, 0 = in-dist, 1 = OoD
    image_index: torch.Tensor  # N

    @property
    def num_in_dist(self) -> int:
        return int((self.labels == 0).sum())

    @property
    def num_ood(self) -> int:
        return int((self.labels == 1).sum())


def cell_labels(ood_labels: np.ndarray | torch.Tensor, stride: int = STRIDE) -> np.ndarray:
    """Majority vote of each stride×stride cell; a tie counts as OoD."""
    ood = np.asarray(ood_labels.cpu() if isinstance(ood_labels, torch.Tensor) else ood_labels)
    b, h, w = ood.shape
    cells = ood.reshape(b, h // stride, stride, w // stride, stride).sum(axis=(2, 4))
    return (2 * cells >= stride * stride).astype(np.int64)


def build_feature_batch(
    features: torch.Tensor,
    ood_labels: np.ndarray | torch.Tensor,
    max_per_image: int,
    rng: np.random.Generator,
) -> FeatureBatch:
    if max_per_image < 2:
        raise ValueError("max_per_image must be >= 2")
    b, c, fh, fw = features.shape
    labels = cell_labels(ood_labels).reshape(b, fh * fw)
    flat = features.permute(0, 2, 3, 1).reshape(b * fh * fw, c)
    keep = []
    for i in range(b):
        idx = np.arange(fh * fw)
        if idx.size > max_per_image:
            idx = np.sort(rng.choice(idx, size=max_per_image, replace=False))
        keep.append(i * fh * fw + idx)
    keep = np.concatenate(keep)
    keep_t = torch.as_tensor(keep, dtype=torch.long, device=features.device)
    return FeatureBatch(
        vectors=flat.index_select(0, keep_t),
        labels=torch.as_tensor(labels.reshape(-1)[keep], device=features.device),
        image_index=torch.as_tensor(keep // (fh * fw), device=features.device),
    )


# ---------------------------------------------------------------------------
# Parameter bookkeeping and checkpoints


def component_checksum(bundle: ModelBundle, names) -> str:
    """SHA-256 over the parameters and buffers of the named components."""
    if isinstance(names, str):
        names = [names]
    h = hashlib.sha256()
    for name in names:
        for key, t in sorted(bundle.component(name).state_dict().items()):
            h.update(f"{name}.{key}".encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(bundle: ModelBundle, path: Path | str, stage: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "config": asdict(bundle.config),
            "stage": stage,
            "stages_completed": list(bundle.stages_completed),
            "ood_decoder_trained": bundle.ood_decoder_trained,
            "state": {name: bundle.component(name).state_dict() for name in COMPONENTS},
        },
        path,
    )
    return path


def load_checkpoint(path: Path | str) -> tuple[ModelBundle, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    bundle = ModelBundle(ModelConfig(**blob["config"]))
    for name in COMPONENTS:
        bundle.component(name).load_state_dict(blob["state"][name])
    bundle.stages_completed = list(blob["stages_completed"])
    bundle.ood_decoder_trained = bool(blob["ood_decoder_trained"])
    return bundle, blob["stage"]
