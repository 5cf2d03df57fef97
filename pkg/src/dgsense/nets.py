"""Feature extractors and classifiers.

Temporal input is ``(batch, channels, time)``; image input is
``(batch, channels, height, width)``. Rank-2 image modalities gain a
singleton channel axis in :func:`as_batch`.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ArgumentError, Modality, ModalityKind, Sample

PRESETS = {
    "small": {"widths": (16, 32), "blocks": (2, 2), "temporal": (16, 32, 32)},
    "resnet18": {"widths": (64, 128, 256, 512), "blocks": (2, 2, 2, 2), "temporal": (64, 128, 128)},
}


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        avg = self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3)))))
        mx = self.fc2(F.relu(self.fc1(x.amax(dim=(2, 3)))))
        return torch.sigmoid(avg + mx)[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel gate followed by spatial gate, both multiplicative."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)

    @torch.no_grad()
    def saturate(self, value: float = 100.0) -> None:
        """Test hook: force both gates to sigmoid(value), i.e. 1 for large values."""
        for layer in (self.channel.fc1, self.channel.fc2, self.spatial.conv):
            layer.weight.zero_()
        self.channel.fc1.bias.zero_()
        self.channel.fc2.bias.fill_(value / 2)  # avg and max branches are summed
        self.spatial.conv.bias.fill_(value)


def cbam_attention(feature_map: torch.Tensor, module: CBAM) -> torch.Tensor:
    """Apply ``module`` to a single C x H x W map or a batch."""
    if feature_map.dim() == 3:
        return module(feature_map[None])[0]
    return module(feature_map)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, attention: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.cbam = CBAM(out_ch) if attention else nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def path(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return self.cbam(self.bn2(self.conv2(out)))

    def forward(self, x):
        return F.relu(self.path(x) + self.shortcut(x))


class SpatialExtractor(nn.Module):
    def __init__(self, in_channels: int, feature_dim: int = 128, preset: str = "small"):
        super().__init__()
        cfg = PRESETS[preset]
        widths, blocks = cfg["widths"], cfg["blocks"]
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        layers = []
        prev = widths[0]
        for i, (w, nb) in enumerate(zip(widths, blocks)):
            for b in range(nb):
                layers.append(ResidualBlock(prev, w, stride=2 if (i > 0 and b == 0) else 1))
                prev = w
        self.stages = nn.Sequential(*layers)
        self.head = nn.Linear(prev, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.head(x.mean(dim=(2, 3)))


class TemporalBlock(nn.Module):
    """conv -> relu -> max-pool over time."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 5, pool: int = 2):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, padding=kernel // 2)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.conv(x))
        if self.pool > 1 and x.shape[-1] >= self.pool:
            x = F.max_pool1d(x, self.pool)
        return x


class TemporalExtractor(nn.Module):
    def __init__(self, in_channels: int, feature_dim: int = 128, preset: str = "small"):
        super().__init__()
        widths = PRESETS[preset]["temporal"]
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(TemporalBlock(prev, w))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(prev, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.head(self.blocks(x).mean(dim=2))


def fuse_features(f_am, f_ph, f_sp, alpha: Sequence[float]) -> torch.Tensor:
    if len(alpha) != 3:
        raise ArgumentError("alpha needs three weights")
    if not (f_am.shape == f_ph.shape == f_sp.shape):
        raise ArgumentError(f"feature shapes differ: {tuple(f_am.shape)}, {tuple(f_ph.shape)}, {tuple(f_sp.shape)}")
    a1, a2, a3 = (float(a) for a in alpha)
    return a1 * f_am + a2 * f_ph + a3 * f_sp


class CompositeExtractor(nn.Module):
    """One extractor per modality, fused by a fixed weighted sum."""

    def __init__(self, modalities: Sequence[Modality], feature_dim: int = 128, preset: str = "small",
                 alpha: Sequence[float] | None = None):
        super().__init__()
        self.kinds = [m.kind for m in modalities]
        self.branches = nn.ModuleDict({m.kind.value: build_branch(m, feature_dim, preset) for m in modalities})
        if alpha is None or len(alpha) != len(modalities):
            alpha = [1.0 / len(modalities)] * len(modalities)
        self.alpha = tuple(float(a) for a in alpha)
        self.feature_dim = feature_dim

    def forward(self, batch: Mapping[ModalityKind, torch.Tensor]):
        feats = [self.branches[k.value](batch[k]) for k in self.kinds]
        if len(feats) == 3:
            return fuse_features(*feats, self.alpha)
        out = self.alpha[0] * feats[0]
        for a, f in zip(self.alpha[1:], feats[1:]):
            out = out + a * f
        return out


def build_branch(modality: Modality, feature_dim: int, preset: str) -> nn.Module:
    if modality.is_series:
        return TemporalExtractor(modality.channels, feature_dim, preset)
    return SpatialExtractor(modality.channels, feature_dim, preset)


class Classifier(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, num_classes)
        self.feature_dim = feature_dim
        self.num_classes = num_classes

    def forward(self, f):
        if f.shape[-1] != self.feature_dim:
            raise ArgumentError(f"classifier expects {self.feature_dim} features, got {f.shape[-1]}")
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(f)))))


class Extractor(nn.Module):
    """Uniform front door: accepts a mapping kind -> batch tensor."""

    def __init__(self, modalities: Sequence[Modality], feature_dim: int = 128, preset: str = "small",
                 alpha: Sequence[float] | None = None):
        super().__init__()
        self.modalities = tuple(modalities)
        self.body = CompositeExtractor(modalities, feature_dim, preset, alpha)
        self.feature_dim = feature_dim

    def forward(self, batch: Mapping[ModalityKind, torch.Tensor]):
        for m in self.modalities:
            x = batch.get(m.kind)
            if x is None:
                raise ArgumentError(f"missing modality {m.kind}")
            expected = (m.channels, *m.spatial)
            if tuple(x.shape[1:]) != expected:
                raise ArgumentError(f"{m.kind}: expected per-sample shape {expected}, got {tuple(x.shape[1:])}")
        return self.body(batch)


def classify(f: torch.Tensor, clf: Classifier) -> torch.Tensor:
    return clf(f)


def predict(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. the lowest class
    return torch.argmax(logits, dim=-1)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample -log softmax(logits)[label] via log-sum-exp."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    squeeze = logits.dim() == 1
    if squeeze:
        logits, labels = logits[None], labels.reshape(1)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ArgumentError(f"labels must lie in [0, {k})")
    out = torch.logsumexp(logits, dim=-1) - logits.gather(1, labels[:, None])[:, 0]
    return out[0] if squeeze else out


@torch.no_grad()
def init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Fan-in scaled uniform init drawn from ``gen`` (no global RNG use)."""
    for name, p in module.named_parameters():
        if p.dim() > 1:
            fan_in = p[0].numel()
            bound = math.sqrt(6.0 / fan_in)  # He-uniform
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
        elif name.endswith("bias"):
            p.zero_()
        else:
            p.fill_(1.0)  # normalisation scales
    for m in module.modules():
        if isinstance(m, CBAM):
            # start the gates mildly open
            m.channel.fc2.bias.fill_(1.0)
            m.spatial.conv.bias.fill_(2.0)


def as_batch(samples: Sequence[Sample], modalities: Sequence[Modality],
             dtype=torch.float32) -> dict[ModalityKind, torch.Tensor]:
    batch = {}
    for m in modalities:
        arr = np.stack([s.tensors[m.kind] for s in samples])
        arr = arr.reshape(len(samples), m.channels, *m.spatial)
        batch[m.kind] = torch.tensor(arr, dtype=dtype)
    return batch


def index_batch(batch: Mapping[ModalityKind, torch.Tensor], idx) -> dict[ModalityKind, torch.Tensor]:
    return {k: v[idx] for k, v in batch.items()}
