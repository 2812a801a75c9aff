"""CNN feature extractor + bidirectional LSTM head over slice sequences.

A 2D backbone embeds each slice independently (batch and sequence axes are
folded together for the backbone pass), then a stacked bidirectional LSTM
links the per-slice features along the scan and a shared affine head emits 6
logits per slice. Scans are batched as padded variable-length sequences; the
LSTM consumes packed sequences and the backbone only ever sees valid slices,
so padding cannot influence any valid position or the loss.

Backbones are looked up in a registry: ``tiny`` is a small GroupNorm conv
stack with configurable output width for desk-scale runs and tests;
``resnet50`` / ``resnet18`` wrap torchvision residual nets (optionally
initialized from an externally pretrained weights file) for full-scale
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .metrics import NUM_CLASSES

# pre-sigmoid per-slice outputs, shape (B, S, num_classes)
SliceLogits = torch.Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet50"
    feature_dim: int = 2048
    lstm_hidden: int = 512
    lstm_layers: int = 2
    num_classes: int = NUM_CLASSES
    input_size: tuple[int, int] = (512, 512)
    channel_norm: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None
    dropout: float = 0.0
    backbone_weights: str | None = None  # optional path to externally pretrained weights

    def __post_init__(self):
        if self.feature_dim <= 0 or self.lstm_hidden <= 0 or self.lstm_layers < 1:
            raise ConfigError(f"invalid model dimensions: {self}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"this task uses {NUM_CLASSES} classes, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")


@dataclass
class SequenceBatch:
    """Padded batch of windowed scan sequences.

    images[b, s] is zero-filled and label_mask[b, s] is False for s >= lengths[b].
    """

    images: torch.Tensor  # (B, S, 3, H, W) float32
    lengths: torch.Tensor  # (B,) int64
    labels: torch.Tensor  # (B, S, 6) float32
    label_mask: torch.Tensor  # (B, S) bool
    study_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        b, s = self.images.shape[0], self.images.shape[1]
        if self.lengths.shape != (b,):
            raise ValueError("lengths shape mismatch")
        if torch.any(self.lengths < 1) or torch.any(self.lengths > s):
            raise ValueError("lengths must satisfy 1 <= length <= S_max")
        expected_mask = torch.arange(s).unsqueeze(0) < self.lengths.unsqueeze(1)
        if not torch.equal(self.label_mask, expected_mask):
            raise ValueError("label_mask must be true exactly at positions < length")

    @property
    def n_valid(self) -> int:
        return int(self.lengths.sum().item())


def collate_scans(
    scans: list[tuple[np.ndarray, np.ndarray | None]],
    study_ids: list[str] | None = None,
) -> SequenceBatch:
    """Pad a list of (images (S,3,H,W), labels (S,6) or None) scans into one batch."""
    if not scans:
        raise ValueError("cannot collate an empty scan list")
    lengths = [imgs.shape[0] for imgs, _ in scans]
    s_max = max(lengths)
    b = len(scans)
    _, c, h, w = scans[0][0].shape
    images = torch.zeros((b, s_max, c, h, w), dtype=torch.float32)
    labels = torch.zeros((b, s_max, NUM_CLASSES), dtype=torch.float32)
    for i, (imgs, labs) in enumerate(scans):
        images[i, : lengths[i]] = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32))
        if labs is not None:
            labels[i, : lengths[i]] = torch.from_numpy(np.ascontiguousarray(labs, dtype=np.float32))
    lengths_t = torch.tensor(lengths, dtype=torch.int64)
    mask = torch.arange(s_max).unsqueeze(0) < lengths_t.unsqueeze(1)
    return SequenceBatch(
        images=images,
        lengths=lengths_t,
        labels=labels,
        label_mask=mask,
        study_ids=study_ids or [f"scan{i}" for i in range(b)],
    )


# ---------------------------------------------------------------------------
# backbone registry

BackboneFactory = Callable[[ModelConfig], nn.Module]
_BACKBONES: dict[str, BackboneFactory] = {}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    _BACKBONES[name] = factory


def build_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone not in _BACKBONES:
        raise ConfigError(
            f"unknown backbone {cfg.backbone!r}; registered: {sorted(_BACKBONES)}"
        )
    return _BACKBONES[cfg.backbone](cfg)


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class TinyConvBackbone(nn.Module):
    """4 stride-2 conv blocks + global average pool; output width is configurable.

    GroupNorm keeps every sample's features independent of the rest of the
    batch, which the padding and batch-equivariance guarantees rely on.
    """

    def __init__(self, feature_dim: int):
        super().__init__()
        widths = [16, 32, 64, feature_dim]
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in widths:
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                _group_norm(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


def _make_tiny(cfg: ModelConfig) -> nn.Module:
    return TinyConvBackbone(cfg.feature_dim)


class _ResNetFeatures(nn.Module):
    def __init__(self, net: nn.Module):
        super().__init__()
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _make_resnet(arch: str, out_dim: int) -> BackboneFactory:
    def factory(cfg: ModelConfig) -> nn.Module:
        if cfg.feature_dim != out_dim:
            raise ConfigError(f"backbone {arch!r} produces {out_dim} features, config says {cfg.feature_dim}")
        from torchvision import models

        net = getattr(models, arch)(weights=None)
        if cfg.backbone_weights:
            state = torch.load(cfg.backbone_weights, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        return _ResNetFeatures(net)

    return factory


register_backbone("tiny", _make_tiny)
register_backbone("resnet50", _make_resnet("resnet50", 2048))
register_backbone("resnet18", _make_resnet("resnet18", 512))


# ---------------------------------------------------------------------------
# the sequence model


class SliceSequenceModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.lstm = nn.LSTM(
            input_size=cfg.feature_dim,
            hidden_size=cfg.lstm_hidden,
            num_layers=cfg.lstm_layers,
            batch_first=True,
            bidirectional=True,
            dropout=cfg.dropout if cfg.lstm_layers > 1 else 0.0,
        )
        self.head = nn.Linear(2 * cfg.lstm_hidden, cfg.num_classes)

    def extract_features(self, images: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Per-slice features (B, S, feature_dim) from images (B, S, 3, H, W).

        The backbone runs on a single folded batch axis. With ``lengths``
        given, only valid slices enter the backbone and padded rows of the
        result stay exactly zero.
        """
        b, s = images.shape[0], images.shape[1]
        if lengths is None:
            flat = images.reshape(b * s, *images.shape[2:])
            return self.backbone(flat).reshape(b, s, -1)
        mask = torch.arange(s, device=images.device).unsqueeze(0) < lengths.unsqueeze(1)
        feats_valid = self.backbone(images[mask])
        features = images.new_zeros((b, s, feats_valid.shape[-1]))
        features[mask] = feats_valid
        return features

    def sequence_head(self, features: torch.Tensor, lengths: torch.Tensor) -> SliceLogits:
        """Bidirectional LSTM over each scan's feature sequence, then a shared affine map to logits.

        Sequences are packed to their valid lengths, so padded positions never
        enter the recurrence in either direction.
        """
        b, s, d = features.shape
        if d != self.cfg.feature_dim:
            raise ValueError(f"features have width {d}, expected {self.cfg.feature_dim}")
        if torch.any(lengths > s):
            raise ValueError("lengths exceed the padded sequence length")
        packed = nn.utils.rnn.pack_padded_sequence(
            features, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        packed_out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(packed_out, batch_first=True, total_length=s)
        return self.head(out)

    def forward(self, batch: SequenceBatch) -> SliceLogits:
        features = self.extract_features(batch.images, batch.lengths)
        return self.sequence_head(features, batch.lengths)

    @torch.no_grad()
    def predict_proba(self, batch: SequenceBatch) -> torch.Tensor:
        """Per-slice probabilities (B, S, 6); meaningful only at masked-valid positions."""
        was_training = self.training
        self.eval()
        try:
            return torch.sigmoid(self.forward(batch))
        finally:
            self.train(was_training)


def build_model(cfg: ModelConfig) -> SliceSequenceModel:
    return SliceSequenceModel(cfg)
