"""Encoder + linear head, and the checkpoint file format.

Checkpoint layout::

    b"DBCK" | uint32 header length | JSON header | torch state_dict bytes

The header carries the format version, architecture id, embedding size,
normalization statistics, a config hash and a SHA-256 of the payload, so a
truncated or edited file is detected before any weights are touched.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
from torch import nn

from .dataset import N_CLASSES, NormStats

FORMAT_VERSION = 1
MAGIC = b"DBCK"
DEFAULT_ARCH = "cnn4"
DEFAULT_DIM = 128


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        nn.GroupNorm(min(4, c_out), c_out),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """Four stride-2 conv blocks, global average pool, linear projection."""

    def __init__(self, in_channels: int = 1, dim: int = DEFAULT_DIM,
                 widths: tuple[int, ...] = (8, 16, 32, 64)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers.append(_block(c, w))
            c = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(c, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.features(x)).flatten(1))


class ToyEncoder(nn.Module):
    """Three smooth layers; small enough for finite-difference checks."""

    def __init__(self, in_channels: int = 1, dim: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 4, 5, stride=4, padding=2)
        self.conv2 = nn.Conv2d(4, 6, 3, stride=2, padding=1)
        self.proj = nn.Linear(6, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.conv1(x))
        h = torch.tanh(self.conv2(h))
        return self.proj(h.mean(dim=(2, 3)))


ARCHITECTURES = {"cnn4": ConvEncoder, "toy3": ToyEncoder}


class Classifier(nn.Module):
    """Standardize -> encoder f(.) -> affine head.

    Inputs are ``(N, C, H, W)`` pixels in [0, 1]; standardization with the
    training-split statistics happens inside the module so every consumer
    (trainer, explainer, evaluator) feeds raw unit-scale images.
    """

    def __init__(self, arch: str = DEFAULT_ARCH, dim: int = DEFAULT_DIM,
                 norm: Optional[NormStats] = None, in_channels: int = 1,
                 n_classes: int = N_CLASSES, input_size: Optional[int] = 224):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ArchitectureMismatch(f"unknown architecture {arch!r}")
        self.arch = arch
        self.dim = dim
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.input_size = input_size
        norm = norm or NormStats(mean=[0.0] * in_channels, std=[1.0] * in_channels)
        self.norm = norm
        self.register_buffer("mean", torch.tensor(norm.mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(norm.std, dtype=torch.float32).view(1, -1, 1, 1))
        self.encoder = ARCHITECTURES[arch](in_channels=in_channels, dim=dim)
        self.head = nn.Linear(dim, n_classes)

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        if self.input_size is not None and tuple(x.shape[2:]) != (self.input_size, self.input_size):
            raise ValueError(f"expected {self.input_size}x{self.input_size} input, got {tuple(x.shape[2:])}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.encoder((x - self.mean) / self.std)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.dim:
            raise ValueError(f"embedding dim {z.shape[-1]} != {self.dim}")
        return self.head(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.encode(x))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor, batch_size: int = 250) -> torch.Tensor:
        was = self.training
        self.eval()
        out = [torch.softmax(self(x[i:i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
        self.train(was)
        return torch.cat(out)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax; ties resolve to the lowest class index."""
    return logits.argmax(dim=-1)


@dataclass
class ModelCheckpoint:
    state_dict: dict[str, torch.Tensor]
    architecture_id: str
    dim: int
    n_classes: int
    norm: NormStats
    config_hash: str = ""
    format_version: int = FORMAT_VERSION
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Classifier, config_hash: str = "", meta: Optional[dict] = None) -> "ModelCheckpoint":
        sd = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(state_dict=sd, architecture_id=model.arch, dim=model.dim,
                   n_classes=model.n_classes, norm=model.norm, config_hash=config_hash,
                   meta=dict(meta or {}))

    def build(self) -> Classifier:
        model = Classifier(arch=self.architecture_id, dim=self.dim, norm=self.norm,
                           in_channels=len(self.norm.mean), n_classes=self.n_classes)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save(ckpt: ModelCheckpoint, path: Path | str) -> None:
    buf = io.BytesIO()
    torch.save(ckpt.state_dict, buf)
    payload = buf.getvalue()
    header = {
        "format_version": ckpt.format_version,
        "architecture_id": ckpt.architecture_id,
        "dim": ckpt.dim,
        "n_classes": ckpt.n_classes,
        "normalization": {"mean": ckpt.norm.mean, "std": ckpt.norm.std},
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def load(path: Path | str, expect_arch: Optional[str] = None,
         expect_dim: Optional[int] = None) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = raw[8 + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload truncated or modified")
    if expect_arch is not None and header["architecture_id"] != expect_arch:
        raise ArchitectureMismatch(f"{path}: architecture {header['architecture_id']!r} != {expect_arch!r}")
    if expect_dim is not None and header["dim"] != expect_dim:
        raise ArchitectureMismatch(f"{path}: embedding dim {header['dim']} != {expect_dim}")
    state = torch.load(io.BytesIO(payload), weights_only=True)
    return ModelCheckpoint(
        state_dict=state,
        architecture_id=header["architecture_id"],
        dim=header["dim"],
        n_classes=header["n_classes"],
        norm=NormStats(**header["normalization"]),
        config_hash=header["config_hash"],
        format_version=header["format_version"],
        meta=header.get("meta", {}),
    )
