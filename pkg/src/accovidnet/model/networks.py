"""Encoder, projection head and classifier networks."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError
from .config import ClassifierConfig, EncoderConfig, ModelConfig, ProjectionHeadConfig
from .layers import PEPX, AttentionGate

NORM_FLOOR = 1e-12


class EncoderStage(nn.Module):
    """A run of PEPX blocks with dense in-stage skips.

    Every block after the first sees the sum of the stage shortcut and all
    earlier block outputs.
    """

    def __init__(self, config: EncoderConfig, index: int):
        super().__init__()
        c_in, c_out = config.stage_channels()[index]
        self.shortcut = nn.Conv2d(c_in, c_out, 1)
        self.blocks = config.pepx_configs(index)
        for j, pepx_cfg in enumerate(self.blocks, start=1):
            self.add_module(f"pepx{j}", PEPX(pepx_cfg))
        gate_cfg = config.gate_config(index)
        if gate_cfg is not None:
            self.gate = AttentionGate(gate_cfg)
            self.merge = nn.Conv2d(gate_cfg.x_channels, c_out, 1)
        else:
            self.gate = None
            self.merge = None

    def pepx(self, j: int) -> PEPX:
        return getattr(self, f"pepx{j}")

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        acc = F.relu(self.shortcut(x)) + self.pepx(1)(x)
        for j in range(2, len(self.blocks) + 1):
            acc = acc + self.pepx(j)(acc)
        if self.gate is not None:
            if skip is None:
                raise ConfigurationError("a gated stage needs the previous stage output")
            gated = self.gate(skip, acc)
            acc = acc + F.relu(self.merge(F.max_pool2d(gated, 2)))
        return acc


class Encoder(nn.Module):
    """Maps an image batch ``(N, C, H, W)`` to a ``(N, 1024)`` feature batch."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Conv2d(
            config.input_channels,
            config.stem_channels,
            config.stem_kernel,
            stride=config.stem_stride,
            padding=config.stem_kernel // 2,
        )
        for i in range(len(config.stages)):
            self.add_module(f"stage{i + 1}", EncoderStage(config, i))
        self.fc = nn.Linear(config.stages[-1].out_channels, config.feature_dim)

    def stage(self, i: int) -> EncoderStage:
        return getattr(self, f"stage{i}")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigurationError(
                f"encoder expects (N, {expected[0]}, {expected[1]}, {expected[2]}) input, "
                f"got {tuple(images.shape)}"
            )
        x = F.relu(self.stem(images))
        prev = None
        for i in range(1, len(cfg.stages) + 1):
            y = self.stage(i)(x, skip=prev)
            prev = y
            x = F.max_pool2d(y, 2)
        pooled = x.mean(dim=(2, 3))
        return F.relu(self.fc(pooled))


def l2_normalize(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise unit normalization; zero rows stay zero and are flagged in the mask."""
    norms = z.norm(dim=-1, keepdim=True)
    degenerate = norms.squeeze(-1) <= NORM_FLOOR
    return z / norms.clamp_min(NORM_FLOOR), degenerate


class ProjectionHead(nn.Module):
    """1024 -> 512 (ReLU) -> 128, L2-normalized."""

    def __init__(self, config: ProjectionHeadConfig | None = None):
        super().__init__()
        self.config = config = config or ProjectionHeadConfig()
        self.fc1 = nn.Linear(config.input_dim, config.hidden_dim)
        self.fc2 = nn.Linear(config.hidden_dim, config.output_dim)

    def forward(self, h: torch.Tensor, return_mask: bool = False):
        if h.shape[-1] != self.config.input_dim:
            raise ConfigurationError(
                f"projection expects length {self.config.input_dim}, got {h.shape[-1]}"
            )
        z, degenerate = l2_normalize(self.fc2(F.relu(self.fc1(h))))
        if return_mask:
            return z, degenerate
        return z


class Classifier(nn.Module):
    """Three dense layers ending in a softmax over the classes."""

    def __init__(self, config: ClassifierConfig | None = None):
        super().__init__()
        self.config = config = config or ClassifierConfig()
        prev = config.input_dim
        for k, d in enumerate(config.layer_dims, start=1):
            self.add_module(f"fc{k}", nn.Linear(prev, d))
            prev = d

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.config.input_dim:
            raise ConfigurationError(
                f"classifier expects length {self.config.input_dim}, got {h.shape[-1]}"
            )
        h = F.relu(self.fc1(h))
        h = F.relu(self.fc2(h))
        return self.fc3(h)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(h), dim=-1)


class ACCovidNet(nn.Module):
    """Inference model ``C(E(x))`` returning class probabilities."""

    def __init__(self, encoder: Encoder, classifier: Classifier):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.encoder(images))


def init_parameters(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Fan-in scaled uniform weights, zero biases, drawn in parameter-name order."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = math.prod(p.shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            draw = torch.rand(p.shape, generator=generator, dtype=torch.float64)
            p.copy_((draw * 2.0 - 1.0) * bound)
    return module


def _generator(seed: int, offset: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) * 1_000_003 + offset)
    return g


def build_encoder(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> Encoder:
    return init_parameters(Encoder(config), _generator(seed, 1)).to(dtype)


def build_projection(
    config: ProjectionHeadConfig | None = None, seed: int = 0, dtype=torch.float32
) -> ProjectionHead:
    return init_parameters(ProjectionHead(config), _generator(seed, 2)).to(dtype)


def build_classifier(
    config: ClassifierConfig | None = None, seed: int = 0, dtype=torch.float32
) -> Classifier:
    return init_parameters(Classifier(config), _generator(seed, 3)).to(dtype)


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32):
    """Fresh ``(encoder, projection, classifier)`` triple."""
    return (
        build_encoder(config.encoder, seed, dtype),
        build_projection(config.projection, seed, dtype),
        build_classifier(config.classifier, seed, dtype),
    )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        arr = np.ascontiguousarray(p.detach().cpu().numpy())
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
