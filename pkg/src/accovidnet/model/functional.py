"""Stateless forward functions: ``op(input, config, params)``.

``params`` maps parameter names (as produced by ``named_parameters`` of the
matching module) to tensors. Inputs are either a single feature map
``(C, H, W)`` or a batch ``(N, C, H, W)``; feature vectors are ``(D,)`` or ``(N, D)``.
"""

from __future__ import annotations

from collections.abc import Mapping

import torch
from torch.func import functional_call

from ..errors import ConfigurationError, NumericError
from .config import (
    AttentionGateConfig,
    ClassifierConfig,
    EncoderConfig,
    PEPXConfig,
    ProjectionHeadConfig,
)
from .layers import PEPX, AttentionGate
from .networks import Classifier, Encoder, ProjectionHead


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def _check_params(params: Mapping[str, torch.Tensor]) -> None:
    for k, v in params.items():
        _check_finite(f"parameter {k}", v)


def _batched(t: torch.Tensor, single_rank: int) -> tuple[torch.Tensor, bool]:
    if t.dim() == single_rank:
        return t.unsqueeze(0), True
    return t, False


def _call(factory, config, params, *args):
    _check_params(params)
    with torch.device("meta"):
        module = factory(config)
    expected = {k for k, _ in module.named_parameters()}
    missing = sorted(expected - set(params))
    if missing:
        raise ConfigurationError(f"missing parameter {missing[0]!r}")
    return functional_call(module, dict(params), args, strict=True)


def pepx_forward(x: torch.Tensor, config: PEPXConfig, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    _check_finite("input", x)
    xb, single = _batched(x, 3)
    if xb.shape[1] != config.in_channels:
        raise ConfigurationError(f"expected {config.in_channels} channels, got {xb.shape[1]}")
    out = _call(PEPX, config, params, xb)
    return out[0] if single else out


def attention_gate_forward(
    x: torch.Tensor,
    g: torch.Tensor,
    config: AttentionGateConfig,
    params: Mapping[str, torch.Tensor],
) -> torch.Tensor:
    _check_finite("x", x)
    _check_finite("g", g)
    xb, single = _batched(x, 3)
    gb, _ = _batched(g, 3)
    out = _call(AttentionGate, config, params, xb, gb)
    return out[0] if single else out


def encoder_forward(
    image: torch.Tensor, config: EncoderConfig, params: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    _check_finite("image", image)
    xb, single = _batched(image, 3)
    out = _call(Encoder, config, params, xb)
    return out[0] if single else out


def projection_forward(
    h: torch.Tensor, config: ProjectionHeadConfig, params: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    _check_finite("features", h)
    hb, single = _batched(h, 1)
    out = _call(ProjectionHead, config, params, hb)
    return out[0] if single else out


def classifier_forward(
    h: torch.Tensor, config: ClassifierConfig, params: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    _check_finite("features", h)
    hb, single = _batched(h, 1)
    out = _call(Classifier, config, params, hb)
    return out[0] if single else out
