"""Declarative architecture description for the encoder, projection and classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

from ..errors import ConfigurationError

ENCODER_FEATURE_DIM = 1024
COMBINE_MODES = ("multiplicative", "additive")


def _require_positive(owner: str, **values: int) -> None:
    for name, value in values.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigurationError(f"{owner}.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class PEPXConfig:
    """Channel plan of one projection-expansion-projection-extension block.

    The five layers map ``in -> proj1 -> expand -> (depthwise) expand -> proj2 -> out``.
    """

    in_channels: int
    proj1_channels: int
    proj2_channels: int
    expand_channels: int
    out_channels: int
    bias: bool = True

    def __post_init__(self) -> None:
        _require_positive(
            "PEPXConfig",
            in_channels=self.in_channels,
            proj1_channels=self.proj1_channels,
            proj2_channels=self.proj2_channels,
            expand_channels=self.expand_channels,
            out_channels=self.out_channels,
        )
        if self.proj1_channels > self.in_channels:
            raise ConfigurationError(
                f"proj1_channels ({self.proj1_channels}) exceeds in_channels ({self.in_channels})"
            )
        if self.proj2_channels > self.expand_channels:
            raise ConfigurationError(
                f"proj2_channels ({self.proj2_channels}) exceeds expand_channels ({self.expand_channels})"
            )

    @classmethod
    def for_widths(cls, in_channels: int, out_channels: int, bias: bool = True) -> PEPXConfig:
        """Default channel plan used inside encoder stages."""
        return cls(
            in_channels=in_channels,
            proj1_channels=max(1, in_channels // 2),
            proj2_channels=max(1, out_channels // 2),
            expand_channels=max(1, (3 * out_channels) // 4),
            out_channels=out_channels,
            bias=bias,
        )

    def parameter_count(self) -> int:
        c = self
        n = (
            c.in_channels * c.proj1_channels
            + c.proj1_channels * c.expand_channels
            + 9 * c.expand_channels
            + c.expand_channels * c.proj2_channels
            + c.proj2_channels * c.out_channels
        )
        if c.bias:
            n += c.proj1_channels + 2 * c.expand_channels + c.proj2_channels + c.out_channels
        return n


@dataclass(frozen=True)
class AttentionGateConfig:
    x_channels: int
    g_channels: int
    inter_channels: int
    combine_mode: str = "multiplicative"

    def __post_init__(self) -> None:
        _require_positive(
            "AttentionGateConfig",
            x_channels=self.x_channels,
            g_channels=self.g_channels,
            inter_channels=self.inter_channels,
        )
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigurationError(
                f"combine_mode must be one of {COMBINE_MODES}, got {self.combine_mode!r}"
            )

    def parameter_count(self) -> int:
        # theta (x -> inter), phi (g -> inter), psi (inter -> 1), all with bias
        return (
            self.x_channels * self.inter_channels
            + self.inter_channels
            + self.g_channels * self.inter_channels
            + self.inter_channels
            + self.inter_channels
            + 1
        )


@dataclass(frozen=True)
class StageConfig:
    pepx_count: int
    out_channels: int
    attention_gate: bool = False

    def __post_init__(self) -> None:
        _require_positive("StageConfig", pepx_count=self.pepx_count, out_channels=self.out_channels)


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder layout: a stem convolution, a sequence of PEPX stages, pooling, a dense layer.

    Each stage is followed by a 2x max-pool. A stage with ``attention_gate`` set
    receives a gated long-range connection from the previous stage's output,
    using its own output as the gating signal.
    """

    input_height: int = 224
    input_width: int = 224
    input_channels: int = 3
    stem_channels: int = 56
    stem_kernel: int = 7
    stem_stride: int = 2
    stages: tuple[StageConfig, ...] = (
        StageConfig(3, 64, False),
        StageConfig(4, 128, True),
        StageConfig(6, 256, True),
        StageConfig(3, 512, True),
    )
    feature_dim: int = ENCODER_FEATURE_DIM
    combine_mode: str = "multiplicative"

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "stages",
            tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages),
        )
        _require_positive(
            "EncoderConfig",
            input_height=self.input_height,
            input_width=self.input_width,
            input_channels=self.input_channels,
            stem_channels=self.stem_channels,
            stem_kernel=self.stem_kernel,
            stem_stride=self.stem_stride,
        )
        if self.feature_dim != ENCODER_FEATURE_DIM:
            raise ConfigurationError(
                f"feature_dim must be {ENCODER_FEATURE_DIM}, got {self.feature_dim}"
            )
        if not self.stages:
            raise ConfigurationError("EncoderConfig needs at least one stage")
        if self.stages[0].attention_gate:
            raise ConfigurationError("the first stage has no earlier stage to gate")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigurationError(
                f"combine_mode must be one of {COMBINE_MODES}, got {self.combine_mode!r}"
            )
        h, w = self.stem_output_size()
        for i, _ in enumerate(self.stages, start=1):
            if h < 2 or w < 2:
                raise ConfigurationError(
                    f"stage{i} input is {h}x{w}; every stage needs at least 2x2 for its max-pool"
                )
            h, w = h // 2, w // 2

    @classmethod
    def desk(cls, size: int = 32) -> EncoderConfig:
        """Small layout for laptop-scale runs and tests."""
        return cls(
            input_height=size,
            input_width=size,
            stem_channels=8,
            stem_kernel=7,
            stem_stride=1,
            stages=(StageConfig(1, 16, False), StageConfig(1, 32, True), StageConfig(1, 64, True)),
        )

    def stem_output_size(self) -> tuple[int, int]:
        pad = self.stem_kernel // 2
        h = (self.input_height + 2 * pad - self.stem_kernel) // self.stem_stride + 1
        w = (self.input_width + 2 * pad - self.stem_kernel) // self.stem_stride + 1
        return h, w

    def stage_channels(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) for every stage."""
        widths = []
        prev = self.stem_channels
        for stage in self.stages:
            widths.append((prev, stage.out_channels))
            prev = stage.out_channels
        return widths

    def pepx_configs(self, stage_index: int) -> list[PEPXConfig]:
        c_in, c_out = self.stage_channels()[stage_index]
        stage = self.stages[stage_index]
        first = PEPXConfig.for_widths(c_in, c_out)
        rest = [PEPXConfig.for_widths(c_out, c_out) for _ in range(stage.pepx_count - 1)]
        return [first, *rest]

    def gate_config(self, stage_index: int) -> AttentionGateConfig | None:
        if not self.stages[stage_index].attention_gate:
            return None
        x_channels = self.stage_channels()[stage_index - 1][1]
        g_channels = self.stages[stage_index].out_channels
        return AttentionGateConfig(
            x_channels=x_channels,
            g_channels=g_channels,
            inter_channels=max(1, x_channels // 2),
            combine_mode=self.combine_mode,
        )

    def parameter_count(self) -> int:
        """Number of scalar parameters, derived from the config alone."""
        k = self.stem_kernel
        n = self.input_channels * k * k * self.stem_channels + self.stem_channels
        for i, (c_in, c_out) in enumerate(self.stage_channels()):
            n += c_in * c_out + c_out  # shortcut 1x1
            n += sum(p.parameter_count() for p in self.pepx_configs(i))
            gate = self.gate_config(i)
            if gate is not None:
                n += gate.parameter_count()
                n += gate.x_channels * c_out + c_out  # merge 1x1
        last = self.stages[-1].out_channels
        n += last * self.feature_dim + self.feature_dim
        return n


@dataclass(frozen=True)
class ProjectionHeadConfig:
    input_dim: int = ENCODER_FEATURE_DIM
    hidden_dim: int = 512
    output_dim: int = 128

    def __post_init__(self) -> None:
        _require_positive(
            "ProjectionHeadConfig",
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            output_dim=self.output_dim,
        )

    def parameter_count(self) -> int:
        return (
            self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.output_dim
            + self.output_dim
        )


@dataclass(frozen=True)
class ClassifierConfig:
    input_dim: int = ENCODER_FEATURE_DIM
    num_classes: int = 3
    layer_dims: tuple[int, int, int] = (256, 64, 3)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_dims", tuple(self.layer_dims))
        _require_positive("ClassifierConfig", input_dim=self.input_dim, num_classes=self.num_classes)
        if len(self.layer_dims) != 3:
            raise ConfigurationError(f"classifier needs exactly 3 layers, got {len(self.layer_dims)}")
        for d in self.layer_dims:
            _require_positive("ClassifierConfig", layer_dim=d)
        if self.layer_dims[-1] != self.num_classes:
            raise ConfigurationError(
                f"final layer width {self.layer_dims[-1]} != num_classes {self.num_classes}"
            )

    def parameter_count(self) -> int:
        n, prev = 0, self.input_dim
        for d in self.layer_dims:
            n += prev * d + d
            prev = d
        return n


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionHeadConfig = field(default_factory=ProjectionHeadConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self) -> None:
        if self.projection.input_dim != self.encoder.feature_dim:
            raise ConfigurationError("projection input_dim must equal the encoder feature_dim")
        if self.classifier.input_dim != self.encoder.feature_dim:
            raise ConfigurationError("classifier input_dim must equal the encoder feature_dim")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder"]["stages"] = [dict(s) for s in d["encoder"]["stages"]]
        d["classifier"]["layer_dims"] = list(d["classifier"]["layer_dims"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        try:
            enc = dict(d.get("encoder", {}))
            if "stages" in enc:
                enc["stages"] = tuple(StageConfig(**s) for s in enc["stages"])
            return cls(
                encoder=EncoderConfig(**enc),
                projection=ProjectionHeadConfig(**d.get("projection", {})),
                classifier=ClassifierConfig(**d.get("classifier", {})),
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid model config: {exc}") from exc
