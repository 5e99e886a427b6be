"""Architecture configuration.

Stage layout: ``shallow_layers`` stages feed the cross-attention branch and
``deep_layers`` stages feed the self-attention branch. Stage ``i`` (1-based)
runs at ``1 / min(2**(i-1), 4)`` of the input resolution, so the default
3 + 1 layout is 1, 1/2, 1/4, 1/4 and every stage is aligned to ``H/16`` by a
strided convolution with kernel = stride = ``16 / scale``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

# widths of the shallow stages, in order
SHALLOW_WIDTHS = (32, 64, 128)
MIN_DEEP_WIDTH = 64
FUSIONS = ("adsf", "concat")


def default_stage_channels(shallow_layers: int, deep_layers: int) -> tuple[int, ...]:
    """Channel ladder: shallow stages take 32, 64, 128; the first deep stage
    repeats the last shallow width (at least 64) and further deep stages double."""
    shallow = list(SHALLOW_WIDTHS[:shallow_layers])
    deep = [max(shallow[-1], MIN_DEEP_WIDTH)]
    for _ in range(deep_layers - 1):
        deep.append(deep[-1] * 2)
    return tuple(shallow + deep)


def stage_scale(stage: int) -> int:
    """Downsampling denominator of 1-based ``stage``."""
    return min(2 ** (stage - 1), 4)


@dataclass
class ModelConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] | None = None
    patch_size: int = 16
    shallow_layers: int = 3
    deep_layers: int = 1
    strip_kernels: tuple[int, ...] = (7, 11, 21)
    temperature: float | str = "learnable"
    bandwidth_k: int = 3
    input_size: tuple[int, int] = (256, 256)
    # ablation switches
    residual_blocks: bool = True
    deep_supervision: bool = True
    shallow_branch: bool = True
    deep_branch: bool = True
    use_msm: bool = True
    heads: int = 1
    use_pam: bool = True
    learnable_fusion: bool = True
    fusion: str = "adsf"
    pam_max_tokens: int = 4096
    patch_strides: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.strip_kernels = tuple(int(k) for k in self.strip_kernels)
        self.input_size = tuple(int(v) for v in self.input_size)
        if not isinstance(self.temperature, str):
            self.temperature = float(self.temperature)
        for name in ("shallow_layers", "deep_layers"):
            if getattr(self, name) not in (1, 2, 3):
                raise ConfigError(name, f"must be 1, 2 or 3, got {getattr(self, name)!r}")
        if self.stage_channels is None:
            self.stage_channels = default_stage_channels(self.shallow_layers, self.deep_layers)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        derived = tuple(self.patch_size // stage_scale(i + 1) for i in range(self.num_stages))
        if self.patch_strides is not None and tuple(self.patch_strides) != derived:
            raise ConfigError(
                "patch_strides",
                f"{tuple(self.patch_strides)} does not map stage scales "
                f"{self.scales} to 1/{self.patch_size}; expected {derived}")
        self.patch_strides = derived
        self.validate()

    @property
    def num_stages(self) -> int:
        return self.shallow_layers + self.deep_layers

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(stage_scale(i + 1) for i in range(self.num_stages))

    @property
    def shallow_channels(self) -> tuple[int, ...]:
        return self.stage_channels[: self.shallow_layers]

    @property
    def deep_channels(self) -> tuple[int, ...]:
        return self.stage_channels[self.shallow_layers:]

    @property
    def grid_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.patch_size, w // self.patch_size

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels", "must be positive")
        if len(self.stage_channels) != self.num_stages:
            raise ConfigError(
                "stage_channels",
                f"expected {self.num_stages} entries for {self.shallow_layers} shallow + "
                f"{self.deep_layers} deep layers, got {len(self.stage_channels)}")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels", "all channel counts must be positive")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ConfigError("patch_size", "must be a positive multiple of 4")
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                "input_size", f"{self.input_size} is not divisible by patch size {self.patch_size}")
        if not self.strip_kernels or any(k < 1 or k % 2 == 0 for k in self.strip_kernels):
            raise ConfigError("strip_kernels", "kernels must be odd positive integers")
        if isinstance(self.temperature, str):
            if self.temperature != "learnable":
                raise ConfigError("temperature", "must be a positive number or 'learnable'")
        elif not self.temperature > 0:
            raise ConfigError("temperature", "must be positive")
        k = self.bandwidth_k
        if k < 1 or k % 2 == 0:
            raise ConfigError("bandwidth_k", f"must be odd and >= 1, got {k}")
        if k > min(self.stage_channels):
            raise ConfigError("bandwidth_k", f"{k} exceeds the narrowest stage ({min(self.stage_channels)})")
        if self.heads < 1:
            raise ConfigError("heads", "must be >= 1")
        if self.heads > 1:
            widths = list(self.stage_channels) + [sum(self.shallow_channels)]
            bad = [c for c in widths if c % self.heads]
            if bad:
                raise ConfigError("heads", f"{self.heads} heads do not divide channel counts {bad}")
        if self.fusion not in FUSIONS:
            raise ConfigError("fusion", f"must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "concat" and not self.learnable_fusion:
            raise ConfigError("learnable_fusion", "has no meaning with fusion='concat'")
        if self.pam_max_tokens < 1:
            raise ConfigError("pam_max_tokens", "must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config key")
        kwargs = dict(d)
        for key in ("stage_channels", "strip_kernels", "input_size", "patch_strides"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))
