"""Model hyperparameters and their key=value file form."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .serialize import read_manifest, write_manifest

PROJECTOR_KINDS = ("linear", "mlp", "ldp", "ldpv2", "xdp")


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass(frozen=True)
class ProjectorConfig:
    kind: str = "xdp"
    in_dim: int = 32
    out_dim: int = 64
    target_tokens: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in PROJECTOR_KINDS:
            raise ValueError(f"unknown projector kind {self.kind!r}; expected one of {PROJECTOR_KINDS}")
        if self.target_tokens < 1:
            raise ValueError("target_tokens must be positive")


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 256
    hidden_size: int = 64
    num_heads: int = 4
    num_layers: int = 2
    max_context: int = 256
    rope_base: float = 10000.0
    intermediate_size: Optional[int] = None

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if (self.hidden_size // self.num_heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.intermediate_size is None:
            # SwiGLU width ~ 8/3 hidden, rounded up to a multiple of 8
            object.__setattr__(self, "intermediate_size", int(8 * math.ceil(8 * self.hidden_size / 3 / 8)))

    @classmethod
    def full_size(cls, vocab_size: int = 32000) -> "LMConfig":
        """1.1B-scale settings: hidden 2048, 32 heads, 24 layers, context 4096."""
        return cls(vocab_size=vocab_size, hidden_size=2048, num_heads=32, num_layers=24, max_context=4096)


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def __post_init__(self):
        if self.projector.in_dim != self.vision.embed_dim:
            raise ValueError(f"projector in_dim {self.projector.in_dim} != vision embed_dim {self.vision.embed_dim}")
        if self.projector.out_dim != self.lm.hidden_size:
            raise ValueError(f"projector out_dim {self.projector.out_dim} != lm hidden_size {self.lm.hidden_size}")
        from .projector import check_projector  # projector depends on this module

        check_projector(self.projector, self.vision.grid_side)

    def replace(self, **sections) -> "ModelConfig":
        """Return a copy with sub-config fields overridden, e.g. ``projector={"kind": "mlp"}``."""
        parts = {}
        for name in ("vision", "projector", "lm"):
            current = getattr(self, name)
            parts[name] = dataclasses.replace(current, **sections.get(name, {}))
        return ModelConfig(**parts)

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for name in ("vision", "projector", "lm"):
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                flat[f"{name}.{key}"] = value
        return flat

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = unflatten(data)
        return cls(
            vision=VisionConfig(**data.get("vision", {})),
            projector=ProjectorConfig(**data.get("projector", {})),
            lm=LMConfig(**data.get("lm", {})),
        )

    def save(self, path) -> None:
        write_manifest(path, self.to_flat())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(read_manifest(path))


def unflatten(data: Dict[str, Any]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            out.setdefault(key, {}).update(unflatten(value))
            continue
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def toy_config(vocab_size: int = 256, kind: str = "xdp", target_tokens: Optional[int] = None) -> ModelConfig:
    """Desk-scale defaults: 32x32 images, 4x4 patch grid, hidden 64, 2 layers."""
    vision = VisionConfig()
    if target_tokens is None:
        target_tokens = vision.num_patches if kind in ("linear", "mlp") else vision.num_patches // 4
    return ModelConfig(
        vision=vision,
        projector=ProjectorConfig(kind=kind, in_dim=vision.embed_dim, out_dim=64, target_tokens=target_tokens),
        lm=LMConfig(vocab_size=vocab_size),
    )


def full_size_config(vocab_size: int = 256, kind: str = "xdp", target_tokens: int = 144) -> ModelConfig:
    """336px images with 14px patches (24x24 grid) at scaled-down widths.

    Used for token-count and merge-plan checks only.
    """
    vision = VisionConfig(image_size=336, patch_size=14, embed_dim=16, num_layers=1, num_heads=2)
    return ModelConfig(
        vision=vision,
        projector=ProjectorConfig(kind=kind, in_dim=16, out_dim=32, target_tokens=target_tokens),
        lm=LMConfig(vocab_size=vocab_size, hidden_size=32, num_heads=2, num_layers=1, max_context=1024),
    )
