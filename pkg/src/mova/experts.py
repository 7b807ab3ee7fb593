"""Synthetic vision experts and the registry describing the pool.

Real encoders are out of scope; each expert is a deterministic seeded feature
generator. A "planted" feature embeds an answer vector into the spatial means
of its leading channels, which is what gives routing experiments a checkable
ground truth.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mova.errors import CapacityError, ValidationError
from mova.numerics.tensor import FeatureMap

_BASE_FEATURE_SALT = 0x0B45E
_EXPERT_FEATURE_SALT = 0xE79E87

# Non-planted expert features carry O(1) per-channel mean offsets: a specialist
# consulted outside its specialty emits confident but task-irrelevant signal,
# not just weak noise. This is what makes indiscriminate fusion costly.
_DISTRACTOR_SCALE = 1.0

_MAX_EXPERTS = len(string.ascii_uppercase)


@dataclass(frozen=True)
class ExpertSpec:
    letter: str
    name: str
    description: str
    channels: int
    height: int
    width: int
    seed: int

    def __post_init__(self):
        if len(self.letter) != 1 or self.letter not in string.ascii_uppercase:
            raise ValidationError(f"expert {self.name!r}: letter {self.letter!r} must be A..Z")
        if not self.name:
            raise ValidationError("expert name must be non-empty")
        if not self.description:
            raise ValidationError(f"expert {self.name!r}: description must be non-empty")
        if min(self.channels, self.height, self.width) < 1:
            raise ValidationError(f"expert {self.name!r}: feature extents must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"expert {self.name!r}: seed must fit in 64 bits")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class ExpertRegistry:
    experts: tuple[ExpertSpec, ...]
    base_channels: int
    base_height: int
    base_width: int

    def __post_init__(self):
        if not 1 <= len(self.experts) <= _MAX_EXPERTS:
            raise ValidationError(
                f"registry must hold 1..{_MAX_EXPERTS} experts, got {len(self.experts)}"
            )
        if min(self.base_channels, self.base_height, self.base_width) < 1:
            raise ValidationError("base geometry extents must be >= 1")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate expert names in registry: {names}")
        for i, expert in enumerate(self.experts):
            expected = string.ascii_uppercase[i]
            if expert.letter != expected:
                raise ValidationError(
                    f"expert {expert.name!r} has letter {expert.letter!r}, "
                    f"expected contiguous letter {expected!r}"
                )

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def base_shape(self) -> tuple[int, int, int]:
        return (self.base_channels, self.base_height, self.base_width)

    def index_of(self, name: str) -> int:
        for i, expert in enumerate(self.experts):
            if expert.name == name:
                return i
        raise ValidationError(f"unknown expert name {name!r}")

    def by_letter(self, letter: str) -> int:
        idx = string.ascii_uppercase.find(letter)
        if not 0 <= idx < len(self.experts):
            raise ValidationError(f"letter {letter!r} is outside the registry range")
        return idx


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_seed: int
    question: str
    answer_vector: tuple[float, ...] = field(default_factory=tuple)
    planted_expert: str | None = None


def generate_base_feature(registry: ExpertRegistry, image_seed: int) -> FeatureMap:
    """Seeded standard-normal stand-in for the base encoder feature."""
    rng = np.random.default_rng([_BASE_FEATURE_SALT, int(image_seed)])
    return FeatureMap(rng.standard_normal(registry.base_shape))


def generate_expert_feature(
    spec: ExpertSpec,
    image_seed: int,
    planted: bool = False,
    answer_vector=(),
) -> FeatureMap:
    """Seeded expert feature; planting overwrites the leading channel means with the answer."""
    answer = np.asarray(answer_vector, dtype=np.float64)
    if planted and answer.size > spec.channels:
        raise CapacityError(
            f"answer vector of length {answer.size} does not fit "
            f"{spec.channels} channels of expert {spec.name!r}"
        )
    rng = np.random.default_rng([_EXPERT_FEATURE_SALT, int(spec.seed), int(image_seed)])
    data = rng.standard_normal(spec.shape)
    data += _DISTRACTOR_SCALE * rng.standard_normal(spec.channels)[:, None, None]
    if planted and answer.size:
        lead = data[: answer.size]
        lead -= lead.mean(axis=(1, 2), keepdims=True)
        lead += answer[:, None, None]
    return FeatureMap(data)


# ---------------------------------------------------------------------------
# registry serialization (experts.json)


def _registry_to_dict(registry: ExpertRegistry) -> dict:
    return {
        "base": {
            "channels": registry.base_channels,
            "height": registry.base_height,
            "width": registry.base_width,
        },
        "experts": [
            {
                "letter": e.letter,
                "name": e.name,
                "description": e.description,
                "channels": e.channels,
                "height": e.height,
                "width": e.width,
                "seed": e.seed,
            }
            for e in registry.experts
        ],
    }


def save_registry(registry: ExpertRegistry, path) -> None:
    Path(path).write_text(json.dumps(_registry_to_dict(registry), indent=2) + "\n")


def load_registry(path) -> ExpertRegistry:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    try:
        base = raw["base"]
        experts = tuple(
            ExpertSpec(
                letter=item["letter"],
                name=item["name"],
                description=item["description"],
                channels=int(item["channels"]),
                height=int(item["height"]),
                width=int(item["width"]),
                seed=int(item["seed"]),
            )
            for item in raw["experts"]
        )
        return ExpertRegistry(
            experts=experts,
            base_channels=int(base["channels"]),
            base_height=int(base["height"]),
            base_width=int(base["width"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed registry field ({exc})") from exc


_DEFAULT_POOL = [
    ("dinov2", "Self-supervised visual features for grounding and localizing objects."),
    ("codetr", "Object detection features for finding and counting distinct objects."),
    ("sam", "Segmentation features for precise object boundaries and region masks."),
    ("pix2struct", "Text recognition features for reading scene text and documents."),
    ("deplot", "Chart understanding features for plots, axes, and data tables."),
    ("vary", "Document parsing features for dense text pages and formatted charts."),
    ("biomedclip", "Biomedical image-text features for medical and anatomical imagery."),
]


def default_registry() -> ExpertRegistry:
    """The shipped desk-scale pool: 7 experts at 16x4x4 over an 8x8x8 base."""
    experts = tuple(
        ExpertSpec(
            letter=string.ascii_uppercase[i],
            name=name,
            description=description,
            channels=16,
            height=4,
            width=4,
            seed=101 + i,
        )
        for i, (name, description) in enumerate(_DEFAULT_POOL)
    )
    return ExpertRegistry(experts=experts, base_channels=8, base_height=8, base_width=8)
