"""Loss-driven routing annotations and the synthetic corpus that grounds them.

An expert joins a sample's routing set only when its loss is strictly below
the base model's; at most ``cap`` experts are kept, lowest loss first, ties
broken by registry index. The synthetic generator plants each sample's answer
vector in exactly one expert's features and derives losses from linear-probe
recovery residuals, so the planted expert provably has the smallest loss at
noise scale zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from mova.errors import ValidationError
from mova.experts import (
    ExpertRegistry,
    Sample,
    generate_base_feature,
    generate_expert_feature,
)
from mova.numerics.ops import global_avg_pool

_CORPUS_SALT = 0xC0285
DEFAULT_CAP = 3

_QUESTION_TEMPLATES = (
    "Where is the answer hidden in this image?",
    "What value is encoded here?",
    "Recover the signal from this picture.",
    "What does this image tell you?",
)


def _question_for(rng: np.random.Generator, planted_description: str) -> str:
    # The question cues the planted expert's specialty so the gating network
    # has a real multimodal signal to route on, mirroring instruction-aware
    # gating at desk scale.
    template = _QUESTION_TEMPLATES[int(rng.integers(len(_QUESTION_TEMPLATES)))]
    return f"{template} Focus: {planted_description}"


@dataclass(frozen=True)
class LossRecord:
    sample_id: str
    base_loss: float
    expert_losses: tuple[float, ...]

    def __post_init__(self):
        losses = (self.base_loss, *self.expert_losses)
        if not all(np.isfinite(v) and v >= 0 for v in losses):
            raise ValidationError(
                f"sample {self.sample_id!r}: losses must be finite and >= 0"
            )


@dataclass(frozen=True)
class RoutingAnnotation:
    sample_id: str
    experts: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.experts)) != len(self.experts):
            raise ValidationError(
                f"sample {self.sample_id!r}: duplicate experts in annotation"
            )


def construct_routing_set(
    record: LossRecord, registry: ExpertRegistry, cap: int = DEFAULT_CAP
) -> RoutingAnnotation:
    """Experts strictly beating the base loss, capped, ordered by ascending loss."""
    if cap < 1:
        raise ValidationError(f"cap must be >= 1, got {cap}")
    if len(record.expert_losses) != len(registry):
        raise ValidationError(
            f"sample {record.sample_id!r}: {len(record.expert_losses)} expert losses "
            f"for a registry of {len(registry)}"
        )
    qualifying = [
        (loss, idx)
        for idx, loss in enumerate(record.expert_losses)
        if loss < record.base_loss
    ]
    qualifying.sort()
    names = tuple(registry.experts[idx].name for _, idx in qualifying[:cap])
    return RoutingAnnotation(sample_id=record.sample_id, experts=names)


# ---------------------------------------------------------------------------
# JSONL formats
#
# losses.jsonl:       {"sample_id": str, "base_loss": float, "expert_losses": [float x N]}
# routing.jsonl:      {"sample_id": str, "experts": [str, ...]}
# ground_truth.jsonl: {"sample_id": str, "planted": str}


def _iter_jsonl(path) -> Iterable[tuple[int, dict]]:
    try:
        fh = open(path, "r")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not valid JSON ({exc})") from exc


def _dump_jsonl(path, objects: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for obj in objects:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_loss_records(path) -> list[LossRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path):
        try:
            records.append(
                LossRecord(
                    sample_id=obj["sample_id"],
                    base_loss=float(obj["base_loss"]),
                    expert_losses=tuple(float(v) for v in obj["expert_losses"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed loss record ({exc})") from exc
    return records


def save_loss_records(path, records: Sequence[LossRecord]) -> None:
    _dump_jsonl(
        path,
        (
            {
                "sample_id": r.sample_id,
                "base_loss": r.base_loss,
                "expert_losses": list(r.expert_losses),
            }
            for r in records
        ),
    )


def load_annotations(path) -> list[RoutingAnnotation]:
    annotations = []
    for lineno, obj in _iter_jsonl(path):
        try:
            annotations.append(
                RoutingAnnotation(
                    sample_id=obj["sample_id"], experts=tuple(obj["experts"])
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed annotation ({exc})") from exc
    return annotations


def save_annotations(path, annotations: Sequence[RoutingAnnotation]) -> None:
    _dump_jsonl(
        path,
        ({"sample_id": a.sample_id, "experts": list(a.experts)} for a in annotations),
    )


def save_ground_truth(path, truth: Mapping[str, str]) -> None:
    _dump_jsonl(
        path,
        ({"sample_id": sid, "planted": planted} for sid, planted in truth.items()),
    )


def load_ground_truth(path) -> dict[str, str]:
    truth: dict[str, str] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            sample_id = obj["sample_id"]
            if sample_id in truth:
                raise ValidationError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
            truth[sample_id] = obj["planted"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed ground truth ({exc})") from exc
    return truth


def load_samples(path) -> list[Sample]:
    samples = []
    for lineno, obj in _iter_jsonl(path):
        try:
            samples.append(
                Sample(
                    sample_id=obj["sample_id"],
                    image_seed=int(obj["image_seed"]),
                    question=obj["question"],
                    answer_vector=tuple(float(v) for v in obj["answer_vector"]),
                    planted_expert=obj.get("planted_expert"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return samples


def build_annotations(losses_path, registry: ExpertRegistry, cap: int, out_path) -> int:
    """One annotation line per loss record, order preserved; returns the count."""
    seen: set[str] = set()
    annotations = []
    for lineno, obj in _iter_jsonl(losses_path):
        try:
            record = LossRecord(
                sample_id=obj["sample_id"],
                base_loss=float(obj["base_loss"]),
                expert_losses=tuple(float(v) for v in obj["expert_losses"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(
                f"{losses_path}:{lineno}: malformed loss record ({exc})"
            ) from exc
        if len(record.expert_losses) != len(registry):
            raise ValidationError(
                f"{losses_path}:{lineno}: expected {len(registry)} expert losses, "
                f"got {len(record.expert_losses)}"
            )
        if record.sample_id in seen:
            raise ValidationError(
                f"{losses_path}:{lineno}: duplicate sample id {record.sample_id!r}"
            )
        seen.add(record.sample_id)
        annotations.append(construct_routing_set(record, registry, cap))
    save_annotations(out_path, annotations)
    return len(annotations)


def score_routing_accuracy(
    annotations: Sequence[RoutingAnnotation], ground_truth: Mapping[str, str]
) -> float:
    """Fraction of samples whose annotation contains the planted expert."""
    ids = {a.sample_id for a in annotations}
    if len(ids) != len(annotations):
        raise ValidationError("duplicate sample ids among annotations")
    if ids != set(ground_truth):
        missing = sorted(set(ground_truth) - ids)
        extra = sorted(ids - set(ground_truth))
        raise ValidationError(
            f"annotation/ground-truth id mismatch (missing {missing[:5]}, extra {extra[:5]})"
        )
    hits = sum(1 for a in annotations if ground_truth[a.sample_id] in a.experts)
    return hits / len(annotations)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class CorpusManifest:
    directory: str
    samples_path: str
    losses_path: str
    ground_truth_path: str
    num_samples: int
    seed: int
    noise_scale: float
    answer_dim: int


def _probe_residuals(features: np.ndarray, answers: np.ndarray, fit_rows: np.ndarray) -> np.ndarray:
    """Per-sample MSE of the least-squares probe fit on `fit_rows`."""
    weights, *_ = np.linalg.lstsq(features[fit_rows], answers[fit_rows], rcond=None)
    diff = features @ weights - answers
    return (diff * diff).mean(axis=1)


def generate_synthetic_corpus(
    registry: ExpertRegistry,
    num_samples: int,
    seed: int,
    out_dir,
    noise_scale: float = 0.0,
    answer_dim: int = 4,
    planted_pool: str | Sequence[str] | None = None,
) -> CorpusManifest:
    """Emit samples.jsonl, losses.jsonl, and ground_truth.jsonl under out_dir.

    Every sample plants its answer vector in one expert, drawn seeded-random
    from `planted_pool` (a name, several names, or the whole registry when
    None). Losses are linear-probe recovery residuals: each expert's probe is
    fit on the samples it carries, the base probe on all samples, plus
    `noise_scale * |N(0,1)|` observation noise.
    """
    if num_samples < 1:
        raise ValidationError(f"num_samples must be >= 1, got {num_samples}")
    if noise_scale < 0:
        raise ValidationError(f"noise_scale must be >= 0, got {noise_scale}")
    min_channels = min(spec.channels for spec in registry.experts)
    if not 1 <= answer_dim <= min_channels:
        raise ValidationError(
            f"answer_dim must be in [1, {min_channels}] for this registry, got {answer_dim}"
        )
    if planted_pool is None:
        pool = tuple(range(len(registry)))
    else:
        names = (planted_pool,) if isinstance(planted_pool, str) else tuple(planted_pool)
        pool = tuple(registry.index_of(name) for name in names)

    rng = np.random.default_rng([_CORPUS_SALT, int(seed)])
    n = len(registry)
    samples: list[Sample] = []
    planted_idx = np.empty(num_samples, dtype=int)
    answers = np.empty((num_samples, answer_dim))
    for i in range(num_samples):
        image_seed = int(rng.integers(2**63))
        p = pool[int(rng.integers(len(pool)))]
        answer = rng.standard_normal(answer_dim)
        question = _question_for(rng, registry.experts[p].description)
        planted_idx[i] = p
        answers[i] = answer
        samples.append(
            Sample(
                sample_id=f"s{i:05d}",
                image_seed=image_seed,
                question=question,
                answer_vector=tuple(answer),
                planted_expert=registry.experts[p].name,
            )
        )

    pooled_base = np.stack(
        [global_avg_pool(generate_base_feature(registry, s.image_seed)) for s in samples]
    )
    pooled_experts = []
    for j, spec in enumerate(registry.experts):
        pooled_experts.append(
            np.stack(
                [
                    global_avg_pool(
                        generate_expert_feature(
                            spec,
                            s.image_seed,
                            planted=(planted_idx[i] == j),
                            answer_vector=s.answer_vector,
                        )
                    )
                    for i, s in enumerate(samples)
                ]
            )
        )

    all_rows = np.arange(num_samples)
    base_losses = _probe_residuals(pooled_base, answers, all_rows)
    expert_losses = np.empty((num_samples, n))
    for j in range(n):
        rows = np.flatnonzero(planted_idx == j)
        fit_rows = rows if rows.size else all_rows
        expert_losses[:, j] = _probe_residuals(pooled_experts[j], answers, fit_rows)

    noise = noise_scale * np.abs(rng.standard_normal((num_samples, n + 1)))
    base_losses = base_losses + noise[:, 0]
    expert_losses = expert_losses + noise[:, 1:]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples_path = out_dir / "samples.jsonl"
    losses_path = out_dir / "losses.jsonl"
    truth_path = out_dir / "ground_truth.jsonl"
    _dump_jsonl(
        samples_path,
        (
            {
                "sample_id": s.sample_id,
                "image_seed": s.image_seed,
                "question": s.question,
                "answer_vector": list(s.answer_vector),
                "planted_expert": s.planted_expert,
            }
            for s in samples
        ),
    )
    save_loss_records(
        losses_path,
        [
            LossRecord(
                sample_id=s.sample_id,
                base_loss=float(base_losses[i]),
                expert_losses=tuple(float(v) for v in expert_losses[i]),
            )
            for i, s in enumerate(samples)
        ],
    )
    _dump_jsonl(
        truth_path,
        (
            {"sample_id": s.sample_id, "planted": s.planted_expert}
            for s in samples
        ),
    )
    manifest = CorpusManifest(
        directory=str(out_dir),
        samples_path=str(samples_path),
        losses_path=str(losses_path),
        ground_truth_path=str(truth_path),
        num_samples=num_samples,
        seed=seed,
        noise_scale=noise_scale,
        answer_dim=answer_dim,
    )
    # On-disk manifest is path-free so identical seeds give identical bytes
    # regardless of where the corpus lands.
    on_disk = {
        "files": ["ground_truth.jsonl", "losses.jsonl", "samples.jsonl"],
        "num_samples": num_samples,
        "seed": seed,
        "noise_scale": noise_scale,
        "answer_dim": answer_dim,
    }
    (out_dir / "manifest.json").write_text(json.dumps(on_disk, indent=2, sort_keys=True) + "\n")
    return manifest
