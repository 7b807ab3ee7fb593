"""Toy trainer: plain gradient descent on the adapter against a planted corpus.

The objective is mean squared error between the token-pooled projector output
(first len(answer) components) and the sample's answer vector. Expert feature
generators are frozen by construction: only adapter parameters receive
updates. Training runs full-batch on a fixed seeded draw of `batch_size`
corpus samples, so a zero learning rate leaves the loss trace constant.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from mova.adapter.config import AdapterConfig, desk_config
from mova.adapter.network import build_forward_graph, lift
from mova.adapter.params import AdapterParams, clone_params, init_params, named_arrays
from mova.errors import TrainingError, ValidationError
from mova.experts import (
    ExpertRegistry,
    Sample,
    default_registry,
    generate_base_feature,
    generate_expert_feature,
    load_registry,
)
from mova.numerics import autodiff as ad
from mova.numerics.gradcheck import rel_error
from mova.numerics.tensor import FeatureMap
from mova.routing import ExpertSelection
from mova.routing_data import (
    DEFAULT_CAP,
    construct_routing_set,
    load_loss_records,
    load_samples,
)

_BATCH_SALT = 0x8A7C4
_GRADCHECK_SALT = 0x96AD

SCOPES = ("gating", "gating+extractor", "full-adapter")

SelectionProvider = Callable[[Sample], ExpertSelection]


@dataclass(frozen=True)
class ToyTrainConfig:
    corpus_dir: str
    steps: int = 500
    learning_rate: float = 0.1
    batch_size: int = 8
    seed: int = 42
    scope: str = "full-adapter"
    selection: tuple[str, ...] | None = None
    eval_samples: int = 32
    cap: int = DEFAULT_CAP
    adapter: AdapterConfig = field(default_factory=desk_config)
    gradcheck_entries: int = 32
    gradcheck_eps: float = 1e-5
    gradcheck_tol: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.scope not in SCOPES:
            raise ValidationError(f"scope must be one of {SCOPES}, got {self.scope!r}")


@dataclass(frozen=True)
class TrainReport:
    loss_trace: tuple[float, ...]
    mean_gate_weights: dict[str, float]
    eval_loss: float
    gradcheck: dict
    wall_clock_seconds: float

    def artifact_dict(self) -> dict:
        """Serializable form; excludes wall clock so report files are byte-stable."""
        return {
            "loss_trace": list(self.loss_trace),
            "mean_gate_weights": self.mean_gate_weights,
            "eval_loss": self.eval_loss,
            "gradcheck": self.gradcheck,
        }


def training_batch_indices(n_samples: int, config: ToyTrainConfig) -> np.ndarray:
    """The fixed training batch: a seeded draw shared by every ablation arm."""
    rng = np.random.default_rng([_BATCH_SALT, config.seed])
    return rng.choice(n_samples, size=min(config.batch_size, n_samples), replace=False)


def scope_names(params: AdapterParams, scope: str) -> set[str]:
    names = [name for name, _ in named_arrays(params)]
    if scope == "full-adapter":
        return set(names)
    keep = {".gate."} if scope == "gating" else {".gate.", ".extract."}
    return {n for n in names if any(tag in n for tag in keep)}


class _CorpusRunner:
    """Shared machinery for training and evaluation over one corpus."""

    def __init__(
        self,
        registry: ExpertRegistry,
        config: ToyTrainConfig,
        selection_provider: SelectionProvider | None = None,
    ):
        corpus = Path(config.corpus_dir)
        self.registry = registry
        self.config = config
        self.samples = load_samples(corpus / "samples.jsonl")
        if not self.samples:
            raise ValidationError(f"{corpus}: corpus has no samples")
        losses_path = corpus / "losses.jsonl"
        self.losses = (
            {r.sample_id: r for r in load_loss_records(losses_path)}
            if losses_path.exists()
            else {}
        )
        for sample in self.samples:
            if len(sample.answer_vector) > config.adapter.llm_dim:
                raise ValidationError(
                    f"sample {sample.sample_id!r}: answer vector longer than llm_dim "
                    f"{config.adapter.llm_dim}"
                )
        self.selection_for = selection_provider or self._default_provider()
        self._features: dict[str, tuple[FeatureMap, dict[str, FeatureMap]]] = {}
        self._selections: dict[str, ExpertSelection] = {}

    def _default_provider(self) -> SelectionProvider:
        if self.config.selection is not None:
            fixed = ExpertSelection(
                tuple(self.registry.index_of(name) for name in self.config.selection)
            )

            def fixed_provider(_sample: Sample) -> ExpertSelection:
                return fixed

            return fixed_provider

        def oracle_provider(sample: Sample) -> ExpertSelection:
            record = self.losses.get(sample.sample_id)
            if record is None:
                raise ValidationError(
                    f"sample {sample.sample_id!r} has no loss record for oracle selection"
                )
            annotation = construct_routing_set(record, self.registry, self.config.cap)
            return ExpertSelection(
                tuple(self.registry.index_of(name) for name in annotation.experts)
            )

        return oracle_provider

    def selection(self, sample: Sample) -> ExpertSelection:
        if sample.sample_id not in self._selections:
            self._selections[sample.sample_id] = self.selection_for(sample)
        return self._selections[sample.sample_id]

    def features(self, sample: Sample) -> tuple[FeatureMap, dict[str, FeatureMap]]:
        if sample.sample_id not in self._features:
            base = generate_base_feature(self.registry, sample.image_seed)
            feats = {}
            for idx in self.selection(sample).indices:
                spec = self.registry.experts[idx]
                feats[spec.name] = generate_expert_feature(
                    spec,
                    sample.image_seed,
                    planted=(spec.name == sample.planted_expert),
                    answer_vector=sample.answer_vector,
                )
            self._features[sample.sample_id] = (base, feats)
        return self._features[sample.sample_id]

    def loss_graph(self, sample: Sample, lifted: AdapterParams) -> tuple[ad.Node, list[ad.Node]]:
        base, feats = self.features(sample)
        out, gates = build_forward_graph(
            base, feats, self.selection(sample), sample.question, lifted, self.config.adapter
        )
        answer = np.asarray(sample.answer_vector)
        pooled = ad.mean_rows(out)
        diff = ad.sub(ad.gather_vec(pooled, range(answer.size)), ad.constant(answer))
        return ad.mean_all(ad.mul(diff, diff)), gates

    def batch_loss(self, batch: list[Sample], params: AdapterParams, trainable) -> tuple[float, dict[str, np.ndarray]]:
        """Mean loss over the batch; gradients accumulate across samples."""
        lifted, tracked = lift(params, trainable)
        total = 0.0
        for sample in batch:
            loss, _ = self.loss_graph(sample, lifted)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss on sample {sample.sample_id!r}")
            total += float(loss.value)
            ad.backward(loss)
        grads = {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            / len(batch)
            for name, node in tracked.items()
        }
        return total / len(batch), grads

    def batch_loss_value(self, batch: list[Sample], params: AdapterParams) -> float:
        lifted, _ = lift(params)
        total = 0.0
        for sample in batch:
            loss, _ = self.loss_graph(sample, lifted)
            total += float(loss.value)
        return total / len(batch)

    def evaluate(self, params: AdapterParams) -> tuple[float, dict[str, float]]:
        """Eval loss plus mean gate weight per pool expert over samples and blocks."""
        eval_set = self.samples[: min(self.config.eval_samples, len(self.samples))]
        lifted, _ = lift(params)
        total = 0.0
        sums = {name: 0.0 for name in params.expert_names}
        denom = 0
        for sample in eval_set:
            loss, gates = self.loss_graph(sample, lifted)
            total += float(loss.value)
            sel = self.selection(sample)
            for gate in gates:
                denom += 1
                for pos, idx in enumerate(sel.indices):
                    sums[self.registry.experts[idx].name] += float(gate.value[pos])
        mean_gates = {
            name: (sums[name] / denom if denom else 0.0) for name in params.expert_names
        }
        return total / len(eval_set), mean_gates


def _spot_check_gradients(
    runner: _CorpusRunner,
    params: AdapterParams,
    batch: list[Sample],
    grads: Mapping[str, np.ndarray],
) -> dict:
    """Central-difference probe of seeded entries of the step-0 gradient."""
    config = runner.config
    rng = np.random.default_rng([_GRADCHECK_SALT, config.seed])
    arrays = dict(named_arrays(params))
    names = sorted(grads)
    entries: list[tuple[str, int]] = []
    budget = min(config.gradcheck_entries, sum(arrays[n].size for n in names))
    order = list(rng.permutation(len(names)))
    while len(entries) < budget:
        name = names[order[len(entries) % len(names)]]
        entries.append((name, int(rng.integers(arrays[name].size))))
    worst = 0.0
    eps = config.gradcheck_eps
    for name, flat in entries:
        arr = arrays[name]
        original = arr.flat[flat]
        arr.flat[flat] = original + eps
        f_plus = runner.batch_loss_value(batch, params)
        arr.flat[flat] = original - eps
        f_minus = runner.batch_loss_value(batch, params)
        arr.flat[flat] = original
        numeric = (f_plus - f_minus) / (2 * eps)
        worst = max(worst, rel_error(float(grads[name].flat[flat]), numeric))
    summary = {
        "max_rel_error": worst,
        "entries_checked": len(entries),
        "eps": eps,
        "tolerance": config.gradcheck_tol,
    }
    if worst > config.gradcheck_tol:
        raise TrainingError(
            f"step-0 gradient check failed: max relative error {worst:.3e} "
            f"exceeds {config.gradcheck_tol:.1e}"
        )
    return summary


def train_toy(
    config: ToyTrainConfig,
    registry: ExpertRegistry,
    selection_provider: SelectionProvider | None = None,
    initial_params: AdapterParams | None = None,
) -> tuple[TrainReport, AdapterParams]:
    """Run gradient descent on the configured scopes; returns (report, trained params)."""
    started = time.perf_counter()
    runner = _CorpusRunner(registry, config, selection_provider)
    params = (
        clone_params(initial_params)
        if initial_params is not None
        else init_params(config.adapter, registry)
    )
    trainable = scope_names(params, config.scope)
    arrays = dict(named_arrays(params))
    batch_idx = training_batch_indices(len(runner.samples), config)
    batch = [runner.samples[i] for i in batch_idx]

    trace: list[float] = []
    gradcheck_summary: dict = {}
    for step in range(config.steps):
        try:
            loss, grads = runner.batch_loss(batch, params, trainable)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        trace.append(loss)
        if step == 0:
            gradcheck_summary = _spot_check_gradients(runner, params, batch, grads)
        for name, grad in grads.items():
            arrays[name] -= config.learning_rate * grad
    eval_loss, mean_gates = runner.evaluate(params)
    report = TrainReport(
        loss_trace=tuple(trace),
        mean_gate_weights=mean_gates,
        eval_loss=eval_loss,
        gradcheck=gradcheck_summary,
        wall_clock_seconds=time.perf_counter() - started,
    )
    return report, params


# ---------------------------------------------------------------------------
# toy.json loading for the CLI


def load_toy_config(path) -> tuple[ToyTrainConfig, ExpertRegistry]:
    """Read toy.json; relative paths resolve against the config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if "corpus" not in raw:
        raise ValidationError(f"{path}: toy config needs a 'corpus' directory")
    root = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    registry = (
        load_registry(resolve(raw["experts"])) if raw.get("experts") else default_registry()
    )
    known = {
        "steps", "learning_rate", "batch_size", "seed", "scope",
        "eval_samples", "cap", "gradcheck_entries", "gradcheck_eps", "gradcheck_tol",
    }
    unknown = set(raw) - known - {"corpus", "experts", "adapter", "selection"}
    if unknown:
        raise ValidationError(f"{path}: unknown toy config keys {sorted(unknown)}")
    kwargs = {k: raw[k] for k in known if k in raw}
    selection = raw.get("selection")
    try:
        adapter = AdapterConfig(**raw["adapter"]) if "adapter" in raw else desk_config()
        config = ToyTrainConfig(
            corpus_dir=str(resolve(raw["corpus"])),
            selection=tuple(selection) if selection else None,
            adapter=adapter,
            **kwargs,
        )
    except TypeError as exc:
        raise ValidationError(f"{path}: malformed toy config ({exc})") from exc
    return config, registry
