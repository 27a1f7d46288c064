"""Experiment configuration: schema, YAML loading, dotted-path overrides."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import UsageError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    vocab_size: int = Field(64, ge=2)
    hidden_dim: int = Field(16, ge=1)
    sparsity: int = Field(4, ge=1)
    n_clusters: int = Field(5, ge=1)
    noise_mass: float = Field(0.1, ge=0.0, lt=1.0)
    concentration: float = Field(1.0, gt=0.0)
    seed: int = 0


class PretrainConfig(_Section):
    stream: Literal["same", "heldout"] = "heldout"
    domains: Optional[list[int]] = None
    requests_per_domain: Optional[int] = Field(None, ge=1)
    mode: Optional[Literal["ordered", "mixed"]] = None
    epochs: int = Field(1, ge=1)
    seed: int = 1000


class DrafterConfig(_Section):
    init: Literal["scratch", "pretrained"] = "scratch"
    checkpoint: Optional[str] = None
    use_hidden: bool = False
    init_scale: float = Field(0.1, ge=0.0)
    pretrain: PretrainConfig = PretrainConfig()


class SpeculationConfig(_Section):
    enabled: bool = True
    gamma: int = Field(5, ge=1)
    branching: int = Field(1, ge=1)
    max_nodes: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _nodes_cover_depth(self):
        if self.max_nodes is not None and self.max_nodes < self.gamma:
            raise ValueError("max_nodes must be >= gamma")
        return self


class LossSection(_Section):
    direction: Literal["fkl", "rkl"] = "rkl"
    ntp_enabled: bool = False
    discard_enabled: bool = False
    lambda_discard: float = Field(1.0, ge=0.0)
    discard_topk: int = Field(10, ge=0)


class OptimizerSection(_Section):
    base_lr: float = Field(5e-4, gt=0.0)
    warmup_steps: int = Field(400, ge=0)
    clip_norm: float = Field(0.5, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class LearnerConfig(_Section):
    enabled: bool = True
    micro_batch: int = Field(8, ge=1)
    train_step_cost: float = Field(0.2, ge=0.0)


class BufferConfig(_Section):
    capacity: int = Field(4096, ge=1)
    compress_topk: int = Field(16, ge=0)
    draft_vocab: Optional[list[int]] = None


class SyncConfig(_Section):
    enabled: bool = True
    interval_requests: int = Field(100, ge=1)
    blocking: bool = True


class CostConfig(_Section):
    a_t: float = Field(1.0, ge=0.0)
    b_t: float = Field(0.05, ge=0.0)
    a_d: float = Field(0.05, ge=0.0)
    b_d: float = Field(0.01, ge=0.0)
    sync_cost: float = Field(40.0, ge=0.0)
    batch_size: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _drafter_cheaper(self):
        B = self.batch_size
        if not self.a_d + self.b_d * B < self.a_t + self.b_t * B:
            raise ValueError("draft step must be cheaper than target step at the configured batch size")
        return self


class TrafficConfig(_Section):
    mode: Literal["ordered", "mixed"] = "mixed"
    domains: Optional[list[int]] = None
    requests_per_domain: int = Field(4000, ge=1)
    prompt_len: tuple[int, int] = (4, 16)
    max_output: tuple[int, int] = (16, 48)


class MetricsConfig(_Section):
    window: int = Field(500, ge=1)


class ThreadedConfig(_Section):
    serving_workers: int = Field(1, ge=1)


class OutputConfig(_Section):
    dir: str = "out"
    dump_traces: bool = False


class SweepConfig(_Section):
    parameter: str
    values: list[Any]


class ExperimentConfig(_Section):
    name: str = "experiment"
    seed: int = 0
    mode: Literal["deterministic", "threaded"] = "deterministic"
    model: ModelConfig = ModelConfig()
    drafter: DrafterConfig = DrafterConfig()
    speculation: SpeculationConfig = SpeculationConfig()
    loss: LossSection = LossSection()
    optimizer: OptimizerSection = OptimizerSection()
    learner: LearnerConfig = LearnerConfig()
    buffer: BufferConfig = BufferConfig()
    sync: SyncConfig = SyncConfig()
    cost: CostConfig = CostConfig()
    traffic: TrafficConfig = TrafficConfig()
    metrics: MetricsConfig = MetricsConfig()
    threaded: ThreadedConfig = ThreadedConfig()
    output: OutputConfig = OutputConfig()
    variants: dict[str, dict[str, Any]] = Field(default_factory=dict)
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.loss.discard_topk > self.model.vocab_size:
            raise ValueError("loss.discard_topk must be <= model.vocab_size")
        return self


BUNDLED = ("day0_mixed", "day0_ordered", "domain_shift_frozen_vs_online", "sync_sweep",
           "loss_ablation", "lookahead10_discard", "batch_size_sweep")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("specloop") / "configs" / f"{name}.yaml"))


def load_raw(path_or_name: str) -> dict:
    path = Path(path_or_name)
    if not path.exists() and path_or_name in BUNDLED:
        path = bundled_path(path_or_name)
    if not path.exists():
        raise FileNotFoundError(path_or_name)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return data


def parse_value(text: str):
    """Interpret an override's value with YAML scalar rules (``80`` -> int, ``true`` -> bool)."""
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``{"a.b.c": value}`` (or ``["a.b.c=value", ...]``) to a nested dict copy."""
    out = copy.deepcopy(raw)
    items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
    for key, value in items:
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = value
    return out


def _split(item: str):
    if "=" not in item:
        raise UsageError(f"override {item!r} must look like key=value")
    key, text = item.split("=", 1)
    return key.strip(), parse_value(text)


def load_config(path_or_name: str, overrides=()) -> ExperimentConfig:
    return ExperimentConfig.model_validate(apply_overrides(load_raw(path_or_name), overrides))


def with_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    return ExperimentConfig.model_validate(apply_overrides(cfg.model_dump(mode="json"), overrides))
