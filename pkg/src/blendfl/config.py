"""Experiment configuration: validated models, YAML IO and seed substreams."""
from __future__ import annotations

import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

DEFAULT_RATIOS = (0.9, 0.7, 0.5, 0.3, 0.1)
DEFAULT_CLIENT_COUNTS = (4, 8, 12)
PROTOCOLS = ("blendfl", "fedavg", "splitnn")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Strict):
    n_samples: int = Field(500, ge=2)
    n_classes: int = Field(4, ge=2)
    dim_a: int = Field(8, ge=2)
    dim_b: int = Field(8, ge=2)
    class_separation: float = Field(3.0, gt=0)
    noise_std: float = Field(1.0, gt=0)


class SyntheticSpec(DataConfig):
    seed: int = 0


class PartitionConfig(_Strict):
    n_clients: int = Field(3, ge=1)
    paired_fraction: float = Field(0.5, ge=0, le=1)
    fragmented_fraction: float = Field(0.0, ge=0, le=1)
    layout: Literal["round_robin", "figure1"] = "round_robin"
    label_skew: Optional[float] = Field(None, gt=0)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if self.paired_fraction + self.fragmented_fraction > 1.0 + 1e-12:
            raise ValueError("paired_fraction + fragmented_fraction must not exceed 1")
        if self.fragmented_fraction > 0 and self.n_clients < 2:
            raise ValueError("fragmented data needs n_clients >= 2")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must be below 1")
        return self


class ModelConfig(_Strict):
    hidden_dim: int = Field(16, ge=1)
    latent_dim: int = Field(8, ge=1)


class ProtocolConfig(_Strict):
    protocol: Literal["blendfl", "fedavg", "splitnn"] = "blendfl"
    epochs: int = Field(40, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(16, ge=1)
    local_epochs_per_round: int = Field(1, ge=1)
    aggregation: Literal["blendavg", "fedavg"] = "blendavg"
    seed: int = 0
    fragmented_in_unimodal: bool = True
    # overwrite the server's vertical head with the blended multimodal head each round
    vertical_sync: bool = True
    metric: Literal["auroc", "accuracy"] = "auroc"
    target: float = Field(0.9, gt=0, le=1)
    target_head: Literal["multimodal", "A", "B"] = "multimodal"
    parallel: bool = False


class AblationConfig(_Strict):
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    client_counts: tuple[int, ...] = DEFAULT_CLIENT_COUNTS
    protocols: tuple[Literal["blendfl", "fedavg", "splitnn"], ...] = PROTOCOLS
    # share of the multimodal (paired-ratio) samples that are split across clients
    fragmented_share: float = Field(0.5, ge=0, le=1)
    sweep_n_clients: int = Field(4, ge=2)
    sweep_ratio: float = Field(0.5, ge=0, le=1)


class SpeedupConfig(_Strict):
    intervals: tuple[int, ...] = (1, 2, 4, 6)
    target: float = Field(0.98, gt=0.5, lt=1.0)
    max_rounds: int = Field(60, ge=1)


class ExperimentConfig(_Strict):
    data: DataConfig = DataConfig()
    partition: PartitionConfig = PartitionConfig()
    model: ModelConfig = ModelConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    ablation: AblationConfig = AblationConfig()
    speedup: SpeedupConfig = SpeedupConfig()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _seeds(self):
        if not self.seeds:
            raise ValueError("seeds must be a nonempty list")
        return self


# -- IO ------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(_plain(cfg.model_dump()), sort_keys=False)


def _key_lines(node, prefix=()) -> dict:
    """Map key paths to 1-based line numbers in a composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            out[path] = key.start_mark.line + 1
            out.update(_key_lines(value, path))
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (i,)
            out[path] = item.start_mark.line + 1
            out.update(_key_lines(item, path))
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _key_lines(node) if node is not None else {}
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        messages = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            line = None
            for cut in range(len(loc), 0, -1):
                if loc[:cut] in lines:
                    line = lines[loc[:cut]]
                    break
            field = ".".join(str(p) for p in loc) or "<root>"
            where = f"{source}:{line}" if line else source
            messages.append(f"{where}: field '{field}': {err['msg']}")
        raise ConfigError("\n".join(messages)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# -- seeding -------------------------------------------------------------------

def substream_seed(root: int, name: str, *extra: int) -> int:
    """Derive an independent 32-bit seed for a named purpose from the root seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode()), *[int(e) for e in extra]])
    return int(ss.generate_state(1)[0])


def substream(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root, name, *extra))
