"""Run configuration: plain-text ``key = value`` files with dotted keys.

Recognized keys, by section:

* ``model.{dim,hidden,blocks,experts,k,capacity_factor,dispatch_mode,classes,parallel_experts}``
* ``loss.{aux_weight,aux_mode,gate_noise,foreground_only}``
* ``data.{preset,seed,shots}``
* ``train.{steps,batch,lr,seed,optimizer,eval_every}``
* ``dataset.<id>.experts`` — the dataset-to-expert mapping, e.g. ``dataset.0.experts = 0,1``

Unknown keys are rejected with the offending line number.  ``#`` starts a
comment.  Every key has a default; a fully *resolved* config (all keys plus
the mapping) serializes canonically via :func:`resolved_text`, which is what
training runs snapshot alongside checkpoints.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from .data import PRESETS, preset_specs
from .errors import ConfigError, ParameterError
from .losses import LossConfig
from .mapping import MappingTable, _parse_expert_list
from .model import ModelConfig

OPTIMIZERS = ("sgd", "adam")

_MAPPING_KEY = re.compile(r"^dataset\.(\d+)\.experts$")


@dataclass
class DataConfig:
    preset: str = "domains"
    seed: int = 0
    shots: int = 50

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ParameterError(
                f"unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}"
            )
        if self.shots <= 0:
            raise ParameterError(f"shots must be positive, got {self.shots}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 0.01
    seed: int = 0
    optimizer: str = "sgd"
    eval_every: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be positive, got {self.steps}")
        if self.batch < 1:
            raise ParameterError(f"batch must be positive, got {self.batch}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(
                f"unknown optimizer {self.optimizer!r}; expected one of {', '.join(OPTIMIZERS)}"
            )
        if self.eval_every < 0:
            raise ParameterError(
                f"eval_every must be >= 0 (0 = final eval only), got {self.eval_every}"
            )


@dataclass
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    data: DataConfig
    train: TrainConfig
    mapping: Optional[MappingTable] = None

    def specs(self):
        return preset_specs(self.data.preset, dim=self.model.dim, shots=self.data.shots)

    def resolve(self) -> "RunConfig":
        """Fill the mapping if absent: dataset i -> expert i mod E."""
        if self.mapping is None:
            entries = {
                s.dataset_id: (s.dataset_id % self.model.experts,) for s in self.specs()
            }
            self.mapping = MappingTable(entries, num_experts=self.model.experts)
        return self


def default_config() -> RunConfig:
    return RunConfig(ModelConfig(), LossConfig(), DataConfig(), TrainConfig())


def _parse_bool(value: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    raise ValueError(f"expected true or false, got {value!r}")


_SCHEMA = {
    "model.dim": int,
    "model.hidden": int,
    "model.blocks": int,
    "model.experts": int,
    "model.k": int,
    "model.capacity_factor": float,
    "model.dispatch_mode": str,
    "model.classes": int,
    "model.parallel_experts": _parse_bool,
    "loss.aux_weight": float,
    "loss.aux_mode": str,
    "loss.gate_noise": float,
    "loss.foreground_only": _parse_bool,
    "data.preset": str,
    "data.seed": int,
    "data.shots": int,
    "train.steps": int,
    "train.batch": int,
    "train.lr": float,
    "train.seed": int,
    "train.optimizer": str,
    "train.eval_every": int,
}

_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "data": DataConfig,
    "train": TrainConfig,
}


def parse_config(text: str) -> RunConfig:
    """Parse a run config; every error carries its source line number."""
    values: dict = {}
    key_lines: dict = {}
    mapping_entries: dict = {}
    num_mapping_lines = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=line_no)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()

        match = _MAPPING_KEY.match(key)
        if match:
            dataset_id = int(match.group(1))
            if dataset_id in mapping_entries:
                raise ConfigError(f"duplicate mapping for dataset {dataset_id}", line=line_no)
            mapping_entries[dataset_id] = (value, line_no)
            num_mapping_lines += 1
            continue

        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=line_no)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=line_no)
        try:
            values[key] = _SCHEMA[key](value)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {err}", line=line_no)
        key_lines[key] = line_no

    sections = {}
    for section, cls in _SECTIONS.items():
        prefix = section + "."
        kwargs = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
        try:
            sections[section] = cls(**kwargs)
        except ParameterError as err:
            raise ConfigError(str(err), line=_blame_line(err, key_lines, prefix))

    cfg = RunConfig(
        model=sections["model"],
        loss=sections["loss"],
        data=sections["data"],
        train=sections["train"],
    )

    if mapping_entries:
        entries = {
            dataset_id: _parse_expert_list(value, cfg.model.experts, line_no)
            for dataset_id, (value, line_no) in mapping_entries.items()
        }
        try:
            cfg.mapping = MappingTable(entries, num_experts=cfg.model.experts)
        except ConfigError as err:
            if err.line is not None:
                raise
            raise ConfigError(
                str(err), line=min(l for _, l in mapping_entries.values())
            ) from None
    return cfg


def _blame_line(err: Exception, key_lines: dict, prefix: str) -> Optional[int]:
    """Best-effort line attribution for semantic errors: the config line
    whose field name appears as a whole word in the error message."""
    message = str(err)
    for key, line in key_lines.items():
        if not key.startswith(prefix):
            continue
        fieldname = key[len(prefix):]
        if re.search(rf"\b{re.escape(fieldname)}\b", message):
            return line
    return None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical serialization of a fully resolved config.

    Emits every schema key in a fixed order, then the mapping lines sorted
    by dataset id, so identical configs produce identical bytes.
    """
    if cfg.mapping is None:
        raise ParameterError("config is not resolved: mapping is missing")
    lines = []
    for key in _SCHEMA:
        section, fieldname = key.split(".", 1)
        value = getattr(getattr(cfg, section), fieldname)
        lines.append(f"{key} = {_fmt(value)}")
    lines.append(cfg.mapping.serialize().rstrip("\n"))
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}")
    return parse_config(text)
