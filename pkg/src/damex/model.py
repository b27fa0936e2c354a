"""Toy residual model: alternating dense and mixture-of-experts blocks.

Blocks are per-token residual maps, ``x <- x + ffn(x)``; every second block
replaces the dense feed-forward with a routed mixture of experts.  A linear
head over the union label space closes the model.  All parameters live in a
named registry so the optimizer, the gradient checker, and the checkpoint
format share one source of truth.

Checkpoints are plain text: a magic line ``DAMEX-CKPT v1``, the resolved run
config (so analysis tools can rebuild the model and its dataset-expert
mapping), then each parameter as a name/shape line followed by rows of
decimal values with 17 significant digits — exact round-trip for 64-bit
floats.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .dispatch import (
    DispatchPlan,
    ExpertParams,
    ExpertSet,
    RoutingConfig,
    build_plan,
    moe_forward,
)
from .errors import ConfigError, ParameterError, ShapeError
from .gating import GateOutput, RouterParams, gate
from .mapping import MappingTable

CHECKPOINT_MAGIC = "DAMEX-CKPT v1"


@dataclass
class ModelConfig:
    dim: int = 16
    hidden: int = 32
    blocks: int = 4
    experts: int = 2
    k: int = 1
    capacity_factor: float = 1.25
    dispatch_mode: str = "router_argmax"
    classes: int = 4
    parallel_experts: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"dim must be positive, got {self.dim}")
        if self.hidden < 1:
            raise ParameterError(f"hidden must be positive, got {self.hidden}")
        if self.classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.classes}")
        if self.blocks < 2:
            raise ParameterError(
                f"need at least 2 blocks (one dense, one mixture), got {self.blocks}"
            )
        self.routing()  # validates experts / k / capacity_factor / dispatch_mode

    def routing(self) -> RoutingConfig:
        return RoutingConfig(
            num_experts=self.experts,
            k=self.k,
            capacity_factor=self.capacity_factor,
            dispatch_mode=self.dispatch_mode,
        )

    def moe_blocks(self) -> tuple:
        """Indices of mixture blocks: every second block, starting at 1."""
        return tuple(i for i in range(self.blocks) if i % 2 == 1)


@dataclass
class LayerRecord:
    """Routing trace of one mixture block for one forward pass."""

    block_index: int
    gate: GateOutput
    plan: DispatchPlan


@dataclass
class ForwardResult:
    logits: Tensor  # (T, classes)
    layers: list  # LayerRecord per mixture block, in depth order


def _init_ffn(rng: np.random.Generator, dim: int, hidden: int) -> ExpertParams:
    return ExpertParams(
        w1=Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden))),
        b1=Tensor(np.zeros((1, hidden))),
        w2=Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, dim))),
        b2=Tensor(np.zeros((1, dim))),
    )


class MoeModel:
    """The model: parameters, forward pass, and the parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        moe = set(config.moe_blocks())

        self._dense: dict = {}
        self._routers: dict = {}
        self._expert_sets: dict = {}
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

        for i in range(config.blocks):
            if i in moe:
                router = RouterParams(
                    weights=Tensor(
                        rng.normal(0.0, 1.0 / math.sqrt(config.dim), size=(config.experts, config.dim))
                    )
                )
                experts = ExpertSet.initialize(config.experts, config.dim, config.hidden, rng)
                self._routers[i] = router
                self._expert_sets[i] = experts
                self._params[f"block{i}.router"] = router.weights
                for e in range(config.experts):
                    for name, tensor in zip(("w1", "b1", "w2", "b2"), experts[e].tensors()):
                        self._params[f"block{i}.expert{e}.{name}"] = tensor
            else:
                ffn = _init_ffn(rng, config.dim, config.hidden)
                self._dense[i] = ffn
                for name, tensor in zip(("w1", "b1", "w2", "b2"), ffn.tensors()):
                    self._params[f"block{i}.{name}"] = tensor

        self.head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(config.dim), size=(config.dim, config.classes)))
        self.head_b = Tensor(np.zeros((1, config.classes)))
        self._params["head.w"] = self.head_w
        self._params["head.b"] = self.head_b

    # -- parameter registry -------------------------------------------------

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad[...] = 0.0

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_state(self, arrays) -> None:
        expected = list(self._params)
        got = list(arrays)
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise ConfigError(
                f"parameter names do not match the model: missing {missing}, unexpected {extra}"
            )
        for name, tensor in self._params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.data.shape:
                raise ConfigError(
                    f"parameter {name}: expected shape {tensor.data.shape}, got {value.shape}"
                )
            tensor.data[...] = value
            tensor.grad[...] = 0.0

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        features,
        mapping: Optional[MappingTable] = None,
        dataset_ids=None,
        plan_seed: int = 0,
        dispatch_mode: Optional[str] = None,
    ) -> ForwardResult:
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.config.dim:
            raise ShapeError(
                f"model expects {self.config.dim} features, batch has {x.shape[1]}"
            )
        routing = self.config.routing()
        if dispatch_mode is not None:
            routing = dataclasses.replace(routing, dispatch_mode=dispatch_mode)
        layers = []
        for i in range(self.config.blocks):
            if i in self._routers:
                gate_out = gate(x, self._routers[i])
                plan = build_plan(
                    gate_out, routing, mapping=mapping, dataset_ids=dataset_ids, seed=plan_seed
                )
                x = x + moe_forward(
                    x, self._expert_sets[i], plan, parallel=self.config.parallel_experts
                )
                layers.append(LayerRecord(block_index=i, gate=gate_out, plan=plan))
            else:
                x = x + self._dense[i].forward(x)
        logits = x @ self.head_w + self.head_b
        return ForwardResult(logits=logits, layers=layers)


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config_text: str  # resolved run config, verbatim key = value lines
    arrays: "OrderedDict[str, np.ndarray]"


def checkpoint_text(model: MoeModel, config_text: str) -> str:
    config_lines = config_text.splitlines()
    out = [CHECKPOINT_MAGIC, f"config {len(config_lines)}"]
    out.extend(config_lines)
    out.append(f"params {len(model.params)}")
    for name, tensor in model.params.items():
        rows, cols = tensor.data.shape
        out.append(f"param {name} {rows} {cols}")
        for r in range(rows):
            out.append(" ".join("%.17g" % v for v in tensor.data[r]))
    return "\n".join(out) + "\n"


def save_checkpoint(model: MoeModel, config_text: str, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_text(model, config_text))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return parse_checkpoint(lines, source=str(path))


def parse_checkpoint(lines, source: str = "checkpoint") -> Checkpoint:
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{source}: bad magic, expected {CHECKPOINT_MAGIC!r}", line=1)
    pos = 1

    def fail(message, at=None):
        raise ConfigError(f"{source}: {message}", line=(pos if at is None else at) + 1)

    if pos >= len(lines) or not lines[pos].startswith("config "):
        fail("expected a 'config <n>' line")
    try:
        n_config = int(lines[pos].split()[1])
    except (IndexError, ValueError):
        fail("malformed config count")
    pos += 1
    config_text = "\n".join(lines[pos : pos + n_config])
    if len(lines[pos : pos + n_config]) != n_config:
        fail("config section truncated")
    pos += n_config

    if pos >= len(lines) or not lines[pos].startswith("params "):
        fail("expected a 'params <n>' line")
    try:
        n_params = int(lines[pos].split()[1])
    except (IndexError, ValueError):
        fail("malformed params count")
    pos += 1

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n_params):
        if pos >= len(lines):
            fail("params section truncated")
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != "param":
            fail(f"expected 'param <name> <rows> <cols>', got {lines[pos]!r}")
        name = parts[1]
        try:
            rows, cols = int(parts[2]), int(parts[3])
        except ValueError:
            fail("malformed parameter shape")
        if rows < 1 or cols < 1 or name in arrays:
            fail(f"bad shape or duplicate parameter {name!r}")
        pos += 1
        data = np.empty((rows, cols), dtype=np.float64)
        for r in range(rows):
            if pos >= len(lines):
                fail(f"parameter {name}: value rows truncated")
            try:
                row = [float(v) for v in lines[pos].split()]
            except ValueError:
                fail(f"parameter {name}: malformed value")
            if len(row) != cols:
                fail(f"parameter {name}: expected {cols} values, got {len(row)}")
            data[r] = row
            pos += 1
        arrays[name] = data
    return Checkpoint(config_text=config_text, arrays=arrays)
