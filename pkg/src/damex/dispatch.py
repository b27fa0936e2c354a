"""Capacity-constrained token dispatch, expert evaluation, and combine.

Each expert owns a buffer of C = ceil(f * k * T / E) slots per batch (one
logical expert slot standing in for one device). Assignments fill buffers
first-come-first-served in batch order; a token whose buffers are all full is
dropped and contributes a zero output row, on the assumption that a residual
connection carries it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, GraphError, ParameterError
from .gating import GateOutput, _features_tensor, select_top_k
from .mapping import MappingTable

DROPPED = -1

DISPATCH_MODES = ("router_argmax", "forced_mapping")


@dataclass
class RoutingConfig:
    num_experts: int
    k: int = 1
    capacity_factor: float = 1.25
    dispatch_mode: str = "router_argmax"

    def __post_init__(self):
        if self.num_experts < 1:
            raise ParameterError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.k <= self.num_experts:
            raise ParameterError(
                f"k must lie in [1, {self.num_experts}], got {self.k}"
            )
        if self.capacity_factor <= 0:
            raise ParameterError(
                f"capacity_factor must be positive, got {self.capacity_factor}"
            )
        if self.dispatch_mode not in DISPATCH_MODES:
            raise ParameterError(
                f"dispatch_mode must be one of {DISPATCH_MODES}, got {self.dispatch_mode!r}"
            )


@dataclass
class ExpertParams:
    """One two-layer feed-forward expert: dim -> hidden -> dim, GELU inside."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def forward(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).gelu() @ self.w2 + self.b2

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


class ExpertSet:
    """E experts with identical shapes."""

    def __init__(self, experts: list[ExpertParams]):
        if not experts:
            raise ParameterError("ExpertSet needs at least one expert")
        shapes = {tuple(t.shape for t in e.tensors()) for e in experts}
        if len(shapes) != 1:
            raise ParameterError("all experts must share identical shapes")
        self.experts = experts

    @classmethod
    def initialize(cls, num_experts: int, dim: int, hidden: int, rng) -> "ExpertSet":
        experts = []
        for _ in range(num_experts):
            experts.append(
                ExpertParams(
                    w1=Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden))),
                    b1=Tensor(np.zeros((1, hidden))),
                    w2=Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, dim))),
                    b2=Tensor(np.zeros((1, dim))),
                )
            )
        return cls(experts)

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i: int) -> ExpertParams:
        return self.experts[i]

    @property
    def dim(self) -> int:
        return self.experts[0].w1.shape[0]


@dataclass
class DispatchPlan:
    """Routing decisions plus the capacity-constrained buffer assignment.

    `selected` holds the pre-capacity expert choice per (token, slot) while
    `expert_ids` holds the post-capacity outcome with DROPPED (-1) where the
    buffer was full. Combine weights are read from `gate.probs`, so gradients
    flow through the gating probabilities.
    """

    selected: np.ndarray      # (T, k) int
    expert_ids: np.ndarray    # (T, k) int, DROPPED where the buffer was full
    slots: np.ndarray         # (T, k) int, buffer slot or DROPPED
    occupancy: np.ndarray     # (E,) int
    capacity: int
    gate: GateOutput
    config: RoutingConfig = field(repr=False)

    @property
    def num_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def dropped_assignments(self) -> int:
        return int((self.expert_ids == DROPPED).sum())

    def dropped_tokens(self) -> np.ndarray:
        """Boolean mask of tokens whose every assignment was dropped."""
        return (self.expert_ids == DROPPED).all(axis=1)


@dataclass
class DispatchStats:
    counts: np.ndarray
    drops: int
    drop_rate: float
    occupancy_cov: float


def capacity(num_tokens: int, cfg: RoutingConfig) -> int:
    """Per-expert buffer size: ceil(capacity_factor * k * T / E)."""
    if num_tokens < 1:
        raise ParameterError(f"need at least one token, got {num_tokens}")
    return math.ceil(cfg.capacity_factor * cfg.k * num_tokens / cfg.num_experts)


def build_plan(
    gate_out: GateOutput,
    cfg: RoutingConfig,
    mapping: MappingTable | None = None,
    dataset_ids=None,
    seed: int = 0,
) -> DispatchPlan:
    """Assign tokens to expert buffer slots, first-come-first-served.

    router_argmax mode follows the top-k selection; forced_mapping mode draws
    k distinct experts from the token's mapped set (seeded) while combine
    weights stay the gating probabilities.
    """
    num_tokens = gate_out.num_tokens
    selected = _select_experts(gate_out, cfg, mapping, dataset_ids, seed)

    cap = capacity(num_tokens, cfg)
    expert_ids = selected.copy()
    slots = np.full_like(selected, DROPPED)
    occupancy = np.zeros(cfg.num_experts, dtype=np.int64)
    for t in range(num_tokens):
        for j in range(cfg.k):
            e = selected[t, j]
            if occupancy[e] < cap:
                slots[t, j] = occupancy[e]
                occupancy[e] += 1
            else:
                expert_ids[t, j] = DROPPED
    return DispatchPlan(
        selected=selected,
        expert_ids=expert_ids,
        slots=slots,
        occupancy=occupancy,
        capacity=cap,
        gate=gate_out,
        config=cfg,
    )


def _select_experts(gate_out, cfg, mapping, dataset_ids, seed) -> np.ndarray:
    num_tokens = gate_out.num_tokens
    if cfg.dispatch_mode == "router_argmax":
        topk = select_top_k(gate_out, cfg.k)
        return np.array([[e for e, _ in row] for row in topk], dtype=np.int64)

    if mapping is None:
        raise ConfigError("forced_mapping dispatch requires a mapping table")
    if dataset_ids is None:
        raise ConfigError("forced_mapping dispatch requires per-token dataset ids")
    dataset_ids = np.asarray(dataset_ids)
    if dataset_ids.shape[0] != num_tokens:
        raise GraphError(
            f"got {dataset_ids.shape[0]} dataset ids for {num_tokens} tokens"
        )
    rng = np.random.default_rng(seed)
    selected = np.empty((num_tokens, cfg.k), dtype=np.int64)
    for t in range(num_tokens):
        mapped = mapping.experts_for(int(dataset_ids[t]))
        if len(mapped) < cfg.k:
            raise ConfigError(
                f"dataset {int(dataset_ids[t])} maps to {len(mapped)} experts, "
                f"fewer than k={cfg.k}"
            )
        if len(mapped) == cfg.k:
            selected[t] = mapped
        else:
            selected[t] = rng.choice(mapped, size=cfg.k, replace=False)
    return selected


def moe_forward(
    tokens,
    experts: ExpertSet,
    plan: DispatchPlan,
    parallel: bool = False,
) -> Tensor:
    """Combine: y_t = sum over surviving assignments of p_i(x_t) * e_i(x_t).

    Fully dropped tokens yield the zero row. Expert contributions are summed
    in ascending expert order, so serial and parallel expert evaluation are
    bitwise identical.
    """
    feats = _features_tensor(tokens)
    num_tokens, dim = feats.shape
    if plan.num_tokens != num_tokens:
        raise GraphError(
            f"plan built for {plan.num_tokens} tokens, batch has {num_tokens}"
        )
    if experts.dim != dim:
        raise GraphError(f"expert dim {experts.dim} does not match batch dim {dim}")

    probs = plan.gate.probs
    chunks: list[tuple[int, np.ndarray]] = []
    for e in range(len(experts)):
        token_idx = np.nonzero((plan.expert_ids == e).any(axis=1))[0]
        if token_idx.size:
            chunks.append((e, token_idx))

    def run_chunk(chunk: tuple[int, np.ndarray]) -> Tensor:
        e, token_idx = chunk
        x_e = feats.gather_rows(token_idx)
        out_e = experts[e].forward(x_e)
        weights = probs.gather_elements(token_idx, np.full_like(token_idx, e))
        return (out_e * weights).scatter_rows(token_idx, num_tokens)

    if parallel and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            contributions = list(pool.map(run_chunk, chunks))
    else:
        contributions = [run_chunk(c) for c in chunks]

    output = Tensor(np.zeros((num_tokens, dim)))
    for contribution in contributions:  # ascending expert order
        output = output + contribution
    return output


def dispatch_stats(plan: DispatchPlan) -> DispatchStats:
    """Per-expert counts, drop rate, and occupancy coefficient of variation."""
    counts = plan.occupancy.astype(np.float64)
    drops = plan.dropped_assignments
    total = plan.num_tokens * plan.k
    mean = counts.mean()
    cov = float(counts.std() / mean) if mean > 0 else 0.0
    return DispatchStats(
        counts=plan.occupancy.copy(),
        drops=drops,
        drop_rate=drops / total,
        occupancy_cov=cov,
    )
