"""The router: per-token expert logits, probabilities, and top-k selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, ShapeError


def _features_tensor(tokens) -> Tensor:
    """Accept a raw feature matrix or anything exposing `.features`."""
    feats = getattr(tokens, "features", tokens)
    return feats if isinstance(feats, Tensor) else Tensor(feats)


@dataclass
class RouterParams:
    """Gating weights (num_experts x dim) plus the gate-noise scale.

    `gate_noise` only parameterizes the load-loss CDF smoothing; no noise is
    ever injected into the logits.
    """

    weights: Tensor
    gate_noise: float = 1.0

    def __post_init__(self):
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        if not np.isfinite(self.weights.data).all():
            raise ParameterError("router weights must be finite")
        if self.gate_noise < 0:
            raise ParameterError(f"gate_noise must be >= 0, got {self.gate_noise}")

    @property
    def num_experts(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class GateOutput:
    """Per-token gate logits and softmax probabilities (both T x E)."""

    logits: Tensor
    probs: Tensor
    topk: list[list[tuple[int, float]]] | None = field(default=None)

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]


def gate(tokens, router: RouterParams) -> GateOutput:
    """Apply the router: logits[t] = W_r @ x_t, probs[t] = softmax(logits[t]).

    Differentiable in both the token features and the router weights.
    """
    feats = _features_tensor(tokens)
    if feats.shape[1] != router.dim:
        raise ShapeError(
            f"token dim {feats.shape[1]} does not match router dim {router.dim}"
        )
    logits = feats @ router.weights.transpose()
    return GateOutput(logits=logits, probs=logits.softmax_rows())


def select_top_k(gate_out: GateOutput, k: int) -> list[list[tuple[int, float]]]:
    """Per token, the k highest-probability experts in descending order.

    Ties break toward the lowest expert index. Selection itself carries no
    gradient; gradients flow only through the probability values later used
    as combine weights.
    """
    num_experts = gate_out.num_experts
    if not 1 <= k <= num_experts:
        raise ParameterError(f"k must lie in [1, {num_experts}], got {k}")
    probs = gate_out.probs.data
    # Stable sort on negated probabilities: equal entries keep index order.
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    topk = [
        [(int(e), float(probs[t, e])) for e in order[t]]
        for t in range(probs.shape[0])
    ]
    gate_out.topk = topk
    return topk
