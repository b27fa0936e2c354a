"""Auxiliary balancing losses, the dataset-aware routing loss, and task loss.

The two balance losses are squared coefficients of variation of per-expert
sums: gate probabilities for the importance loss, CDF-smoothed assignment
counts for the load loss. Both are scale-free and vanish exactly when every
expert carries an equal share. The dataset-aware loss is a cross-entropy
pulling each token's gate distribution toward its dataset's mapped experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateBatchError, ParameterError
from .mapping import MappingTable

AUX_MODES = ("load_balancing", "damex", "both")

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    aux_weight: float = 0.1
    aux_mode: str = "damex"
    gate_noise: float = 1.0
    foreground_only: bool = True

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ParameterError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.aux_mode not in AUX_MODES:
            raise ParameterError(
                f"aux_mode must be one of {AUX_MODES}, got {self.aux_mode!r}"
            )
        if self.aux_mode in ("load_balancing", "both") and self.gate_noise <= 0:
            raise ParameterError("gate_noise must be positive when the load loss is active")


@dataclass
class LossBundle:
    task: float
    importance: float
    load: float
    load_balancing: float
    damex: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "task": self.task,
            "importance": self.importance,
            "load": self.load,
            "load_balancing": self.load_balancing,
            "damex": self.damex,
            "total": self.total,
        }


def _mask_indices(num_tokens: int, mask) -> np.ndarray:
    if mask is None:
        return np.arange(num_tokens)
    mask = np.asarray(mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise DegenerateBatchError("every token is masked out")
    return idx


def _cv_squared(per_expert: Tensor) -> Tensor:
    """Var(x) / Mean(x)^2 with population variance, over a 1 x E row."""
    values = per_expert.data
    if np.all(values == values.flat[0]):
        # Perfectly balanced loads sit at the stationary point of the
        # variance: the loss and its gradient are both exactly zero.  The
        # arithmetic below can round mean(x) an ulp away from x and turn
        # that exact zero into noise, so short-circuit the identity case.
        return Tensor(np.zeros((1, 1)))
    n = per_expert.shape[1]
    mean = per_expert.sum() * (1.0 / n)
    centered = per_expert - mean
    variance = (centered * centered).sum() * (1.0 / n)
    return variance / (mean * mean)


def importance_loss(probs: Tensor, mask=None) -> Tensor:
    """Squared CV of the per-expert summed gate probabilities (masked tokens)."""
    idx = _mask_indices(probs.shape[0], mask)
    rows = probs if idx.size == probs.shape[0] else probs.gather_rows(idx)
    return _cv_squared(rows.sum(axis=0))


def load_loss(probs: Tensor, gate_noise: float, mask=None) -> Tensor:
    """Squared CV of per-expert loads L_i = sum of Phi(p_i(x)).

    Phi is the CDF of N(0, sigma^2) with sigma = gate_noise / num_experts;
    it differentiably smooths the hard assignment count.
    """
    if gate_noise <= 0:
        raise ParameterError(f"gate_noise must be positive, got {gate_noise}")
    idx = _mask_indices(probs.shape[0], mask)
    rows = probs if idx.size == probs.shape[0] else probs.gather_rows(idx)
    sigma = gate_noise / probs.shape[1]
    return _cv_squared(rows.normal_cdf(sigma).sum(axis=0))


def load_balancing_loss(importance, load) -> Tensor:
    """Average of the importance and load losses."""
    return (Tensor._lift(importance) + Tensor._lift(load)) * 0.5


def damex_loss(probs: Tensor, dataset_ids, mapping: MappingTable, mask=None) -> Tensor:
    """Cross-entropy between gate probabilities and the mapped-expert target.

    The target is uniform over the token's mapped experts (one-hot for a
    singleton mapping). Mean over masked-in tokens; logs are clamped at
    LOG_FLOOR so a collapsed router stays finite.
    """
    dataset_ids = np.asarray(dataset_ids)
    idx = _mask_indices(probs.shape[0], mask)
    targets = np.stack(
        [mapping.target_distribution(int(d)) for d in dataset_ids[idx]]
    )
    rows = probs.gather_rows(idx)
    per_token = rows.log_clamped(LOG_FLOOR) * Tensor(targets)
    return -(per_token.sum()) * (1.0 / idx.size)


def task_cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over masked-in tokens."""
    labels = np.asarray(labels)
    idx = _mask_indices(logits.shape[0], mask)
    rows = logits if idx.size == logits.shape[0] else logits.gather_rows(idx)
    probs = rows.softmax_rows()
    picked = probs.gather_elements(np.arange(idx.size), labels[idx])
    return -(picked.log_clamped(LOG_FLOOR).sum()) * (1.0 / idx.size)


def total_loss(task, importance, load, damex, cfg: LossConfig) -> tuple[Tensor, LossBundle]:
    """Compose the weighted training objective and its report bundle.

    aux_mode picks the auxiliary term: the load-balancing average, the
    dataset-aware loss, or their sum. total = task + aux_weight * aux.
    """
    task = Tensor._lift(task)
    importance = Tensor._lift(importance)
    load = Tensor._lift(load)
    damex = Tensor._lift(damex)
    balancing = load_balancing_loss(importance, load)

    if cfg.aux_mode == "load_balancing":
        aux = balancing
    elif cfg.aux_mode == "damex":
        aux = damex
    else:
        aux = balancing + damex
    total = task + aux * cfg.aux_weight

    bundle = LossBundle(
        task=float(task.data[0, 0]),
        importance=float(importance.data[0, 0]),
        load=float(load.data[0, 0]),
        load_balancing=float(balancing.data[0, 0]),
        damex=float(damex.data[0, 0]),
        total=float(total.data[0, 0]),
    )
    return total, bundle
