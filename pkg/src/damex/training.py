"""Training loop, evaluation, and routing metrics.

The loop is plain mini-batch gradient descent (optionally Adam) over the
named parameter registry, deterministic given the run config and seed:
batch sampling, parameter init, and dispatch all draw from seeded
generators, and metrics serialize with fixed formatting, so two runs of
the same config produce byte-identical artifacts.

Routing metrics quantify what the router learned:

* routing purity  — fraction of a dataset's foreground tokens whose chosen
  expert belongs to the dataset's mapped set;
* utilization     — per-layer |D| x E matrix of mean gate probabilities;
* collapse score  — 1 - H(expert usage)/ln E, so 0 is perfectly uniform
  usage and 1 is all tokens on a single expert.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, reverse_grad
from .config import RunConfig
from .data import TokenBatch, generate_mixture, union_label_count
from .dispatch import dispatch_stats
from .errors import ConfigError, MappingError, TrainingDiverged
from .losses import (
    LossBundle,
    LossConfig,
    damex_loss,
    importance_loss,
    load_loss,
    task_cross_entropy,
    total_loss,
)
from .mapping import MappingTable
from .model import ForwardResult, MoeModel

# ---------------------------------------------------------------------------
# Routing metrics
# ---------------------------------------------------------------------------


@dataclass
class Utilization:
    """One layer's |D| x E matrix of mean gate probabilities.

    Datasets with zero masked-in tokens are flagged absent (``present``
    False, NaN row) rather than given a zero row.
    """

    datasets: list
    matrix: np.ndarray
    present: np.ndarray

    def row(self, dataset_id: int) -> Optional[np.ndarray]:
        i = self.datasets.index(dataset_id)
        return self.matrix[i] if self.present[i] else None


def _metric_mask(num_tokens: int, mask) -> np.ndarray:
    if mask is None:
        return np.ones(num_tokens, dtype=bool)
    return np.asarray(mask, dtype=bool)


def routing_purity(layers, dataset_ids, mapping: MappingTable, mask=None) -> dict:
    """Per (block, dataset): fraction of masked-in tokens of that dataset
    whose first selected expert (pre-capacity) is one of its mapped experts."""
    ids = np.asarray(dataset_ids)
    out = {}
    for rec in layers:
        keep = _metric_mask(rec.plan.num_tokens, mask)
        top = rec.plan.selected[:, 0]
        for d in sorted(set(int(v) for v in ids[keep])):
            mapped = mapping.experts_for(d)
            sel = keep & (ids == d)
            out[(rec.block_index, d)] = float(np.isin(top[sel], mapped).mean())
    return out


def utilization_matrix(layers, dataset_ids, mask=None) -> dict:
    """Per block: mean gate-probability row per dataset over masked-in tokens."""
    ids = np.asarray(dataset_ids)
    datasets = sorted(set(int(v) for v in ids))
    out = {}
    for rec in layers:
        keep = _metric_mask(rec.plan.num_tokens, mask)
        probs = rec.gate.probs.data
        matrix = np.full((len(datasets), probs.shape[1]), np.nan)
        present = np.zeros(len(datasets), dtype=bool)
        for i, d in enumerate(datasets):
            sel = keep & (ids == d)
            if sel.any():
                matrix[i] = probs[sel].mean(axis=0)
                present[i] = True
        out[rec.block_index] = Utilization(datasets=datasets, matrix=matrix, present=present)
    return out


def collapse_score(layers, mask=None) -> dict:
    """Per block: 1 - H(expert-usage)/ln E over masked-in selections."""
    out = {}
    for rec in layers:
        keep = _metric_mask(rec.plan.num_tokens, mask)
        num_experts = rec.gate.num_experts
        if num_experts == 1:
            out[rec.block_index] = 0.0
            continue
        usage = np.bincount(
            rec.plan.selected[keep].ravel(), minlength=num_experts
        ).astype(np.float64)
        q = usage / usage.sum()
        positive = q[q > 0]
        entropy = float(-(positive * np.log(positive)).sum())
        out[rec.block_index] = max(0.0, 1.0 - entropy / math.log(num_experts))
    return out


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, params, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for tensor in self.params.values():
            tensor.data -= self.lr * tensor.grad


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, tensor in self.params.items():
            g = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, params, lr: float):
    if name == "sgd":
        return Sgd(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Batch sampling and the objective
# ---------------------------------------------------------------------------


class BatchSampler:
    """Seeded sampler: one reserved foreground token per dataset, the rest
    drawn uniformly (hence proportionally to dataset size)."""

    def __init__(self, train: TokenBatch, batch_size: int, seed: int):
        self.train = train
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 1])
        self.datasets = sorted(set(int(d) for d in train.dataset_ids))
        if batch_size < len(self.datasets):
            raise ConfigError(
                f"batch size {batch_size} cannot cover {len(self.datasets)} datasets"
            )
        self.fg_pools = {}
        for d in self.datasets:
            pool = np.nonzero((train.dataset_ids == d) & train.foreground)[0]
            if pool.size == 0:
                raise ConfigError(f"dataset {d} has no foreground tokens to sample")
            self.fg_pools[d] = pool

    def next(self) -> TokenBatch:
        reserved = [self.rng.choice(self.fg_pools[d]) for d in self.datasets]
        rest = self.rng.integers(0, len(self.train), size=self.batch_size - len(reserved))
        return self.train.take(np.concatenate([np.asarray(reserved, dtype=np.int64), rest]))


def _mean_tensor(terms) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def batch_objective(
    result: ForwardResult,
    batch: TokenBatch,
    mapping: MappingTable,
    loss_cfg: LossConfig,
):
    """Total training loss for one forward pass: task cross-entropy plus the
    configured auxiliary, each auxiliary averaged over the mixture layers."""
    fg = batch.foreground
    task = task_cross_entropy(result.logits, batch.labels, mask=fg)
    aux_mask = fg if loss_cfg.foreground_only else None

    layers = result.layers
    importance = _mean_tensor([importance_loss(l.gate.probs, aux_mask) for l in layers])
    if loss_cfg.gate_noise > 0:
        load = _mean_tensor(
            [load_loss(l.gate.probs, loss_cfg.gate_noise, aux_mask) for l in layers]
        )
    else:
        load = 0.0
    damex = _mean_tensor(
        [damex_loss(l.gate.probs, batch.dataset_ids, mapping, aux_mask) for l in layers]
    )
    return total_loss(task, importance, load, damex, loss_cfg)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    step: int
    accuracy: dict  # dataset -> foreground accuracy
    purity: dict  # (block, dataset) -> purity
    utilization: dict  # block -> Utilization
    collapse: dict  # block -> score
    drop_rate: dict  # block -> dropped assignment fraction

    def mean_purity(self) -> float:
        return float(np.mean(list(self.purity.values())))

    def max_collapse(self) -> float:
        return float(max(self.collapse.values()))


def evaluate(model: MoeModel, batch: TokenBatch, mapping: MappingTable, step: int = 0) -> EvalReport:
    """Held-out metrics; always routed by the router's own argmax so the
    purity numbers measure what the router learned."""
    result = model.forward(batch.features, dispatch_mode="router_argmax")
    fg = batch.foreground

    predictions = np.argmax(result.logits.data, axis=1)
    accuracy = {}
    for d in sorted(set(int(v) for v in batch.dataset_ids)):
        sel = fg & (batch.dataset_ids == d)
        if sel.any():
            accuracy[d] = float((predictions[sel] == batch.labels[sel]).mean())

    return EvalReport(
        step=step,
        accuracy=accuracy,
        purity=routing_purity(result.layers, batch.dataset_ids, mapping, mask=fg),
        utilization=utilization_matrix(result.layers, batch.dataset_ids, mask=fg),
        collapse=collapse_score(result.layers, mask=fg),
        drop_rate={
            rec.block_index: dispatch_stats(rec.plan).drop_rate for rec in result.layers
        },
    )


# ---------------------------------------------------------------------------
# The training run
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    steps: list  # (step, LossBundle)
    evals: list  # EvalReport

    def final_eval(self) -> EvalReport:
        return self.evals[-1]

    def bundle_at(self, step: int) -> LossBundle:
        for s, bundle in self.steps:
            if s == step:
                return bundle
        raise KeyError(step)


@dataclass
class RunResult:
    model: MoeModel
    metrics: RunMetrics
    train_tokens: TokenBatch
    eval_tokens: TokenBatch


def _check_compatible(cfg: RunConfig, train: TokenBatch, eval_batch: TokenBatch) -> None:
    union = union_label_count([train, eval_batch])
    if union > cfg.model.classes:
        raise ConfigError(
            f"data uses {union} classes but model.classes = {cfg.model.classes}"
        )
    for d in sorted(set(int(v) for v in train.dataset_ids)):
        try:
            cfg.mapping.experts_for(d)
        except MappingError as err:
            raise ConfigError(str(err)) from None


def train_run(cfg: RunConfig, progress=None) -> RunResult:
    """Run the full training loop described by a config. Deterministic."""
    cfg.resolve()
    train_tokens, eval_tokens = generate_mixture(cfg.specs(), cfg.data.seed)
    _check_compatible(cfg, train_tokens, eval_tokens)

    model = MoeModel(cfg.model, seed=cfg.train.seed)
    sampler = BatchSampler(train_tokens, cfg.train.batch, cfg.train.seed)
    optimizer = make_optimizer(cfg.train.optimizer, model.params, cfg.train.lr)
    metrics = RunMetrics(steps=[], evals=[])

    for step in range(1, cfg.train.steps + 1):
        batch = sampler.next()
        model.zero_grad()
        result = model.forward(
            batch.features,
            mapping=cfg.mapping,
            dataset_ids=batch.dataset_ids,
            plan_seed=step,
        )
        total, bundle = batch_objective(result, batch, cfg.mapping, cfg.loss)
        if not math.isfinite(bundle.total):
            err = TrainingDiverged(
                f"step {step}: loss became non-finite ({bundle.as_dict()}); "
                f"offending batch: {len(batch)} tokens, "
                f"datasets {np.bincount(batch.dataset_ids).tolist()}, "
                f"{int(batch.foreground.sum())} foreground"
            )
            err.step = step
            err.bundle = bundle
            err.batch = batch
            raise err
        reverse_grad(total)
        optimizer.step()
        metrics.steps.append((step, bundle))

        due = cfg.train.eval_every and step % cfg.train.eval_every == 0
        if due or step == cfg.train.steps:
            metrics.evals.append(evaluate(model, eval_tokens, cfg.mapping, step=step))
            if progress is not None:
                progress(step, bundle, metrics.evals[-1])

    return RunResult(
        model=model, metrics=metrics, train_tokens=train_tokens, eval_tokens=eval_tokens
    )


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

METRICS_HEADER = ["kind", "step", "layer", "dataset", "expert", "metric", "value"]


def _value(v: float) -> str:
    return "%.17g" % v


def metrics_rows(metrics: RunMetrics):
    for step, bundle in metrics.steps:
        for name, value in bundle.as_dict().items():
            yield ["step", step, "", "", "", name, _value(value)]
    for report in metrics.evals:
        s = report.step
        for d, acc in sorted(report.accuracy.items()):
            yield ["eval", s, "", d, "", "accuracy", _value(acc)]
        for (block, d), p in sorted(report.purity.items()):
            yield ["eval", s, block, d, "", "purity", _value(p)]
        for block, util in sorted(report.utilization.items()):
            for i, d in enumerate(util.datasets):
                if not util.present[i]:
                    continue
                for e, w in enumerate(util.matrix[i]):
                    yield ["eval", s, block, d, e, "utilization", _value(w)]
        for block, score in sorted(report.collapse.items()):
            yield ["eval", s, block, "", "", "collapse", _value(score)]
        for block, rate in sorted(report.drop_rate.items()):
            yield ["eval", s, block, "", "", "drop_rate", _value(rate)]


def write_metrics_csv(metrics: RunMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in metrics_rows(metrics):
            writer.writerow(row)
