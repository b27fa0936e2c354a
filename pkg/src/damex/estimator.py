"""Scikit-learn facade over the mixture-of-experts training loop.

``DamexClassifier`` follows the estimator protocol -- ``get_params`` /
``set_params`` cloning, ``fit`` / ``predict`` / ``predict_proba``, and the
standard fitted attributes -- while accepting the two extra columns this
model family cares about: a per-sample ``dataset_ids`` vector that drives
dataset-aware routing, and an optional ``foreground`` mask for samples that
should be routed but not scored.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import TokenBatch
from .errors import ConfigError, MappingError, ParameterError, ShapeError
from .losses import LossConfig
from .mapping import MappingTable
from .model import ModelConfig, MoeModel
from .training import BatchSampler, batch_objective, make_optimizer
from .autodiff import reverse_grad


class DamexClassifier(ClassifierMixin, BaseEstimator):
    """Mixture-of-experts classifier with dataset-aware expert routing.

    Parameters mirror the run-config keys of the underlying trainer; the
    defaults reproduce its training recipe: tokens dispatched by their
    dataset's mapped expert while the router distills that mapping, then
    routed by the trained router's own argmax at prediction time.
    """

    def __init__(
        self,
        experts="auto",
        k=1,
        capacity_factor=1.25,
        hidden=32,
        blocks=4,
        aux_weight=0.1,
        aux_mode="damex",
        gate_noise=1.0,
        dispatch_mode="forced_mapping",
        mapping=None,
        steps=500,
        batch=64,
        lr=0.05,
        optimizer="sgd",
        seed=0,
    ):
        self.experts = experts
        self.k = k
        self.capacity_factor = capacity_factor
        self.hidden = hidden
        self.blocks = blocks
        self.aux_weight = aux_weight
        self.aux_mode = aux_mode
        self.gate_noise = gate_noise
        self.dispatch_mode = dispatch_mode
        self.mapping = mapping
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed

    # -- fitting --------------------------------------------------------

    def _validate_arrays(self, X, y, dataset_ids, foreground):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"X must be a non-empty 2-D array, got shape {X.shape}")
        n = X.shape[0]
        y = np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"y must have shape ({n},), got {y.shape}")
        if dataset_ids is None:
            dataset_ids = np.zeros(n, dtype=np.int64)
        dataset_ids = np.asarray(dataset_ids, dtype=np.int64)
        if dataset_ids.shape != (n,):
            raise ValueError(f"dataset_ids must have shape ({n},)")
        if dataset_ids.min() < 0:
            raise ValueError("dataset_ids must be non-negative")
        if foreground is None:
            foreground = np.ones(n, dtype=bool)
        foreground = np.asarray(foreground, dtype=bool)
        if foreground.shape != (n,):
            raise ValueError(f"foreground must have shape ({n},)")
        if not foreground.any():
            raise ValueError("at least one sample must be foreground")
        for value in y[foreground]:
            if not isinstance(value, (numbers.Integral, np.integer)) and not float(
                value
            ).is_integer():
                raise ValueError(f"labels must be integers, got {value!r}")
        return X, y, dataset_ids, foreground

    def fit(self, X, y, dataset_ids=None, foreground=None):
        """Fit on features ``X`` and integer labels ``y``.

        ``dataset_ids`` tags each sample with its source dataset (default:
        a single dataset 0); ``foreground`` marks the samples that carry a
        trusted label -- background samples are routed for context but
        contribute to no loss term.
        """
        X, y, dataset_ids, foreground = self._validate_arrays(
            X, y, dataset_ids, foreground
        )
        datasets = sorted(int(d) for d in set(dataset_ids))
        self.classes_ = np.unique(np.asarray(y[foreground], dtype=np.int64))
        encoded = np.full(len(y), -1, dtype=np.int64)
        encoded[foreground] = np.searchsorted(
            self.classes_, np.asarray(y[foreground], dtype=np.int64)
        )

        num_experts = len(datasets) if self.experts == "auto" else int(self.experts)
        if self.mapping is None:
            table = {d: (datasets.index(d) % num_experts,) for d in datasets}
        else:
            table = {int(d): tuple(v) for d, v in dict(self.mapping).items()}
        try:
            mapping = MappingTable(table, num_experts=num_experts)
            config = ModelConfig(
                dim=X.shape[1],
                hidden=self.hidden,
                blocks=self.blocks,
                experts=num_experts,
                k=self.k,
                capacity_factor=self.capacity_factor,
                dispatch_mode=self.dispatch_mode,
                classes=len(self.classes_),
            )
            loss_cfg = LossConfig(
                aux_weight=self.aux_weight,
                aux_mode=self.aux_mode,
                gate_noise=self.gate_noise,
            )
            for d in datasets:
                mapping.experts_for(d)

            tokens = TokenBatch(X, dataset_ids, foreground, encoded)
            model = MoeModel(config, seed=self.seed)
            sampler = BatchSampler(tokens, min(self.batch, len(tokens)), self.seed)
            optimizer = make_optimizer(self.optimizer, model.params, self.lr)
            for step in range(1, self.steps + 1):
                batch = sampler.next()
                model.zero_grad()
                result = model.forward(
                    batch.features,
                    mapping=mapping,
                    dataset_ids=batch.dataset_ids,
                    plan_seed=step,
                )
                total, _ = batch_objective(result, batch, mapping, loss_cfg)
                reverse_grad(total)
                optimizer.step()
        except (ConfigError, MappingError, ParameterError, ShapeError) as err:
            raise ValueError(str(err)) from err

        self.model_ = model
        self.mapping_ = mapping
        self.n_features_in_ = X.shape[1]
        self.n_datasets_ = len(datasets)
        return self

    # -- prediction -----------------------------------------------------

    def _check_fitted_input(self, X):
        if not hasattr(self, "model_"):
            raise ValueError("this DamexClassifier instance is not fitted yet")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X must have shape (n, {self.n_features_in_}), got {X.shape}"
            )
        return X

    def decision_function(self, X):
        """Class logits under the trained router's own argmax routing."""
        X = self._check_fitted_input(X)
        result = self.model_.forward(X, dispatch_mode="router_argmax")
        return result.logits.data.copy()

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
