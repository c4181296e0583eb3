"""Estimator-style wrapper around the selector/predictor training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tape
from .dataset import TokenSequenceDataset
from .heads import pool_masked
from .kernels import KernelConfig
from .neuralcore import forward
from .rationalizer import deterministic_mask, score_tokens
from .trainer import TrainConfig, evaluate_nuisances, token_importance, train


class CATR(TransformerMixin, BaseEstimator):
    """Fit on a :class:`TokenSequenceDataset`; expose nuisances, features and token rankings.

    ``transform`` returns the trunk representation of the mask-pooled
    embeddings, the shared input of the three heads.
    """

    def __init__(
        self,
        mu=0.1,
        gamma=1.0,
        eta=0.5,
        batch_size=128,
        max_epochs=100,
        patience=10,
        learning_rate=1e-3,
        sparsity_kind="entropy",
        sparsity_prior=0.2,
        outcome_mode="real",
        outcome_kernel="rbf",
        selector_hidden=(64,),
        trunk_widths=(200, 100),
        head_widths=(),
        eval_mask="threshold",
        random_state=0,
    ):
        self.mu = mu
        self.gamma = gamma
        self.eta = eta
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.sparsity_kind = sparsity_kind
        self.sparsity_prior = sparsity_prior
        self.outcome_mode = outcome_mode
        self.outcome_kernel = outcome_kernel
        self.selector_hidden = selector_hidden
        self.trunk_widths = trunk_widths
        self.head_widths = head_widths
        self.eval_mask = eval_mask
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            mu=self.mu,
            gamma=self.gamma,
            eta=self.eta,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            learning_rate=self.learning_rate,
            seed=int(self.random_state),
            sparsity_kind=self.sparsity_kind,
            sparsity_prior=self.sparsity_prior,
            outcome_mode=self.outcome_mode,
            kernel=KernelConfig(outcome_kernel=self.outcome_kernel),
            selector_hidden=tuple(self.selector_hidden),
            trunk_widths=tuple(self.trunk_widths),
            head_widths=tuple(self.head_widths),
            eval_mask=self.eval_mask,
        )

    @staticmethod
    def _check(ds) -> TokenSequenceDataset:
        if not isinstance(ds, TokenSequenceDataset):
            raise TypeError("expected a TokenSequenceDataset")
        ds.validate()
        return ds

    def fit(self, X, y=None):
        ds = self._check(X)
        self.model_ = train(ds, self._train_config())
        self.history_ = self.model_.history
        self.best_epoch_ = self.model_.best_epoch
        self.n_features_in_ = ds.d
        return self

    def predict_nuisances(self, X):
        """``(g_hat, q0_hat, q1_hat)`` for every unit of ``X``."""
        check_is_fitted(self, "model_")
        nuis = evaluate_nuisances(self.model_, self._check(X))
        return nuis.g_hat, nuis.q0_hat, nuis.q1_hat

    def predict(self, X):
        """Factual outcome predictions ``Q(T_i, x_i)``."""
        ds = self._check(X)
        _, q0, q1 = self.predict_nuisances(ds)
        t = ds.treatment.astype(np.float64)
        return q1 * t + q0 * (1.0 - t)

    def selection_mask(self, X):
        check_is_fitted(self, "model_")
        ds = self._check(X)
        a = score_tokens(self.model_.selector, ds.embeddings.astype(np.float64), ds.lengths, Tape())
        return deterministic_mask(a, self.eval_mask, lengths=ds.lengths)

    def transform(self, X):
        ds = self._check(X)
        gates = self.selection_mask(ds)
        pooled = pool_masked(ds.embeddings.astype(np.float64), gates)
        return forward(self.model_.predictor.trunk, pooled).value.copy()

    def token_importance(self, X, k=20):
        check_is_fitted(self, "model_")
        return token_importance(self.model_, self._check(X), k)
