"""scikit-learn style regressor around the adapter trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from . import trainer as tr
from .omni import VISUAL, TokenBatch


class _ArrayTask:
    """Serves fixed arrays through the trainer's task interface."""

    def __init__(self, task_id, X, y, modality, seed):
        self.task_id = task_id
        self.X, self.y, self.modality = X, y, modality
        self.seed = seed

    def _order(self, epoch, stream):
        n = len(self.X)
        keys = nk.Rng(self.seed).spawn(self.task_id, stream, epoch).uniform(n)
        return np.argsort(keys, kind="stable")

    def example(self, split, index, stream=0):
        n = len(self.X)
        if split == "val":
            i = index % n
        else:
            i = self._order(index // n, stream)[index % n]
        return TokenBatch(self.X[i], list(self.modality[i])), self.y[i]

    def batch(self, split, start, size, stream=0):
        if split == "val":
            size = min(size, len(self.X))
        return [self.example(split, start + k, stream) for k in range(size)]


class OmniSmolaRegressor(RegressorMixin, BaseEstimator):
    """Fit an adapter on top of a frozen linear map from token sequences.

    ``X`` has shape (n_sequences, n_tokens, d_in) and ``y`` shape
    (n_sequences, n_tokens, d_out). ``modality`` is an optional
    (n_sequences, n_tokens) array of ``"visual"``/``"text"`` labels (default:
    all visual). ``groups`` splits sequences into tasks whose losses are
    summed with unit weights. If ``base`` is None the frozen map is first
    fitted by least squares on all tokens. After fitting, ``model_`` holds
    the checkpoint with the best validation score (evaluated on the training
    sequences).
    """

    def __init__(self, base=None, arm="omni-smola", num_experts=8, rank=2, steps=500,
                 lr=0.1, momentum=0.9, batch_size=4, eval_every=100, val_examples=16,
                 random_state=0):
        self.base = base
        self.arm = arm
        self.num_experts = num_experts
        self.rank = rank
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.val_examples = val_examples
        self.random_state = random_state

    def _check_X(self, X, modality):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must have shape (n_sequences, n_tokens, d_in), got {X.shape}")
        if modality is None:
            modality = np.full(X.shape[:2], VISUAL, dtype=object)
        modality = np.asarray(modality, dtype=object)
        if modality.shape != X.shape[:2]:
            raise ValueError(f"modality shape {modality.shape} does not match {X.shape[:2]}")
        return X, modality

    def fit(self, X, y, modality=None, groups=None):
        X, modality = self._check_X(X, modality)
        y = check_array(y, allow_nd=True, dtype=np.float64)
        if y.ndim != 3 or y.shape[:2] != X.shape[:2]:
            raise ValueError(f"y shape {y.shape} incompatible with X shape {X.shape}")
        if self.base is None:
            flat_x = X.reshape(-1, X.shape[2])
            base, *_ = np.linalg.lstsq(flat_x, y.reshape(-1, y.shape[2]), rcond=None)
        else:
            base = nk.as_matrix(self.base, "base")
            if base.shape != (X.shape[2], y.shape[2]):
                raise ValueError(f"base shape {base.shape} does not match data dims")
        groups = np.zeros(len(X), dtype=int) if groups is None else np.asarray(groups)
        labels = sorted(set(groups.tolist()))
        tasks = [_ArrayTask(k, X[groups == g], y[groups == g], modality[groups == g],
                            self.random_state) for k, g in enumerate(labels)]

        model = tr.make_arm(self.arm, base, self.num_experts, self.rank, seed=self.random_state)
        state = tr.train(model, tasks, self.steps, self.lr, self.eval_every,
                         self.random_state, self.batch_size, self.val_examples,
                         self.momentum, arm=self.arm)
        self.base_ = base
        self.state_ = state
        self.history_ = state.log
        self.model_ = state.best_model(base)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X, modality=None):
        check_is_fitted(self, "model_")
        X, modality = self._check_X(X, modality)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[2]} features, expected {self.n_features_in_}")
        return np.stack([self.model_.predict(TokenBatch(x, list(m)))
                         for x, m in zip(X, modality)])

    def transform(self, X, modality=None):
        """Same as :meth:`predict`; lets the fitted adapter sit mid-pipeline."""
        return self.predict(X, modality)

    def score(self, X, y, modality=None, sample_weight=None):
        pred = self.predict(X, modality)
        y = np.asarray(y, dtype=np.float64)
        return r2_score(y.reshape(-1, y.shape[-1]), pred.reshape(-1, pred.shape[-1]))
