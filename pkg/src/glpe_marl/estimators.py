"""Scikit-learn style regressors over joint inputs of shape [count, N, d]."""

from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.metrics import r2_score

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .layers import PlainMlp, build_glpe_network
from .validation import check_joint_array, check_joint_pair, check_random_state


class _JointRegressor(RegressorMixin, BaseEstimator):
    """Shared Adam/MSE training loop; subclasses build ``network_``."""

    def _build(self, n_agents: int, d_in: int, d_out: int, rng: np.random.Generator):
        raise NotImplementedError

    def _init(self, X: np.ndarray, y: np.ndarray) -> None:
        rng = check_random_state(self.random_state)
        self.n_agents_ = X.shape[1]
        self.n_features_in_ = X.shape[2]
        self.n_outputs_ = y.shape[2]
        self.network_ = self._build(self.n_agents_, self.n_features_in_, self.n_outputs_, rng)
        self.optimizer_ = ad.Adam(self.network_.parameters(), lr=self.lr)
        self.loss_curve_: List[float] = []
        self._shuffle_rng = rng

    def _check_fitted(self) -> None:
        if not hasattr(self, "network_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit or partial_fit first")

    def _step(self, X: np.ndarray, y: np.ndarray) -> float:
        self.optimizer_.zero_grad()
        pred, _ = self.network_(Tensor(X))
        loss = ad.mse(pred, y)
        loss.backward()
        self.optimizer_.step()
        value = loss.item()
        self.loss_curve_.append(value)
        return value

    def partial_fit(self, X, y):
        """One Adam step on the batch (X, y)."""
        X, y = check_joint_pair(X, y)
        if not hasattr(self, "network_"):
            self._init(X, y)
        else:
            self._check_shapes(X, y)
        self._step(X, y)
        return self

    def _check_shapes(self, X, y):
        check_joint_array(X, "X", width=self.n_features_in_)
        check_joint_array(y, "y", width=self.n_outputs_)

    def fit(self, X, y):
        X, y = check_joint_pair(X, y)
        self._init(X, y)
        count = X.shape[0]
        for _ in range(self.epochs):
            order = self._shuffle_rng.permutation(count)
            for start in range(0, count, self.batch_size):
                idx = order[start:start + self.batch_size]
                self._step(X[idx], y[idx])
        return self

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_joint_array(X, "X", width=self.n_features_in_)
        with no_grad():
            out, _ = self.network_(Tensor(X))
        return out.data

    def score(self, X, y, sample_weight=None) -> float:
        """R^2 of the flattened predictions."""
        pred = self.predict(X)
        y = check_joint_array(y, "y")
        return r2_score(y.reshape(len(y), -1), pred.reshape(len(pred), -1), sample_weight=sample_weight)


class GlpeRegressor(_JointRegressor):
    """Feedforward GLPE network trained with MSE.

    Parameters
    ----------
    hidden : int
        Width of the hidden layers.
    n_layers : int
        Number of GLPE layers.
    pooling : {"mean", "sum", "max"}
        Agent pooling of the global sub-layer.
    global_activation : {"tanh", "identity"}
    local_activation : {"elu", "relu", "identity"}
        Activation of the hidden local sub-layers; the output layer has none.
    pool_bias : bool
        Give the global sub-layer its own bias.
    lr, batch_size, epochs : training settings used by ``fit``.
    random_state : int, Generator or None
    """

    def __init__(self, hidden=64, n_layers=3, pooling="mean", global_activation="tanh",
                 local_activation="elu", pool_bias=False, lr=1e-3, batch_size=32, epochs=300,
                 random_state=None):
        self.hidden = hidden
        self.n_layers = n_layers
        self.pooling = pooling
        self.global_activation = global_activation
        self.local_activation = local_activation
        self.pool_bias = pool_bias
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _build(self, n_agents, d_in, d_out, rng):
        return build_glpe_network(d_in, self.hidden, d_out, self.n_layers, rng, pooling=self.pooling,
                                  global_activation=self.global_activation,
                                  local_activation=self.local_activation, pool_bias=self.pool_bias)


class FlatMlpRegressor(_JointRegressor):
    """MLP on the flattened joint input; tied to the agent count seen in ``fit``."""

    def __init__(self, hidden=64, n_layers=3, activation="elu", lr=1e-3, batch_size=32, epochs=300,
                 random_state=None):
        self.hidden = hidden
        self.n_layers = n_layers
        self.activation = activation
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _build(self, n_agents, d_in, d_out, rng):
        return PlainMlp(n_agents, d_in, [self.hidden] * (self.n_layers - 1), d_out, rng,
                        activation=self.activation)

    def _check_shapes(self, X, y):
        check_joint_array(X, "X", n_agents=self.n_agents_, width=self.n_features_in_)
        check_joint_array(y, "y", n_agents=self.n_agents_, width=self.n_outputs_)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        check_joint_array(X, "X", n_agents=self.n_agents_)
        return super().predict(X)
