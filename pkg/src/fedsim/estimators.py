"""scikit-learn style wrappers around the simulator.

The estimators take a pooled ``(X, y)``, split it across simulated clients
with the same Dirichlet label skew the synthetic generator uses, and run a
full federated training task. ``predict`` uses the final global model.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from fedsim._rng import substream
from fedsim.core import Dataset, Task, dirichlet_alpha
from fedsim.simulator.engine import RunResult, run_scenario
from fedsim.simulator.scenario import validate_scenario
from fedsim.training_patterns import balance_dataset

__all__ = ["FederatedClassifier", "FederatedRegressor", "DatasetBalancer", "partition_indices"]


def partition_indices(groups: np.ndarray, n_clients: int, skew: float, seed: int) -> list[np.ndarray]:
    """Split sample indices across clients, per group, by Dirichlet shares.

    ``skew=0`` deals each group out evenly. Every client ends with at least
    one sample; empty clients take one from the largest client.
    """
    groups = np.asarray(groups)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if groups.size < n_clients:
        raise ValueError(f"{groups.size} samples cannot cover {n_clients} clients")
    rng = substream(seed, "pool-partition")
    parts: list[list[int]] = [[] for _ in range(n_clients)]
    for g in np.unique(groups):
        members = rng.permutation(np.flatnonzero(groups == g))
        if skew == 0:
            chunks = np.array_split(members, n_clients)
        else:
            shares = rng.dirichlet(np.full(n_clients, dirichlet_alpha(skew)))
            cuts = np.floor(np.cumsum(shares)[:-1] * members.size).astype(int)
            chunks = np.split(members, cuts)
        for i, chunk in enumerate(chunks):
            parts[i].extend(chunk.tolist())
    for i in range(n_clients):
        if not parts[i]:
            donor = max(range(n_clients), key=lambda j: (len(parts[j]), -j))
            parts[i].append(parts[donor].pop())
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


class _FederatedEstimator(BaseEstimator):
    _task: Task

    def __init__(
        self,
        n_clients=10,
        skew=0.0,
        rounds=20,
        aggregator="fedavg",
        learning_rate=0.1,
        local_epochs=1,
        batch_size=32,
        selection="random",
        top_k=None,
        convergence=True,
        random_state=0,
    ):
        self.n_clients = n_clients
        self.skew = skew
        self.rounds = rounds
        self.aggregator = aggregator
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.selection = selection
        self.top_k = top_k
        self.convergence = convergence
        self.random_state = random_state

    def _scenario(self, n_features: int):
        return validate_scenario(
            {
                "version": 1,
                "name": type(self).__name__,
                "seed": int(self.random_state or 0),
                "rounds": self.rounds,
                "task": self._task.value,
                "data": {"n_clients": self.n_clients, "n_features": n_features, "skew": self.skew},
                "training": {
                    "learning_rate": self.learning_rate,
                    "local_epochs": self.local_epochs,
                    "batch_size": self.batch_size,
                },
                "selection": {"mode": self.selection, "top_k": self.top_k},
                "aggregator": {"kind": self.aggregator},
                "convergence": {"enabled": bool(self.convergence)},
            }
        )

    def _run(self, X: np.ndarray, y: np.ndarray, groups: np.ndarray) -> RunResult:
        scenario = self._scenario(X.shape[1])
        parts = partition_indices(groups, self.n_clients, self.skew, scenario.seed)
        strata = None if self._task is Task.BINARY_LOGISTIC else groups
        clients = [Dataset(X[p], y[p], self._task, None if strata is None else strata[p]) for p in parts]
        probe = Dataset(X, y, self._task, strata)
        result = run_scenario(scenario, client_data=clients, probe=probe)
        w = result.global_model.values
        self.coef_ = w[:-1].copy()
        self.intercept_ = float(w[-1])
        self.n_features_in_ = X.shape[1]
        self.summary_ = dict(result.summary)
        self.history_ = [r.to_dict() for r in result.metrics if r.event == "evaluate"]
        return result

    def _decision(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class FederatedClassifier(ClassifierMixin, _FederatedEstimator):
    """Binary logistic regression trained by simulated federated rounds."""

    _task = Task.BINARY_LOGISTIC

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if type_of_target(y) != "binary":
            raise ValueError("FederatedClassifier supports binary targets only")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self._run(X.astype(np.float64), encoded.astype(np.int64), encoded)
        return self

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        p = expit(self._decision(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        positive = self._decision(X) > 0
        return self.classes_[positive.astype(int)]


class FederatedRegressor(RegressorMixin, _FederatedEstimator):
    """Least-squares linear regression trained by simulated federated rounds.

    Label skew acts on the sign of the centred target.
    """

    _task = Task.LINEAR_REGRESSION

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        y = y.astype(np.float64)
        groups = (y > np.median(y)).astype(np.int64)
        self._run(X.astype(np.float64), y, groups)
        return self

    def predict(self, X):
        return self._decision(X)


class DatasetBalancer(BaseEstimator):
    """Resampler that evens binary class counts with jittered oversampling."""

    def __init__(self, tolerance=1.0, random_state=0):
        self.tolerance = tolerance
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        X, y = check_X_y(X, y)
        classes, encoded = np.unique(y, return_inverse=True)
        if classes.size > 2:
            raise ValueError("DatasetBalancer supports at most two classes")
        data = Dataset(X.astype(np.float64), encoded.astype(np.int64), Task.BINARY_LOGISTIC)
        out, report = balance_dataset(data, self.tolerance, int(self.random_state or 0))
        self.report_ = report
        return out.features, classes[out.labels]
