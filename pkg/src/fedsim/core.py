"""Learning substrate: parameter vectors, synthetic client data, local training.

Two task kinds are supported, linear regression (mean squared error) and
binary logistic regression (mean log-loss). A model of ``n_features`` inputs
is a flat vector of ``n_features + 1`` values with the bias stored last.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from fedsim._rng import substream
from fedsim.errors import ConfigurationError, EvaluationError, NumericError, ShapeError

__all__ = [
    "Task",
    "ParamVector",
    "Dataset",
    "TrainingConfig",
    "EvalReport",
    "SyntheticTask",
    "generate_partitions",
    "dirichlet_alpha",
    "loss_and_grad",
    "per_sample_losses",
    "local_train",
    "evaluate",
    "gradient_check",
]

# keeps alpha finite at skew=0 (that case is special-cased to an even split)
SKEW_EPS = 1e-6


class Task(str, Enum):
    LINEAR_REGRESSION = "linear-regression"
    BINARY_LOGISTIC = "binary-logistic"

    @classmethod
    def parse(cls, value: "Task | str") -> "Task":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(t.value for t in cls)
            raise ConfigurationError(f"unknown task kind {value!r}; expected one of {choices}") from None


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat model parameters plus the version of the model they belong to."""

    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise ShapeError("ParamVector needs at least one value")
        if not np.all(np.isfinite(arr)):
            raise NumericError("ParamVector values must be finite")
        if self.version < 0:
            raise ValueError("version must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    @classmethod
    def zeros(cls, dim: int, version: int = 0) -> "ParamVector":
        return cls(np.zeros(dim), version)

    def with_values(self, values, version: int | None = None) -> "ParamVector":
        return ParamVector(values, self.version if version is None else version)

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    def digest(self) -> bytes:
        """SHA-256 over the little-endian float64 encoding of the values."""
        return hashlib.sha256(self.to_bytes()).digest()

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.version == other.version and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParamVector(dim={self.dim}, version={self.version}, values={self.values!r})"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Local samples of one client.

    ``strata`` gives the group label used for class histograms of regression
    data (the sign of the noiseless response). Classification data uses its
    labels directly.
    """

    features: np.ndarray
    labels: np.ndarray
    task: Task
    strata: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        task = Task.parse(self.task)
        y = np.asarray(self.labels, dtype=np.int64 if task is Task.BINARY_LOGISTIC else np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if task is Task.BINARY_LOGISTIC and y.size and not np.isin(y, (0, 1)).all():
            raise ConfigurationError("binary-logistic labels must be 0 or 1")
        strata = self.strata
        if strata is not None:
            strata = np.asarray(strata, dtype=np.int64).reshape(-1)
            if strata.shape != y.shape:
                raise ShapeError("strata must align with labels")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "strata", strata)

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def groups(self) -> np.ndarray:
        if self.task is Task.BINARY_LOGISTIC:
            return self.labels
        if self.strata is not None:
            return self.strata
        return np.zeros(self.n_samples, dtype=np.int64)

    @property
    def class_histogram(self) -> dict[int, int]:
        values, counts = np.unique(self.groups, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        strata = None if self.strata is None else self.strata[index]
        return Dataset(self.features[index], self.labels[index], self.task, strata)

    @staticmethod
    def concatenate(parts: "list[Dataset]") -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        task = parts[0].task
        strata = None
        if all(p.strata is not None for p in parts):
            strata = np.concatenate([p.strata for p in parts])
        return Dataset(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            task,
            strata,
        )


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    proximal_lambda: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.proximal_lambda < 0:
            raise ConfigurationError("proximal_lambda must be non-negative")

    def steps_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / min(self.batch_size, n_samples))


@dataclass(frozen=True)
class EvalReport:
    loss: float
    accuracy: float | None
    n_samples: int


def dirichlet_alpha(skew: float) -> float:
    return 1.0 / (skew + SKEW_EPS)


def _even_counts(n: int, n_classes: int) -> np.ndarray:
    counts = np.full(n_classes, n // n_classes, dtype=np.int64)
    counts[: n % n_classes] += 1
    return counts


@dataclass(frozen=True)
class SyntheticTask:
    """Generator for one synthetic learning problem.

    ``true_weights`` are the generating parameters (bias last). For logistic
    data the classes are Gaussians centred at ``±separation·u`` with unit
    covariance, so the Bayes-optimal log-odds are ``2·separation·u·x`` and the
    generating weights are exactly that linear model.

    Clients whose concept mode is odd see the mirrored concept: flipped labels
    for classification and a negated slope for regression.
    """

    task: Task
    n_features: int
    true_weights: np.ndarray = field(repr=False)
    noise: float = 0.1
    separation: float = 1.0

    @classmethod
    def from_seed(
        cls,
        task: Task | str,
        n_features: int,
        seed: int,
        *,
        noise: float = 0.1,
        separation: float = 1.0,
    ) -> "SyntheticTask":
        task = Task.parse(task)
        if n_features < 1:
            raise ConfigurationError("n_features must be >= 1")
        rng = substream(seed, "truth")
        direction = rng.normal(size=n_features)
        direction /= np.linalg.norm(direction)
        if task is Task.BINARY_LOGISTIC:
            weights = np.append(2.0 * separation * direction, 0.0)
        else:
            weights = np.append(direction * 2.0, rng.normal() * 0.5)
        return cls(task, n_features, weights, float(noise), float(separation))

    @property
    def n_classes(self) -> int:
        return 2

    def mode_weights(self, mode: int) -> np.ndarray:
        w = self.true_weights.copy()
        if mode % 2 == 1 and self.task is Task.LINEAR_REGRESSION:
            w[:-1] = -w[:-1]
        return w

    def sample(self, class_counts, rng: np.random.Generator, mode: int = 0) -> Dataset:
        class_counts = np.asarray(class_counts, dtype=np.int64)
        d = self.n_features
        direction = self.true_weights[:-1]
        direction = direction / np.linalg.norm(direction)
        blocks, labels, strata = [], [], []
        for cls_idx, count in enumerate(class_counts):
            if count == 0:
                continue
            X = rng.normal(size=(count, d))
            if self.task is Task.BINARY_LOGISTIC:
                X += (2 * cls_idx - 1) * self.separation * direction
                y = np.full(count, cls_idx if mode % 2 == 0 else 1 - cls_idx)
            else:
                w = self.mode_weights(mode)
                proj = X @ w[:-1]
                # mirror samples into the requested half-space of the response
                wrong = (proj >= 0) != bool(cls_idx)
                X[wrong] = -X[wrong]
                y = X @ w[:-1] + w[-1]
                if self.noise > 0:
                    y = y + self.noise * rng.normal(size=count)
            blocks.append(X)
            labels.append(y)
            strata.append(np.full(count, cls_idx))
        if not blocks:
            empty = np.empty((0, d))
            return Dataset(empty, np.empty(0), self.task, np.empty(0, dtype=np.int64))
        X = np.vstack(blocks)
        y = np.concatenate(labels)
        s = np.concatenate(strata)
        order = rng.permutation(X.shape[0])
        return Dataset(X[order], y[order], self.task, s[order])

    def sample_iid(self, n: int, rng: np.random.Generator, mode: int = 0) -> Dataset:
        return self.sample(_even_counts(n, self.n_classes), rng, mode)

    def client_class_counts(
        self, n_clients: int, samples_per_client: int, skew: float, rng: np.random.Generator
    ) -> list[np.ndarray]:
        if skew < 0:
            raise ConfigurationError("skew must be >= 0")
        if skew == 0:
            return [_even_counts(samples_per_client, self.n_classes) for _ in range(n_clients)]
        alpha = dirichlet_alpha(skew)
        counts = []
        for _ in range(n_clients):
            props = rng.dirichlet(np.full(self.n_classes, alpha))
            counts.append(rng.multinomial(samples_per_client, props))
        return counts

    def partitions(
        self,
        n_clients: int,
        samples_per_client: int,
        skew: float,
        seed: int,
        *,
        concept_modes: int = 1,
        class_proportions=None,
    ) -> list[Dataset]:
        if n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if samples_per_client < 1:
            raise ConfigurationError("samples_per_client must be >= 1")
        if class_proportions is not None:
            if len(class_proportions) != n_clients:
                raise ConfigurationError("class_proportions needs one row per client")
            counts = []
            for row in class_proportions:
                row = np.asarray(row, dtype=np.float64)
                if row.shape != (self.n_classes,) or (row < 0).any() or row.sum() <= 0:
                    raise ConfigurationError("class_proportions rows must be non-negative per-class weights")
                raw = row / row.sum() * samples_per_client
                c = np.floor(raw).astype(np.int64)
                c[np.argmax(raw - c)] += samples_per_client - c.sum()
                counts.append(c)
        else:
            counts = self.client_class_counts(n_clients, samples_per_client, skew, substream(seed, "partition"))
        out = []
        for i, c in enumerate(counts):
            out.append(self.sample(c, substream(seed, "partition-data", i), mode=i % max(concept_modes, 1)))
        return out


def generate_partitions(
    n_clients: int,
    skew: float,
    task: Task | str,
    seed: int,
    *,
    samples_per_client: int = 100,
    n_features: int = 5,
    noise: float = 0.1,
    separation: float = 1.0,
    concept_modes: int = 1,
) -> list[Dataset]:
    """Synthetic non-IID client datasets.

    Each client's class proportions are drawn from a symmetric Dirichlet with
    concentration ``1/(skew + 1e-6)``; ``skew=0`` gives every client an exact
    even split. Total sample count is ``n_clients * samples_per_client``.
    """
    spec = SyntheticTask.from_seed(task, n_features, seed, noise=noise, separation=separation)
    return spec.partitions(n_clients, samples_per_client, skew, seed, concept_modes=concept_modes)


def _check_dims(model: ParamVector, data: Dataset) -> None:
    if model.dim != data.n_features + 1:
        raise ShapeError(f"model dim {model.dim} does not match {data.n_features} features + bias")


def _linear(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ w[:-1] + w[-1]


def per_sample_losses(w: np.ndarray, data: Dataset) -> np.ndarray:
    z = _linear(w, data.features)
    if data.task is Task.LINEAR_REGRESSION:
        return (z - data.labels) ** 2
    return np.logaddexp(0.0, z) - data.labels * z


def loss_and_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray, task: Task) -> tuple[float, np.ndarray]:
    """Mean task loss and its gradient with respect to ``[weights, bias]``."""
    n = X.shape[0]
    z = X @ w[:-1] + w[-1]
    if task is Task.LINEAR_REGRESSION:
        r = z - y
        loss = float(np.mean(r * r))
        g = 2.0 * r / n
    else:
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        g = (expit(z) - y) / n
    return loss, np.append(X.T @ g, g.sum())


def local_train(
    model: ParamVector,
    data: Dataset,
    cfg: TrainingConfig,
    anchor: ParamVector | None = None,
    *,
    seed: int | None = None,
) -> ParamVector:
    """Mini-batch SGD on the local data, optionally coupled to ``anchor``.

    With an anchor and ``cfg.proximal_lambda > 0`` the objective is
    ``L(w) + λ/2·‖w − anchor‖²``. The coupling term is applied as an exact
    proximal step, ``w ← (w − ηg + ηλ·anchor) / (1 + ηλ)``, which stays stable
    for arbitrarily large λ.

    Batches are taken in dataset order unless ``seed`` is given, in which
    case each epoch uses a seeded permutation. The effective batch size is
    ``min(batch_size, n_samples)``.
    """
    _check_dims(model, data)
    if data.n_samples == 0:
        raise EvaluationError("cannot train on an empty dataset")
    if anchor is not None and anchor.dim != model.dim:
        raise ShapeError(f"anchor dim {anchor.dim} != model dim {model.dim}")
    lam = cfg.proximal_lambda if anchor is not None else 0.0
    eta = cfg.learning_rate
    X, y = data.features, data.labels
    n = data.n_samples
    batch = min(cfg.batch_size, n)
    w = model.values.copy()
    a = anchor.values if anchor is not None else None
    for epoch in range(cfg.local_epochs):
        order = np.arange(n) if seed is None else substream(seed, "batches", epoch).permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            with np.errstate(over="ignore", invalid="ignore"):
                _, g = loss_and_grad(w, X[idx], y[idx], data.task)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in epoch {epoch}")
            if lam > 0:
                w = (w - eta * g + eta * lam * a) / (1.0 + eta * lam)
            else:
                w = w - eta * g
        if not np.all(np.isfinite(w)):
            raise NumericError(f"parameters diverged in epoch {epoch}")
    return ParamVector(w, model.version)


def evaluate(model: ParamVector, data: Dataset) -> EvalReport:
    if data.n_samples == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    _check_dims(model, data)
    w = model.values
    loss = float(np.mean(per_sample_losses(w, data)))
    accuracy = None
    if data.task is Task.BINARY_LOGISTIC:
        pred = (_linear(w, data.features) >= 0).astype(np.int64)
        accuracy = float(np.mean(pred == data.labels))
    return EvalReport(loss=max(loss, 0.0), accuracy=accuracy, n_samples=data.n_samples)


def gradient_check(model: ParamVector, data: Dataset, step: float = 1e-6) -> float:
    """Max absolute gap between the analytic gradient and central differences."""
    _check_dims(model, data)
    w = model.values.astype(np.float64)
    _, analytic = loss_and_grad(w, data.features, data.labels, data.task)
    worst = 0.0
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        lp, _ = loss_and_grad(w + e, data.features, data.labels, data.task)
        lm, _ = loss_and_grad(w - e, data.features, data.labels, data.task)
        worst = max(worst, abs(analytic[i] - (lp - lm) / (2 * step)))
    return float(worst)
