"""Task-loss families: mean per-sample loss, analytic gradient and exact HVP.

Parameter layouts (all flat float64 vectors):

* quadratic / cubic: ``theta`` lives in feature space, ``n == d``.
* logistic: ``[w_1..w_d, b]``.
* softmax: row-major ``W`` (``C x d``) followed by ``b`` (``C``).
* mlp: for each layer, row-major ``W`` (``out x in``) then ``b`` (``out``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .numkit import as_param, check_finite


class UnsupportedFamilyError(TypeError):
    """The requested operation is not defined for this loss family."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("Dataset needs at least one sample with a 2-D feature matrix")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} samples")
        check_finite(X, "features")
        X.setflags(write=False)
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(np.vstack([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]))

    def __len__(self) -> int:
        return self.size


class TaskLoss:
    """Base class; concrete families implement ``_value``/``_gradient``."""

    family: str = "abstract"
    is_classifier: bool = False

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def _check(self, theta, D: Dataset) -> np.ndarray:
        theta = as_param(theta, "theta")
        if theta.shape[0] != self.dim:
            raise ValueError(f"theta has dim {theta.shape[0]}, {self.family} loss expects {self.dim}")
        if not isinstance(D, Dataset):
            raise TypeError("D must be a Dataset")
        if D.size == 0:
            raise ValueError("empty dataset")
        return theta

    def value(self, theta, D: Dataset) -> float:
        theta = self._check(theta, D)
        with np.errstate(over="ignore", invalid="ignore"):
            out = float(self._value(theta, D))
        if not np.isfinite(out):
            raise FloatingPointError(f"{self.family} loss value is not finite")
        return out

    def gradient(self, theta, D: Dataset) -> np.ndarray:
        theta = self._check(theta, D)
        with np.errstate(over="ignore", invalid="ignore"):
            g = self._gradient(theta, D)
        return check_finite(g, f"{self.family} gradient")

    def hvp(self, theta, v, D: Dataset) -> np.ndarray:
        theta = self._check(theta, D)
        v = as_param(v, "v")
        if v.shape[0] != self.dim:
            raise ValueError("direction has the wrong dimension")
        with np.errstate(over="ignore", invalid="ignore"):
            hv = self._hvp(theta, v, D)
        return check_finite(hv, f"{self.family} HVP")

    def _hvp(self, theta, v, D):
        raise UnsupportedFamilyError(f"exact Hessian-vector products are not available for {self.family}")

    def logits(self, theta, X) -> np.ndarray:
        raise UnsupportedFamilyError(f"{self.family} is not a classification family")

    @property
    def has_exact_hvp(self) -> bool:
        return type(self)._hvp is not TaskLoss._hvp


class QuadraticLoss(TaskLoss):
    """Per-sample ``0.5 (theta - c - x)^T A (theta - c - x)``.

    Features act as offsets from the centre, so a dataset of zero rows gives
    ``0.5 (theta - c)^T A (theta - c)`` exactly. ``curvature`` is either a
    vector (diagonal ``A``) or a symmetric matrix.
    """

    family = "quadratic"

    def __init__(self, center, curvature=None):
        self.center = as_param(center, "center")
        n = self.center.shape[0]
        if curvature is None:
            curvature = np.ones(n)
        A = np.asarray(curvature, dtype=np.float64)
        if A.ndim == 0:
            A = np.full(n, float(A))
        if A.ndim == 1 and A.shape != (n,) or A.ndim == 2 and A.shape != (n, n) or A.ndim > 2:
            raise ValueError("curvature shape does not match the centre")
        if A.ndim == 2 and not np.allclose(A, A.T):
            raise ValueError("curvature matrix must be symmetric")
        self.curvature = A

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.curvature.ndim == 1

    def apply_curvature(self, v: np.ndarray) -> np.ndarray:
        if self.diagonal:
            return self.curvature * v
        return v @ self.curvature.T

    def hessian_matrix(self) -> np.ndarray:
        return np.diag(self.curvature) if self.diagonal else self.curvature.copy()

    def _residual(self, theta, D):
        if D.width != self.dim:
            raise ValueError(f"quadratic data width {D.width} != parameter dim {self.dim}")
        return theta[None, :] - self.center[None, :] - D.features

    def _value(self, theta, D):
        R = self._residual(theta, D)
        return 0.5 * np.mean(np.sum(R * self.apply_curvature(R), axis=1))

    def _gradient(self, theta, D):
        return self.apply_curvature(np.mean(self._residual(theta, D), axis=0))

    def _hvp(self, theta, v, D):
        return self.apply_curvature(v)


class CubicLoss(QuadraticLoss):
    """Quadratic plus ``(kappa / 6) * sum(theta_j ** 3)``.

    Test-only family whose Hessian ``A + kappa diag(theta)`` is Lipschitz with
    constant exactly ``kappa``.
    """

    family = "cubic"

    def __init__(self, center, curvature=None, kappa: float = 1.0):
        super().__init__(center, curvature)
        if kappa < 0:
            raise ValueError("kappa must be non-negative")
        self.kappa = float(kappa)

    def _value(self, theta, D):
        return super()._value(theta, D) + self.kappa / 6.0 * np.sum(theta ** 3)

    def _gradient(self, theta, D):
        return super()._gradient(theta, D) + 0.5 * self.kappa * theta ** 2

    def _hvp(self, theta, v, D):
        return self.apply_curvature(v) + self.kappa * theta * v


class LogisticLoss(TaskLoss):
    """Binary cross-entropy on ``sigmoid(x.w + b)`` with labels in {0, 1}."""

    family = "logistic"
    is_classifier = True
    n_classes = 2

    def __init__(self, n_features: int):
        self.n_features = int(n_features)

    @property
    def dim(self) -> int:
        return self.n_features + 1

    def _z(self, theta, X):
        return X @ theta[:-1] + theta[-1]

    def _value(self, theta, D):
        z = self._z(theta, D.features)
        y = D.labels.astype(np.float64)
        # -log sigmoid(z) for y=1, -log sigmoid(-z) for y=0
        return -np.mean(y * log_expit(z) + (1.0 - y) * log_expit(-z))

    def _gradient(self, theta, D):
        X = D.features
        err = expit(self._z(theta, X)) - D.labels
        return np.concatenate([X.T @ err, [err.sum()]]) / D.size

    def _hvp(self, theta, v, D):
        X = D.features
        p = expit(self._z(theta, X))
        s = p * (1.0 - p) * (X @ v[:-1] + v[-1])
        return np.concatenate([X.T @ s, [s.sum()]]) / D.size

    def logits(self, theta, X):
        z = self._z(theta, np.asarray(X, dtype=np.float64))
        return np.column_stack([np.zeros_like(z), z])


class SoftmaxLoss(TaskLoss):
    family = "softmax"
    is_classifier = True

    def __init__(self, n_features: int, n_classes: int):
        if n_classes < 2:
            raise ValueError("softmax needs at least two classes")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def _unpack(self, theta):
        C, d = self.n_classes, self.n_features
        return theta[: C * d].reshape(C, d), theta[C * d:]

    def logits(self, theta, X):
        W, b = self._unpack(np.asarray(theta, dtype=np.float64))
        return np.asarray(X, dtype=np.float64) @ W.T + b

    def _value(self, theta, D):
        Z = self.logits(theta, D.features)
        y = D.labels.astype(np.int64)
        return np.mean(logsumexp(Z, axis=1) - Z[np.arange(D.size), y])

    def _gradient(self, theta, D):
        X = D.features
        G = softmax(self.logits(theta, X), axis=1)
        G[np.arange(D.size), D.labels.astype(np.int64)] -= 1.0
        G /= D.size
        return np.concatenate([(G.T @ X).ravel(), G.sum(axis=0)])

    def _hvp(self, theta, v, D):
        X = D.features
        P = softmax(self.logits(theta, X), axis=1)
        VW, vb = self._unpack(v)
        dZ = X @ VW.T + vb
        dG = P * dZ - P * np.sum(P * dZ, axis=1, keepdims=True)
        dG /= D.size
        return np.concatenate([(dG.T @ X).ravel(), dG.sum(axis=0)])


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


class MLPLoss(TaskLoss):
    """ELU multilayer perceptron with a softmax cross-entropy head."""

    family = "mlp"
    is_classifier = True
    MAX_HIDDEN_LAYERS = 2
    MAX_UNITS = 64

    def __init__(self, n_features: int, hidden: Sequence[int], n_classes: int):
        hidden = [int(h) for h in hidden]
        if not 1 <= len(hidden) <= self.MAX_HIDDEN_LAYERS:
            raise ValueError("mlp supports one or two hidden layers")
        if any(h < 1 or h > self.MAX_UNITS for h in hidden):
            raise ValueError(f"hidden widths must lie in [1, {self.MAX_UNITS}]")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = tuple(hidden)
        self.sizes = (self.n_features, *self.hidden, self.n_classes)

    @property
    def dim(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def _unpack(self, theta):
        layers, k = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[k: k + fan_in * fan_out].reshape(fan_out, fan_in)
            k += fan_in * fan_out
            b = theta[k: k + fan_out]
            k += fan_out
            layers.append((W, b))
        return layers

    def _forward(self, theta, X):
        acts, pre = [X], []
        layers = self._unpack(theta)
        for W, b in layers[:-1]:
            z = acts[-1] @ W.T + b
            pre.append(z)
            acts.append(_elu(z))
        W, b = layers[-1]
        return acts[-1] @ W.T + b, acts, pre, layers

    def logits(self, theta, X):
        return self._forward(np.asarray(theta, dtype=np.float64), np.asarray(X, dtype=np.float64))[0]

    def _value(self, theta, D):
        Z = self.logits(theta, D.features)
        y = D.labels.astype(np.int64)
        return np.mean(logsumexp(Z, axis=1) - Z[np.arange(D.size), y])

    def _gradient(self, theta, D):
        Z, acts, pre, layers = self._forward(theta, D.features)
        delta = softmax(Z, axis=1)
        delta[np.arange(D.size), D.labels.astype(np.int64)] -= 1.0
        delta /= D.size
        grads = []
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            grads.append((delta.T @ acts[li], delta.sum(axis=0)))
            if li > 0:
                delta = (delta @ W) * _elu_grad(pre[li - 1])
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def loss_value(loss: TaskLoss, theta, D: Dataset) -> float:
    return loss.value(theta, D)


def loss_gradient(loss: TaskLoss, theta, D: Dataset) -> np.ndarray:
    return loss.gradient(theta, D)


def hessian_vector_exact(loss: TaskLoss, theta, v, D: Dataset) -> np.ndarray:
    return loss.hvp(theta, v, D)


def predict_labels(loss: TaskLoss, theta, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return np.argmax(loss.logits(theta, X), axis=1)


def predict_accuracy(loss: TaskLoss, theta, D: Dataset) -> float:
    if not loss.is_classifier:
        raise UnsupportedFamilyError(f"accuracy is undefined for the {loss.family} family")
    theta = loss._check(theta, D)
    return float(np.mean(predict_labels(loss, theta, D.features) == D.labels))


def build_loss(family: str, *, n_features: int = 0, n_classes: int = 2,
               hidden: Sequence[int] = (), center=None, curvature=None,
               kappa: float = 0.0) -> TaskLoss:
    """Construct a loss family by name (the names used in run configs)."""
    if family == "quadratic":
        return QuadraticLoss(center, curvature)
    if family == "cubic":
        return CubicLoss(center, curvature, kappa)
    if family == "logistic":
        return LogisticLoss(n_features)
    if family == "softmax":
        return SoftmaxLoss(n_features, n_classes)
    if family == "mlp":
        return MLPLoss(n_features, hidden, n_classes)
    raise ValueError(f"unknown loss family {family!r}")
