"""scikit-learn style wrapper around federated meta-training."""
from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .federation import ExperimentPlan, Task, build_run, split_support_query, train
from .losses import Dataset, build_loss
from .meta import AdaptationConfig, DeltaSchedule, inner_adapt
from .numkit import RngStream


class ADMMFedMetaClassifier(ClassifierMixin, BaseEstimator):
    """Meta-learn a classifier initialization across nodes.

    ``fit(X, y, groups=...)`` treats each distinct group value as one node;
    without ``groups`` the data are shuffled into ``n_nodes`` equal shards.
    ``predict`` uses the meta-model directly; ``adapt`` returns a copy
    fine-tuned on a new node's support data.
    """

    def __init__(self, model="softmax", hidden=(32,), algorithm="admm-fedmeta", rounds=100,
                 alpha=0.01, rho=0.3, lam=0.0, prior=None, weights="data-proportional",
                 n_nodes=10, split_fraction=0.5, delta_scale=10.0, delta_offset=100.0,
                 fedavg_lr=0.01, local_steps=1, beta_outer=0.005, random_state=0):
        self.model = model
        self.hidden = hidden
        self.algorithm = algorithm
        self.rounds = rounds
        self.alpha = alpha
        self.rho = rho
        self.lam = lam
        self.prior = prior
        self.weights = weights
        self.n_nodes = n_nodes
        self.split_fraction = split_fraction
        self.delta_scale = delta_scale
        self.delta_offset = delta_offset
        self.fedavg_lr = fedavg_lr
        self.local_steps = local_steps
        self.beta_outer = beta_outer
        self.random_state = random_state

    def _plan(self) -> ExperimentPlan:
        return ExperimentPlan(algorithm=self.algorithm, rounds=self.rounds, alpha=self.alpha,
                              lam=self.lam, rho=self.rho,
                              delta=DeltaSchedule(self.delta_scale, self.delta_offset),
                              weights=self.weights, prior=self.prior,
                              fedavg_lr=self.fedavg_lr, local_steps=self.local_steps,
                              beta_outer=self.beta_outer, seed=self.random_state)

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.size) or np.any(self.classes_[np.minimum(idx, self.classes_.size - 1)] != y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        labels = self._encode(y)
        rng = RngStream(self.random_state).child("estimator")
        if groups is None:
            shards = np.array_split(rng.permutation(X.shape[0]), self.n_nodes)
        else:
            groups = np.asarray(groups)
            if groups.shape[0] != X.shape[0]:
                raise ValueError("groups must have one entry per sample")
            shards = [np.flatnonzero(groups == g) for g in np.unique(groups)]
        tasks = []
        for i, idx in enumerate(shards):
            s, q = split_support_query(Dataset(X[idx], labels[idx]), self.split_fraction, rng.child("split", i))
            tasks.append(Task(s, q))
        if self.model == "logistic" and self.classes_.size != 2:
            raise ValueError("the logistic model needs exactly two classes")
        self.loss_ = build_loss(self.model, n_features=self.n_features_in_,
                                n_classes=self.classes_.size, hidden=self.hidden)
        plan = self._plan()
        nodes, platform = build_run(plan, tasks, self.loss_)
        result = train(plan, nodes, platform, plan.rounds, record=False)
        self.theta_ = result.theta
        self.n_nodes_ = len(tasks)
        return self

    def _proba(self, theta, X):
        logits = self.loss_.logits(theta, X)
        return softmax(logits, axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X)
        return self._proba(self.theta_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def adapt(self, X_support, y_support, steps: int = 1, alpha=None):
        """Return a fitted copy whose parameters took ``steps`` gradient steps on the support set."""
        check_is_fitted(self, "theta_")
        X_support, y_support = check_X_y(X_support, y_support)
        data = Dataset(X_support, self._encode(y_support))
        cfg = AdaptationConfig(self.alpha if alpha is None else alpha, steps)
        clone = self.__class__(**self.get_params())
        clone.__dict__.update({k: v for k, v in self.__dict__.items() if k.endswith("_")})
        clone.theta_ = inner_adapt(self.theta_, self.loss_, data, cfg)
        return clone
