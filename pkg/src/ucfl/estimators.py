"""scikit-learn compatible wrappers around the functional core.

``SGDSoftmaxClassifier``
    one client's model trained with the local SGD routine.
``CollaborationWeights``
    mixing matrix from per-client gradients and variances.
``StreamClusterer``
    k-means over collaboration vectors with silhouette-based ``k``.
``UserCentricFederation``
    a whole federated run; predicts with each client's personalized model.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import model
from .client import LocalTrainConfig, client_update
from .clustering import default_tradeoff, kmeans, select_streams, stream_rows
from .collaboration import CollabMatrix, mixing_matrix
from .config import ExperimentConfig
from .datagen import FederationData, LabeledDataset
from .numerics import RngStream
from .orchestrator import RUNNERS, prepare


class SGDSoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Softmax-linear or one-hidden-layer MLP classifier trained by minibatch SGD.

    Parameters
    ----------
    kind : {"softmax-linear", "mlp-1"}, default="softmax-linear"
    hidden : int, default=16
        Hidden width, used by ``mlp-1`` only.
    activation : {"relu", "tanh"}, default="relu"
    epochs : int, default=20
    batch_size : int, default=10
    lr : float, default=0.1
    momentum : float, default=0.9
    random_state : int, default=0
    """

    def __init__(self, kind="softmax-linear", hidden=16, activation="relu", epochs=20,
                 batch_size=10, lr=0.1, momentum=0.9, random_state=0):
        self.kind = kind
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        n_classes = max(len(self.classes_), 2)
        self.n_features_in_ = X.shape[1]
        self.spec_ = model.ModelSpec(self.kind, X.shape[1], n_classes,
                                     self.hidden if self.kind == "mlp-1" else 0, self.activation)
        data = LabeledDataset(X, codes, n_classes)
        cfg = LocalTrainConfig(self.epochs, self.batch_size, self.lr, self.momentum)
        theta = model.init_params(self.spec_, RngStream(self.random_state, "init"))
        self.coef_ = client_update(self.spec_, theta, data, cfg, RngStream(self.random_state, "fit"))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return model.logits(self.spec_, self.coef_, X)[:, :len(self.classes_)]

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return model.predict_proba(self.spec_, self.coef_, X)[:, :len(self.classes_)]

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class CollaborationWeights(BaseEstimator):
    """Fit the user-centric mixing matrix from client gradients.

    ``fit(G, sigma_sq=..., n_samples=...)`` takes one full gradient per row.
    After fitting, ``weights_`` holds the ``m x m`` matrix and ``delta_`` the
    squared gradient distances.
    """

    def fit(self, X, y=None, sigma_sq=None, n_samples=None):
        G = check_array(X, dtype=np.float64)
        m = G.shape[0]
        sigma_sq = np.zeros(m) if sigma_sq is None else np.asarray(sigma_sq, dtype=np.float64)
        n_samples = np.ones(m) if n_samples is None else np.asarray(n_samples, dtype=np.float64)
        diff = G[:, None, :] - G[None, :, :]
        self.delta_ = np.einsum("ijk,ijk->ij", diff, diff)
        self.matrix_ = mixing_matrix(self.delta_, sigma_sq, n_samples)
        self.weights_ = self.matrix_.w
        return self


class StreamClusterer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Group collaboration vectors into personalized streams.

    Parameters
    ----------
    n_streams : int or "auto", default="auto"
        With "auto" the number of streams maximizes
        ``silhouette - tradeoff_lambda * (k - 1) / (m - 1)``.
    tradeoff_lambda : float, default=0.1
    restarts : int, default=10
    random_state : int, default=0

    Attributes
    ----------
    labels_, cluster_centers_, n_streams_, silhouette_, score_table_
    """

    def __init__(self, n_streams="auto", tradeoff_lambda=0.1, restarts=10, random_state=0):
        self.n_streams = n_streams
        self.tradeoff_lambda = tradeoff_lambda
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        W = check_array(X, dtype=np.float64)
        rng = RngStream(self.random_state, "kmeans")
        if self.n_streams == "auto":
            k, plan, table = select_streams(W, default_tradeoff(self.tradeoff_lambda, len(W)),
                                            self.restarts, rng)
            self.score_table_ = table
        else:
            k = int(self.n_streams)
            plan = kmeans(W, k, self.restarts, rng.child("k", k))
            self.score_table_ = [(k, plan.silhouette, plan.silhouette)]
        self.plan_ = plan
        self.n_streams_ = k
        self.labels_ = plan.assign
        self.cluster_centers_ = plan.centroids
        self.silhouette_ = plan.silhouette
        self.inertia_ = plan.inertia
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def transform(self, X):
        """Each row replaced by the (renormalized) centroid of its nearest stream."""
        return stream_rows(self.plan_)[self.predict(X)]


class UserCentricFederation(BaseEstimator):
    """Run one federated algorithm and keep each client's final model.

    ``fit`` takes a :class:`~ucfl.datagen.FederationData`; ``predict(X,
    client=i)`` uses client ``i``'s personalized model. Every other
    hyperparameter is read from ``config`` (a mapping in the CLI config
    schema), with ``algorithm`` and ``streams`` exposed directly.
    """

    def __init__(self, algorithm="user-centric", streams="all", rounds=30, config=None, random_state=0):
        self.algorithm = algorithm
        self.streams = streams
        self.rounds = rounds
        self.config = config
        self.random_state = random_state

    def _experiment(self):
        raw = dict(self.config or {})
        raw.update(streams=self.streams, rounds=self.rounds, seed=self.random_state)
        return ExperimentConfig.from_dict(raw)

    def fit(self, X, y=None):
        if not isinstance(X, FederationData):
            raise TypeError("fit expects a FederationData instance")
        cfg = self._experiment()
        prep = prepare(cfg, X)
        self.spec_ = prep.spec
        self.log_ = RUNNERS[self.algorithm](cfg, prepared=prep)
        self.models_ = self.log_.final_models
        if "weights" in self.log_.artifacts and self.algorithm in ("user-centric", "parallel"):
            self.weights_ = CollabMatrix(self.log_.artifacts["weights"]).w
        return self

    def predict(self, X, client=0):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        return model.predict(self.spec_, self.models_[client], X)

    def score(self, X, y, client=0):
        return float(np.mean(self.predict(X, client) == np.asarray(y)))
