"""scikit-learn style wrappers around online-pruning training."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .layers import Network, NetworkSpec
from .objective import ObjectiveConfig
from .pruner import PruneSchedule
from .trainer import TrainConfig, fit, predict_batches, psnr


class _OnlinePruningBase(BaseEstimator):
    """Shared hyperparameters and plumbing.

    ``architecture`` lists the hidden layers in the compact token syntax of
    :meth:`NetworkSpec.from_string`; the output layer is appended by the
    estimator. Flat 2-d input is reshaped to ``input_shape`` when given.
    """

    def __init__(self, architecture="dense32 bn relu", input_shape=None, target_ratio=0.5,
                 lambda1=1e-4, lambda2=1e-4, lambda3=1e-6, epochs=30, lr=0.1,
                 lr_drops=((0.5, 0.1), (0.75, 0.1)), optimizer="sgd_nesterov", momentum=0.9,
                 weight_decay=1e-4, batch_size=64, survivor_floor=1, seed=0, determinism=True):
        self.architecture = architecture
        self.input_shape = input_shape
        self.target_ratio = target_ratio
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.epochs = epochs
        self.lr = lr
        self.lr_drops = lr_drops
        self.optimizer = optimizer
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.survivor_floor = survivor_floor
        self.seed = seed
        self.determinism = determinism

    def _shape_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.input_shape is not None:
            return X.reshape((len(X),) + tuple(self.input_shape))
        return X

    def _train(self, X, output_token, task, dataset):
        spec = NetworkSpec.from_string(f"{self.architecture} {output_token}", X.shape[1:], task)
        model = Network.build(spec, seed=self.seed)
        self.initial_model_ = model.copy()
        train_cfg = TrainConfig(
            optimizer=self.optimizer, lr=self.lr, lr_drops=self.lr_drops, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs,
            seed=self.seed, determinism=self.determinism, survivor_floor=self.survivor_floor,
        )
        objective = ObjectiveConfig(self.lambda1, self.lambda2, self.lambda3)
        result = fit(model, dataset, objective, PruneSchedule(self.target_ratio, self.epochs), train_cfg)
        self.result_ = result
        self.model_ = result.model
        self.masked_model_ = result.masked_model
        self.history_ = result.logs
        return self


class OnlinePruningClassifier(ClassifierMixin, _OnlinePruningBase):
    """Classifier trained with online filter pruning and returned compacted.

    Parameters
    ----------
    architecture : str
        Hidden layers, e.g. ``"conv16 bn relu pool flatten"``; a
        ``dense<n_classes>`` output layer is appended.
    input_shape : tuple of int, optional
        Per-sample shape used to reshape flat input.
    target_ratio : float
        Final fraction of scaling factors pruned.

    Attributes
    ----------
    classes_ : ndarray
    model_ : Network
        Compacted network.
    masked_model_ : Network
        Full-width network with the final mask applied.
    history_ : list of EpochLog
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.classes_, codes = np.unique(y, return_inverse=True)
        X = self._shape_input(X)
        return self._train(X, f"dense{len(self.classes_)}", "classification",
                           Dataset(X, codes))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = self._shape_input(check_array(X, allow_nd=True, dtype=np.float64))
        return predict_batches(self.model_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class OnlinePruningAutoencoder(TransformerMixin, _OnlinePruningBase):
    """Reconstruction network trained with online pruning (MSE task loss).

    ``architecture`` holds encoder and decoder layers; a dense output layer
    reproducing the flattened input is appended. :meth:`transform` returns
    the activations feeding that output layer, :meth:`predict` the
    reconstruction and :meth:`score` its PSNR in dB.
    """

    def __init__(self, architecture="dense16 bn relu", input_shape=None, target_ratio=0.5,
                 lambda1=1e-4, lambda2=1e-4, lambda3=1e-6, epochs=30, lr=1e-3,
                 lr_drops=(), optimizer="adam", momentum=0.9, weight_decay=0.0,
                 batch_size=128, survivor_floor=1, seed=0, determinism=True):
        super().__init__(architecture, input_shape, target_ratio, lambda1, lambda2, lambda3,
                         epochs, lr, lr_drops, optimizer, momentum, weight_decay, batch_size,
                         survivor_floor, seed, determinism)

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        X = self._shape_input(X)
        self.sample_shape_ = X.shape[1:]
        data = Dataset(X, targets=X.reshape(len(X), -1))
        return self._train(X, f"dense{self.n_features_in_}", "reconstruction", data)

    def _prepare(self, X):
        check_is_fitted(self, "model_")
        return self._shape_input(check_array(X, allow_nd=True, dtype=np.float64))

    def transform(self, X):
        X = self._prepare(X)
        return self.model_.forward(X, "eval", upto=len(self.model_.spec.layers) - 1).data

    def predict(self, X):
        X = self._prepare(X)
        return predict_batches(self.model_, X).reshape(X.shape)

    def score(self, X, y=None):
        X = self._prepare(X)
        return psnr(self.predict(X), X)
