"""scikit-learn compatible wrappers around the CNN trainers.

Both classifiers take flattened or 2-D images (uint8 pixels or floats in
[0, 1]) and integer class codes ``0 .. n_classes-1``. ``classes_`` always
spans every code, even when a class is missing from the training data,
because federated clients routinely see only some classes.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import fed, nn
from ._validation import check_images, check_labels, check_positive_int
from .dataset import PartitionMap, partition_dirichlet, partition_iid
from .exceptions import ConfigurationError


class _CNNBase(ClassifierMixin, BaseEstimator):
    def _model_config(self) -> nn.CnnConfig:
        h, w = self.image_shape
        cfg = nn.CnnConfig(
            input_h=h,
            input_w=w,
            conv_filters=self.conv_filters,
            conv_kernel=self.conv_kernel,
            conv_stride=self.conv_stride,
            pool_size=self.pool_size,
            num_classes=self.n_classes,
        )
        cfg.validate()
        return cfg

    def _train_config(self, epochs: int) -> nn.TrainConfig:
        cfg = nn.TrainConfig(
            learning_rate=self.learning_rate,
            epochs=epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        cfg.validate()
        return cfg

    def _stack_validation(self, X, y, X_val, y_val):
        """Append the validation set so trainers can address it by index."""
        if X_val is None:
            return X, y, None
        X_val = check_images(X_val, self.image_shape)
        y_val = check_labels(y_val, self.n_classes, len(X_val))
        test_idx = np.arange(len(X), len(X) + len(X_val))
        return np.concatenate([X, X_val]), np.concatenate([y, y_val]), test_idx

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return nn.predict_proba(self.params_, check_images(X, self.image_shape), self.model_config_)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def save_weights(self, path) -> None:
        check_is_fitted(self, "params_")
        nn.save_params(self.params_, path)


class CNNClassifier(_CNNBase):
    """Centralized mini-batch SGD on the pooled data.

    ``history_`` holds one :class:`~fedjam.fed.RoundRecord` per evaluated
    epoch when a validation set is passed to :meth:`fit`.
    """

    def __init__(
        self,
        image_shape=(64, 64),
        conv_filters=16,
        conv_kernel=12,
        conv_stride=1,
        pool_size=2,
        n_classes=6,
        learning_rate=0.01,
        epochs=200,
        batch_size=16,
        eval_every=1,
        random_state=0,
    ):
        self.image_shape = image_shape
        self.conv_filters = conv_filters
        self.conv_kernel = conv_kernel
        self.conv_stride = conv_stride
        self.pool_size = pool_size
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self._model_config()
        X = check_images(X, self.image_shape)
        y = check_labels(y, self.n_classes, len(X))
        if len(X) == 0:
            raise ConfigurationError("no training data")
        train = self._train_config(check_positive_int(self.epochs, "epochs"))
        n_train = len(X)
        X_all, y_all, test_idx = self._stack_validation(X, y, X_val, y_val)
        self.params_, self.history_ = fed.run_centralized(
            X_all, y_all, np.arange(n_train), test_idx, cfg, train, eval_every=self.eval_every
        )
        self.model_config_ = cfg
        self.classes_ = np.arange(self.n_classes)
        return self


class FedAvgClassifier(_CNNBase):
    """Federated averaging over simulated clients.

    The client split comes from ``partition`` passed to :meth:`fit`, or is
    drawn from ``partition_mode`` (``"iid"`` or ``"dirichlet"`` with
    concentration ``beta``) using ``random_state``.
    """

    def __init__(
        self,
        num_clients=10,
        rounds=400,
        local_epochs=1,
        partition_mode="iid",
        beta=0.1,
        image_shape=(64, 64),
        conv_filters=16,
        conv_kernel=12,
        conv_stride=1,
        pool_size=2,
        n_classes=6,
        learning_rate=0.01,
        batch_size=16,
        eval_every=1,
        n_jobs=1,
        random_state=0,
    ):
        self.num_clients = num_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.partition_mode = partition_mode
        self.beta = beta
        self.image_shape = image_shape
        self.conv_filters = conv_filters
        self.conv_kernel = conv_kernel
        self.conv_stride = conv_stride
        self.pool_size = pool_size
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _partition(self, y) -> PartitionMap:
        idx = np.arange(len(y))
        if self.partition_mode == "iid":
            return partition_iid(idx, self.num_clients, self.random_state, labels=y)
        if self.partition_mode == "dirichlet":
            return partition_dirichlet(idx, y, self.num_clients, self.beta, self.random_state)
        raise ConfigurationError(f"unknown partition_mode {self.partition_mode!r}")

    def fit(self, X, y, partition=None, X_val=None, y_val=None):
        cfg = self._model_config()
        X = check_images(X, self.image_shape)
        y = check_labels(y, self.n_classes, len(X))
        partition = self._partition(y) if partition is None else partition
        partition.validate(np.arange(len(X)))
        fed_cfg = fed.FedConfig(
            num_clients=self.num_clients,
            rounds=check_positive_int(self.rounds, "rounds"),
            local_epochs=check_positive_int(self.local_epochs, "local_epochs"),
            train=self._train_config(1),
            eval_every=self.eval_every,
            seed=self.random_state,
        )
        X_all, y_all, test_idx = self._stack_validation(X, y, X_val, y_val)
        self.params_, self.history_ = fed.run_fedavg(
            X_all, y_all, partition, cfg, fed_cfg, test_idx, n_jobs=fed.resolve_jobs(self.n_jobs)
        )
        self.partition_ = partition
        self.model_config_ = cfg
        self.classes_ = np.arange(self.n_classes)
        return self
