"""scikit-learn style wrappers around pretraining and few-shot fine-tuning.

``DivergentMetaLearner`` pretrains a feature extractor on an image array and
exposes the learned body through ``transform``. ``FewShotClassifier`` zero-resets
the head of a pretrained network, fine-tunes it on a labelled support set and
predicts query images.
"""

from __future__ import annotations

from dataclasses import fields, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from dmeta import model
from dmeta import rng as rngs
from dmeta.data.datasets import Dataset
from dmeta.data.sampling import EvalTask
from dmeta.errors import InvalidArgumentError
from dmeta.evaluation import fine_tune
from dmeta.inner import InnerLoopConfig
from dmeta.outer import MetaConfig, run_pretraining


def check_images(X, image_shape=None):
    """Validate an image stack; returns float32 ``[n, C, H, W]``.

    A 3-D input ``[n, H, W]`` is read as single-channel.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise InvalidArgumentError(f"expected images [n, C, H, W], got shape {X.shape}")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise InvalidArgumentError(f"expected images of shape {tuple(image_shape)}, got {tuple(X.shape[1:])}")
    return X


def _spec_for(X, way, channels):
    C, H, W = X.shape[1:]
    if (H, W, C) == (84, 84, 3):
        spec = model.NetworkSpec.mini_imagenet(way)
    else:
        spec = model.NetworkSpec(input_shape=(H, W, C), num_logits=way)
    return replace(spec, channels=channels) if channels else spec


def _chw(spec):
    h, w, c = spec.input_shape
    return (c, h, w)


class DivergentMetaLearner(TransformerMixin, BaseEstimator):
    """Pretrain a few-shot feature extractor on unlabelled (or labelled) images.

    Parameters mirror :class:`dmeta.outer.MetaConfig`; ``inner`` takes an
    :class:`InnerLoopConfig` or None for defaults. ``y`` is only consulted by
    the supervised mode.
    """

    def __init__(self, mode="divergent-qd", meta_iterations=100, tasks_per_meta_step=5, way=5, shots=5,
                 ambiguous_batch_size=90, channels=0, inner=None, seed=0, workers=1):
        self.mode = mode
        self.meta_iterations = meta_iterations
        self.tasks_per_meta_step = tasks_per_meta_step
        self.way = way
        self.shots = shots
        self.ambiguous_batch_size = ambiguous_batch_size
        self.channels = channels
        self.inner = inner
        self.seed = seed
        self.workers = workers

    def _meta_config(self):
        names = {f.name for f in fields(MetaConfig)}
        return MetaConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None):
        X = check_images(X)
        config = self._meta_config()
        if config.mode == "supervised":
            if y is None:
                raise InvalidArgumentError("supervised mode needs labels y")
            labels = np.asarray(y)
        else:
            labels = np.arange(len(X))
        spec = _spec_for(X, self.way, self.channels)
        init = model.init_params(spec, rngs.stream(self.seed, "init"))
        state = run_pretraining(config, Dataset("array", X, labels), self.inner or InnerLoopConfig(), init=init)
        self.params_ = state.params
        self.history_ = state.history
        self.n_features_out_ = spec.feature_dim()
        return self

    def transform(self, X):
        """Flattened body features ``[n, feature_dim]``."""
        check_is_fitted(self, "params_")
        X = check_images(X, _chw(self.params_.spec))
        return model.features(self.params_, X, "eval").data


class FewShotClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tune-and-predict on one few-shot task.

    ``base`` is a pretrained :class:`ParameterSet` or a fitted
    :class:`DivergentMetaLearner`. Classes are sorted labels of the support
    set; their count must equal the network's head width.
    """

    def __init__(self, base=None, steps=50, lr=1e-3, seed=0, transductive=True):
        self.base = base
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.transductive = transductive

    def _base_params(self):
        if isinstance(self.base, model.ParameterSet):
            return self.base
        if isinstance(self.base, DivergentMetaLearner):
            check_is_fitted(self.base, "params_")
            return self.base.params_
        raise InvalidArgumentError("base must be a ParameterSet or a fitted DivergentMetaLearner")

    def fit(self, X, y):
        params = self._base_params()
        X = check_images(X, _chw(params.spec))
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) != params.spec.num_logits:
            raise InvalidArgumentError(
                f"support set has {len(self.classes_)} classes but the head has {params.spec.num_logits} logits")
        empty = np.empty((0,) + X.shape[1:], dtype=np.float32)
        task = EvalTask(X, codes, empty, np.empty(0, dtype=int), np.arange(len(self.classes_)),
                        np.arange(len(X)), np.empty(0, dtype=int))
        self.params_ = fine_tune(params, task, self.steps, self.lr, self.seed, self.transductive)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, _chw(self.params_.spec))
        return model.forward(self.params_, X, "eval", transductive=self.transductive).data

    def predict(self, X):
        return self.classes_[model.argmax_rows(self.decision_function(X))]
