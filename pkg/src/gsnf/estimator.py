"""scikit-learn style wrappers around the training loop."""

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, IrregularSeries, collate, compute_stats, normalize_impute, split
from .exceptions import DatasetError
from .training import TrainConfig, evaluate, fit, predict_proba, parameter_hash


def check_series(X, y=None):
    """Coerce ``X`` to a validated :class:`Dataset`.

    ``X`` may be a Dataset, a sequence of IrregularSeries, or a sequence of
    dicts with ``times``/``values``/``mask`` (and optionally ``label``).
    ``y`` overrides the labels when given.
    """
    if isinstance(X, Dataset):
        samples = list(X.samples)
    else:
        samples = []
        for i, item in enumerate(X):
            if isinstance(item, IrregularSeries):
                samples.append(item)
            elif isinstance(item, dict):
                samples.append(IrregularSeries(item["times"], item["values"], item["mask"],
                                               item.get("label", 0)))
            else:
                raise TypeError(f"sample {i}: expected IrregularSeries or dict, got {type(item).__name__}")
    if not samples:
        raise ValueError("need at least one series")
    n_vars = samples[0].n_vars
    for i, s in enumerate(samples):
        s.validate(line=None)
        if s.n_vars != n_vars:
            raise DatasetError(f"sample {i} has {s.n_vars} variables, expected {n_vars}")
    if y is not None:
        y = np.asarray(y)
        if len(y) != len(samples):
            raise ValueError(f"X has {len(samples)} series but y has {len(y)} labels")
        if y.dtype.kind not in "iu":
            raise ValueError("labels passed here must be integer class indices")
        samples = [IrregularSeries(s.times, s.values, s.mask, int(label)) for s, label in zip(samples, y)]
    mean = X.mean if isinstance(X, Dataset) else None
    std = X.std if isinstance(X, Dataset) else None
    return Dataset(samples, mean, std)


class SeriesNormalizer(TransformerMixin, BaseEstimator):
    """Standardise observed entries per variable and zero the unobserved ones."""

    def __init__(self, min_std=1e-8):
        self.min_std = min_std

    def fit(self, X, y=None):
        ds = check_series(X)
        self.mean_, self.std_ = compute_stats(ds, min_std=self.min_std)
        self.n_features_in_ = ds.n_vars
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        ds = check_series(X)
        if ds.n_vars != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} variables, got {ds.n_vars}")
        return normalize_impute(ds, (self.mean_, self.std_))


_CONFIG_FIELDS = [f.name for f in fields(TrainConfig)]


class GSNFClassifier(ClassifierMixin, BaseEstimator):
    """Graph-structured neural-flow classifier for irregularly sampled series.

    Hyperparameters mirror :class:`gsnf.training.TrainConfig`. When no
    ``eval_set`` is passed to :meth:`fit`, ``validation_fraction`` of the
    training data is held out (stratified) for best-epoch selection.
    """

    def __init__(self, lr=1e-3, weight_decay=1e-4, batch_size=50, scheduler_step=20,
                 scheduler_decay=0.5, epochs=100, seed=0, alpha=1000.0, beta=0.1, gamma=0.1,
                 n_segments=4, margin_mode="fixed", fixed_delta=1e-6, layers=2, hidden=128,
                 spectral_target=0.45, reinit_index=None, use_graph=True, use_itg=True,
                 use_rtg=True, probe_pairs=200, probe_limit=1.0, eval_batch_size=200,
                 validation_fraction=0.1):
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.scheduler_step = scheduler_step
        self.scheduler_decay = scheduler_decay
        self.epochs = epochs
        self.seed = seed
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.n_segments = n_segments
        self.margin_mode = margin_mode
        self.fixed_delta = fixed_delta
        self.layers = layers
        self.hidden = hidden
        self.spectral_target = spectral_target
        self.reinit_index = reinit_index
        self.use_graph = use_graph
        self.use_itg = use_itg
        self.use_rtg = use_rtg
        self.probe_pairs = probe_pairs
        self.probe_limit = probe_limit
        self.eval_batch_size = eval_batch_size
        self.validation_fraction = validation_fraction

    def _config(self):
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_FIELDS})

    def fit(self, X, y=None, eval_set=None):
        config = self._config()
        ds = check_series(X)
        labels = ds.labels if y is None else np.asarray(y)
        if len(labels) != len(ds):
            raise ValueError(f"X has {len(ds)} series but y has {len(labels)} labels")
        self.classes_, encoded = np.unique(labels, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        ds = check_series(ds, encoded)
        if eval_set is None:
            vf = float(self.validation_fraction)
            if vf > 0:
                train, val, _ = split(ds, (1.0 - vf, vf, 0.0), seed=self.seed)
            else:
                train, val = ds, Dataset([])
        else:
            train = ds
            Xv, yv = eval_set if isinstance(eval_set, tuple) else (eval_set, None)
            val = self._encoded(Xv, yv)
        self.normalizer_ = SeriesNormalizer().fit(train)
        train = self.normalizer_.transform(train)
        val = self.normalizer_.transform(val) if len(val) else val
        result = fit(train, val, config)
        self.model_ = result.state.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.delta_trace_ = list(result.state.delta_trace)
        self.n_features_in_ = train.n_vars
        return self

    def _encoded(self, X, y):
        ds = check_series(X)
        labels = ds.labels if y is None else np.asarray(y)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        unknown = set(labels.tolist()) - set(lookup)
        if unknown:
            raise ValueError(f"labels not seen during fit: {sorted(unknown)}")
        return check_series(ds, np.array([lookup[v] for v in labels.tolist()], dtype=int))

    def _prepared(self, X):
        check_is_fitted(self, "model_")
        return self.normalizer_.transform(X)

    def predict_proba(self, X):
        return predict_proba(self.model_, self._prepared(X), self.eval_batch_size)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        """Posterior-mean initial latent states, one row per series."""
        ds = self._prepared(X)
        out = [self.model_.initial_state(collate(ds.samples[i:i + self.eval_batch_size], self.n_segments))
               for i in range(0, len(ds), self.eval_batch_size)]
        return np.concatenate(out)

    def score_auc(self, X, y=None):
        """AUROC and AUPRC of the positive-class probability on ``X``."""
        check_is_fitted(self, "model_")
        ds = self._encoded(X, y)
        return evaluate(self.model_, self._prepared(ds), self.eval_batch_size)

    def parameter_hash(self):
        check_is_fitted(self, "model_")
        return parameter_hash(self.model_)
