"""Estimator-style wrappers: a transformer that voxelizes complexes and a
classifier that trains the convolutional scorer.

Samples are (receptor, ligand) or (receptor, ligand, center) tuples of
Molecule objects; the classifier also accepts pre-voxelized grid batches
(with augmentation disabled, since grids cannot be re-posed). Both classes
follow the usual conventions: constructor arguments are stored verbatim,
fitted state lives in trailing-underscore attributes, and get_params/
set_params come from the scikit-learn base class.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import tensornet, training, validation
from .gridgen import GridConfig, sample_transform, voxelize


def _grid_config(est) -> GridConfig:
    return GridConfig(
        dimension=est.dimension,
        resolution=est.resolution,
        radius_multiplier=est.radius_multiplier,
        occupancy=est.occupancy,
        scheme=validation.as_scheme(est.scheme),
    )


class DensityGridder(BaseEstimator, TransformerMixin):
    """Transformer from complexes to multi-channel density grids.

    With random_rotate or max_translate set, every transform() call draws a
    fresh pose perturbation per sample from random_state; otherwise output
    is deterministic.
    """

    def __init__(self, dimension=24.0, resolution=0.5, radius_multiplier=1.5,
                 occupancy="gaussian", scheme="smina34", random_rotate=False,
                 max_translate=0.0, random_state=None):
        self.dimension = dimension
        self.resolution = resolution
        self.radius_multiplier = radius_multiplier
        self.occupancy = occupancy
        self.scheme = scheme
        self.random_rotate = random_rotate
        self.max_translate = max_translate
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.grid_config_ = _grid_config(self)
        self.n_channels_ = self.grid_config_.channel_count
        self._rng = validation.as_rng(self.random_state)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "grid_config_"):
            raise RuntimeError("this DensityGridder instance is not fitted yet")
        config = self.grid_config_
        items = validation.check_complexes(X, config.scheme)
        augment = self.random_rotate or self.max_translate > 0
        grids = np.empty(
            (len(items), config.channel_count) + (config.points_per_side,) * 3
        )
        for i, (receptor, ligand, center) in enumerate(items):
            transform = None
            if augment:
                transform = sample_transform(self._rng, self.max_translate,
                                             self.random_rotate)
            grids[i] = voxelize(receptor, ligand, center, config, transform).values
        return grids


class ConvNetPoseClassifier(BaseEstimator, ClassifierMixin):
    """Binary pose/active classifier over voxelized complexes.

    fit() trains the three-stage convolutional architecture from fresh
    weights with balanced, augmented batches; predict_proba() scores
    deterministically (no augmentation, no dropout).
    """

    def __init__(self, base_width=32, dimension=24.0, resolution=0.5,
                 radius_multiplier=1.5, occupancy="gaussian", scheme="smina34",
                 batch_size=10, base_lr=0.01, momentum=0.9, power=1.0,
                 gamma=0.001, weight_decay=0.001, dropout_ratio=0.5,
                 iterations=10000, rotate=True, max_translate=2.0,
                 dtype="float32", trace_every=250, target_train_auc=None,
                 random_state=0):
        self.base_width = base_width
        self.dimension = dimension
        self.resolution = resolution
        self.radius_multiplier = radius_multiplier
        self.occupancy = occupancy
        self.scheme = scheme
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.momentum = momentum
        self.power = power
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.dropout_ratio = dropout_ratio
        self.iterations = iterations
        self.rotate = rotate
        self.max_translate = max_translate
        self.dtype = dtype
        self.trace_every = trace_every
        self.target_train_auc = target_train_auc
        self.random_state = random_state

    def _solver(self) -> training.SolverConfig:
        seed = self.random_state if isinstance(self.random_state, (int, np.integer)) else 0
        return training.SolverConfig(
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            momentum=self.momentum,
            power=self.power,
            gamma=self.gamma,
            weight_decay=self.weight_decay,
            dropout_ratio=self.dropout_ratio,
            iterations=self.iterations,
            seed=int(seed),
            max_translate=self.max_translate,
            rotate=self.rotate,
        )

    def _source(self, X, y=None):
        """Build a grid source (and a synthetic one-pose-per-record index)
        from either complexes or a pre-voxelized batch."""
        config = _grid_config(self)
        labels = None
        if isinstance(X, np.ndarray):
            X = validation.check_grid_batch(X, config)
            if y is not None:
                labels = validation.check_binary_labels(y, X.shape[0])
            index = _positional_index(X.shape[0], labels)
            return training.ArrayGridSource(index, X), config, True
        items = validation.check_complexes(X, config.scheme)
        if y is not None:
            labels = validation.check_binary_labels(y, len(items))
        index = _positional_index(len(items), labels)
        loader = lambda record: items[int(record.ligand_ref)]
        return training.ComplexGridSource(index, config, loader), config, False

    def fit(self, X, y):
        solver = self._solver()
        source, config, pregridded = self._source(X, y)
        if pregridded and (solver.rotate or solver.max_translate > 0):
            raise ValueError(
                "pre-voxelized input cannot be augmented; "
                "set rotate=False and max_translate=0"
            )
        self.spec_ = tensornet.build_final_model(
            config.channel_count, config.points_per_side,
            base_width=self.base_width, dropout_ratio=self.dropout_ratio,
        )
        result = training.train(
            self.spec_, solver, source,
            dtype=np.dtype(self.dtype).type,
            trace_every=self.trace_every,
            target_train_auc=self.target_train_auc,
        )
        self.weights_ = result.weights
        self.trace_ = result.trace
        self.n_iterations_ = result.iterations_run
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise RuntimeError("this ConvNetPoseClassifier instance is not fitted yet")
        source, _, _ = self._source(X)
        scores = training.score_positions(self.spec_, self.weights_, source)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[(probs[:, 1] >= 0.5).astype(np.intp)]

    def decision_scores(self, X) -> np.ndarray:
        """Positive-class probabilities as a flat array."""
        return self.predict_proba(X)[:, 1]


def _positional_index(n: int, labels=None) -> training.DatasetIndex:
    records = tuple(
        training.PoseRecord(
            label=int(labels[i]) if labels is not None else 0,
            rmsd=None,
            target_id=f"t{i}",
            cluster_id=f"c{i}",
            source="fit",
            receptor_ref=str(i),
            ligand_ref=str(i),
        )
        for i in range(n)
    )
    return training.DatasetIndex(records)
