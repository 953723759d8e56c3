"""scikit-learn style wrapper around :class:`~mdan.model.MdanModel`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ShapeError
from .hierarchy import EmotionHierarchy, leaves_to_paths, load_hierarchy
from .model import MdanConfig, MdanModel, apply_ablation, fuse_predictions
from .training import TrainConfig, predict_outputs, train


def check_images(X, input_size: int | None = None) -> np.ndarray:
    """Validate an N × 3 × H × W image batch; uint8 input is rescaled to [0, 1]."""
    raw = np.asarray(X)
    arr = check_array(raw, allow_nd=True, dtype=None, ensure_min_features=1)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected N×3×H×W images, got shape {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ShapeError(f"images must be square, got {arr.shape[2]}×{arr.shape[3]}")
    if input_size is not None and arr.shape[2] != input_size:
        raise ShapeError(f"model expects {input_size}×{input_size} images, got {arr.shape[2]}×{arr.shape[3]}")
    scale = 1.0 / 255.0 if raw.dtype == np.uint8 else 1.0
    return arr.astype(np.float64) * scale


def check_leaf_labels(y, hierarchy: EmotionHierarchy) -> tuple[np.ndarray, bool]:
    """Leaf indices for ``y`` given as leaf indices or leaf names; also reports whether names were used."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"y must be one leaf label per sample, got shape {y.shape}")
    names = hierarchy.names(hierarchy.depth)
    if y.dtype.kind in "iu":
        if y.size and (y.min() < 0 or y.max() >= len(names)):
            raise ValueError(f"leaf indices must lie in 0..{len(names) - 1}")
        return y.astype(np.int64), False
    pos = {n: i for i, n in enumerate(names)}
    unknown = sorted({str(v) for v in y if str(v) not in pos})
    if unknown:
        raise ValueError(f"unknown leaf classes {unknown}; expected one of {names}")
    return np.array([pos[str(v)] for v in y], dtype=np.int64), True


class MDANClassifier(ClassifierMixin, BaseEstimator):
    """Hierarchical emotion classifier predicting the deepest level of a tree.

    ``X`` is an N × 3 × H × W array (uint8 pixels are divided by 255) and
    ``y`` holds deepest-level labels, as indices or names.  Coarser levels are
    implied by the hierarchy.  With ``normalize`` the per-channel mean and
    standard deviation of the training images are stored and applied to every
    later batch.
    """

    def __init__(self, hierarchy="ekman", input_size=64, widths=(8, 16, 32, 64), pyramid_width=32, mapping="e",
                 fusion=True, heads=None, alpha=0.7, ablate=None, epochs=20, batch_size=16, lr=0.01,
                 backbone_lr=0.001, momentum=0.9, weight_decay=0.001, lr_decay=0.1, lr_decay_every=10,
                 random_state=0, shuffle_seed=0, normalize=True):
        self.hierarchy = hierarchy
        self.input_size = input_size
        self.widths = widths
        self.pyramid_width = pyramid_width
        self.mapping = mapping
        self.fusion = fusion
        self.heads = heads
        self.alpha = alpha
        self.ablate = ablate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.backbone_lr = backbone_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.random_state = random_state
        self.shuffle_seed = shuffle_seed
        self.normalize = normalize

    def _hierarchy(self) -> EmotionHierarchy:
        return self.hierarchy if isinstance(self.hierarchy, EmotionHierarchy) else load_hierarchy(self.hierarchy)

    def _config(self) -> MdanConfig:
        kwargs = dict(input_size=self.input_size, widths=tuple(self.widths), pyramid_width=self.pyramid_width,
                      mapping=self.mapping, fusion=self.fusion, alpha=float(self.alpha))
        if self.heads is not None:
            kwargs["heads"] = dict(self.heads)
        return apply_ablation(MdanConfig(**kwargs), self.ablate)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, backbone_lr=self.backbone_lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, lr_decay=self.lr_decay,
                           lr_decay_every=self.lr_decay_every, seed=self.shuffle_seed)

    def _prepare(self, X) -> np.ndarray:
        x = check_images(X, self.model_.config.input_size)
        if self.model_.normalization is None:
            return x
        mean, std = (np.asarray(v, dtype=np.float64)[:, None, None] for v in self.model_.normalization)
        return (x - mean) / np.where(std > 0, std, 1.0)

    def fit(self, X, y):
        h = self._hierarchy()
        config = self._config()
        x = check_images(X, config.input_size)
        leaves, named = check_leaf_labels(y, h)
        if len(leaves) != len(x):
            raise ValueError(f"X has {len(x)} samples but y has {len(leaves)}")
        tc = self._train_config()
        tc.validate()
        norm = None
        if self.normalize:
            if not len(x):
                raise ValueError("cannot fit on an empty image batch")
            norm = (tuple(map(float, x.mean(axis=(0, 2, 3)))), tuple(map(float, x.std(axis=(0, 2, 3)))))
        self.model_ = MdanModel(config, h, seed=self.random_state, normalization=norm)
        self.hierarchy_ = h
        self.classes_ = np.array(h.names(h.depth)) if named else np.arange(h.level_sizes[-1])
        result = train(self.model_, self._prepare(X), leaves_to_paths(h, leaves), tc)
        self.loss_curve_ = result.loss_curve
        return self

    def predict_levels(self, X, head: str = "O") -> list[np.ndarray]:
        """Per-level probability arrays from the local (L), global (G) or fused (O) head."""
        check_is_fitted(self, "model_")
        if head not in ("L", "G", "O"):
            raise ValueError(f"head must be 'L', 'G' or 'O', got {head!r}")
        out = predict_outputs(self.model_, self._prepare(X))
        if head == "L":
            return out.local
        if head == "G":
            return out.global_
        return fuse_predictions(out.local, out.global_, float(self.alpha))

    def predict_paths(self, X, head: str = "O") -> np.ndarray:
        """N × depth matrix of per-level argmax class indices."""
        return np.stack([p.argmax(axis=1) for p in self.predict_levels(X, head)], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return self.predict_levels(X)[-1]

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
