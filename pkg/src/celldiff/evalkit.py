"""Fréchet distance between generated and reference image sets.

Features come from the penultimate layer of a small LeNet-style classifier
trained in-repo, so evaluation needs no downloaded weights.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data_io import Checkpoint, Dataset
from .validation import check_images, check_labels

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class LeNet(nn.Module):
    """Two 5x5 conv/pool stages, then 120 -> ``feature_dim`` -> classes."""

    def __init__(self, in_channels: int, image_size: int, num_classes: int, feature_dim: int = 84):
        super().__init__()
        if image_size % 4:
            raise ValueError(f"image size {image_size} must be divisible by 4")
        self.conv1 = nn.Conv2d(in_channels, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5, padding=2)
        side = image_size // 4
        self.fc1 = nn.Linear(16 * side * side, 120)
        self.fc2 = nn.Linear(120, feature_dim)
        self.fc3 = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        x = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        x = F.avg_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return F.relu(self.fc2(x))

    def forward(self, x):
        return self.fc3(self.features(x))


class FeatureExtractorClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small conv classifier whose penultimate activations serve as FID features.

    ``transform`` returns the ``feature_dim``-wide feature vectors; ``predict``
    and ``score`` behave like any scikit-learn classifier.
    """

    def __init__(self, epochs: int = 5, batch_size: int = 64, learning_rate: float = 1e-3,
                 feature_dim: int = 84, seed: int = 0, dtype: str = "float32"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.feature_dim = feature_dim
        self.seed = seed
        self.dtype = dtype

    def _torch_dtype(self):
        return _DTYPES[self.dtype]

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("feature extractor needs at least two classes in the training data")
        # labels index the output layer directly
        n_out = int(self.classes_.max()) + 1
        self.image_shape_ = X.shape[1:]
        g = torch.Generator().manual_seed(self.seed)
        net = LeNet(X.shape[1], X.shape[2], n_out, self.feature_dim).to(self._torch_dtype())
        with torch.no_grad():
            for p in net.parameters():
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                bound = 1.0 / np.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate, foreach=False)
        xt = torch.from_numpy(X).to(self._torch_dtype())
        yt = torch.from_numpy(y)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = torch.randperm(len(xt), generator=g)
            total = 0.0
            for lo in range(0, len(xt), self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                opt.zero_grad(set_to_none=True)
                loss = F.cross_entropy(net(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(xt))
        net.eval()
        self.net_ = net
        return self

    def _forward(self, X, fn, batch_size: int = 512) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, allow_empty=True, value_range=None)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"images have shape {X.shape[1:]}, extractor expects {self.image_shape_}")
        outs = []
        with torch.no_grad():
            for lo in range(0, len(X), batch_size):
                xb = torch.from_numpy(X[lo:lo + batch_size]).to(self._torch_dtype())
                outs.append(fn(xb).to(torch.float64).numpy())
        if not outs:
            return np.empty((0, self.feature_dim))
        return np.concatenate(outs)

    def transform(self, X) -> np.ndarray:
        return self._forward(X, lambda xb: self.net_.features(xb))

    def predict_proba(self, X) -> np.ndarray:
        return self._forward(X, lambda xb: torch.softmax(self.net_(xb), 1))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(1)

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "net_")
        arrays = OrderedDict((f"param/{k}", v.detach().numpy().copy()) for k, v in self.net_.state_dict().items())
        arrays["classes"] = self.classes_.astype(np.int64)
        config = {"kind": "feature_extractor", "params": self.get_params(),
                  "image_shape": list(self.image_shape_), "n_out": int(self.net_.fc3.out_features)}
        return Checkpoint(config=config, arrays=arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FeatureExtractorClassifier":
        if ckpt.config.get("kind") != "feature_extractor":
            raise ValueError("checkpoint does not hold a feature extractor")
        est = cls(**ckpt.config["params"])
        c, h, _ = ckpt.config["image_shape"]
        net = LeNet(c, h, ckpt.config["n_out"], est.feature_dim).to(est._torch_dtype())
        net.load_state_dict({k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()
                             if k.startswith("param/")})
        net.eval()
        est.net_ = net
        est.classes_ = ckpt.arrays["classes"]
        est.image_shape_ = tuple(ckpt.config["image_shape"])
        return est


def train_feature_extractor(dataset: Dataset, holdout: float = 0.2, seed: int = 0, **params):
    """Fit an extractor on a seeded split of ``dataset``; returns ``(extractor, holdout_accuracy)``."""
    if len(np.unique(dataset.labels)) < 2:
        raise ValueError("degenerate dataset: a feature extractor needs at least two classes")
    train, held = dataset.split_holdout(holdout, seed)
    est = FeatureExtractorClassifier(seed=seed, **params).fit(train.images, train.labels)
    return est, float(est.score(held.images, held.labels))


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def _features(images, extractor) -> np.ndarray:
    if hasattr(extractor, "transform"):
        return np.asarray(extractor.transform(images), dtype=np.float64)
    return np.asarray(extractor(images), dtype=np.float64)


def stats_from_features(feats) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError(f"need at least 2 feature vectors, got shape {feats.shape}")
    mu = feats.mean(0)
    sigma = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
    return FeatureStats(mu, (sigma + sigma.T) / 2, len(feats))


def feature_stats(images, extractor) -> FeatureStats:
    """Mean and unbiased covariance of ``extractor`` features over ``images``."""
    if len(images) < 2:
        raise ValueError(f"feature statistics need at least 2 images, got {len(images)}")
    return stats_from_features(_features(images, extractor))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    ra = _psd_sqrt(sa)
    inner = ra @ sb @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Fréchet distance between Gaussians ``N(mu_a, S_a)`` and ``N(mu_b, S_b)``.

    ``Tr((S_a S_b)^(1/2))`` is evaluated as the trace of the square root of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, with negative eigenvalues
    clipped to zero. Both orderings are averaged so the result is exactly
    symmetric even for rank-deficient covariances.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    tr_cross = 0.5 * (_trace_sqrt_product(a.sigma, b.sigma) + _trace_sqrt_product(b.sigma, a.sigma))
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_cross)
    return max(d, 0.0)


def fid(generated, reference, extractor) -> float:
    return frechet_distance(feature_stats(generated, extractor), feature_stats(reference, extractor))
