"""scikit-learn style wrapper around denoiser training and sampling."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cellnn import SolverConfig
from .data_io import Checkpoint, Dataset, load_checkpoint
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .diffusion import TrainConfig, dm_loss, load_parameters, sample, train
from .memristor import TaOxParams
from .validation import check_images, check_labels


class DiffusionGenerator(BaseEstimator):
    """Class-conditional diffusion model with a selectable denoiser block.

    ``fit`` trains on images in [-1, 1] (labels optional); ``sample`` draws new
    images. ``block_kind`` is ``"conv"``, ``"cellnn"`` or ``"mcellnn"``.
    """

    def __init__(self, block_kind: str = "conv", base_features: int = 32, epochs: int = 10,
                 batch_size: int = 16, learning_rate: float = 1e-4, T: int = 400,
                 beta_min: float = 1e-4, beta_max: float = 0.02, dt: float = 0.01, steps: int = 100,
                 seed: int = 0, dtype: str = "float64"):
        self.block_kind = block_kind
        self.base_features = base_features
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.dt = dt
        self.steps = steps
        self.seed = seed
        self.dtype = dtype

    def _configs(self, image_shape, num_classes: int) -> tuple[DenoiserConfig, TrainConfig]:
        c, h, w = image_shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        solver = SolverConfig(dt=self.dt, steps=self.steps)
        net_cfg = DenoiserConfig(block_kind=self.block_kind, base_features=self.base_features,
                                 image_size=h, image_channels=c, num_classes=num_classes, T=self.T,
                                 solver=solver, dtype=self.dtype)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate, seed=self.seed, T=self.T,
                                beta_min=self.beta_min, beta_max=self.beta_max)
        return net_cfg, train_cfg

    def fit(self, X, y=None, checkpoint_dir=None, resume=None, on_epoch=None):
        X = check_images(X)
        if y is None:
            labels, num_classes = np.zeros(len(X), dtype=np.int64), 0
        else:
            labels = check_labels(y, len(X))
            num_classes = int(labels.max()) + 1
        net_cfg, train_cfg = self._configs(X.shape[1:], num_classes)
        net = build_denoiser(net_cfg, self.seed)
        snapshot = {"denoiser": net_cfg.to_dict(), "train": train_cfg.to_dict(), "estimator": self.get_params()}
        result = train(net, Dataset(X, labels, num_classes), train_cfg, checkpoint_dir=checkpoint_dir,
                       resume=resume, config_snapshot=snapshot, on_epoch=on_epoch)
        self.net_ = net
        self.schedule_ = train_cfg.schedule()
        self.num_classes_ = num_classes
        self.result_ = result
        self.loss_log_ = result.log
        self.epoch_losses_ = result.epoch_means
        return self

    def sample(self, n: int, label=None, seed: int | None = None) -> np.ndarray:
        """``n`` images as a float64 array ``(n, C, H, W)`` in [-1, 1]."""
        check_is_fitted(self, "net_")
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        if label is not None and not self.num_classes_:
            raise ValueError("model was fitted without labels; sample with label=None")
        cfg = self.net_.cfg
        g = torch.Generator().manual_seed(self.seed if seed is None else seed)
        self.net_.eval()
        out = sample(self.net_, self.schedule_, n, (cfg.image_channels, cfg.image_size, cfg.image_size),
                     label=label, generator=g, dtype=cfg.torch_dtype)
        return out.to(torch.float64).numpy()

    def score(self, X, y=None, seed: int = 0) -> float:
        """Negative noise-prediction loss on ``X`` (higher is better)."""
        check_is_fitted(self, "net_")
        X = check_images(X)
        labels = None if y is None or not self.num_classes_ else torch.from_numpy(check_labels(y, len(X)))
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            loss = dm_loss(self.net_, torch.from_numpy(X).to(self.net_.cfg.torch_dtype), labels, self.schedule_, g)
        return -float(loss)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "DiffusionGenerator":
        """Rebuild a fitted generator from a training checkpoint (path or :class:`Checkpoint`)."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        try:
            net_cfg = DenoiserConfig.from_dict(ckpt.config["denoiser"])
            train_cfg = TrainConfig(**ckpt.config["train"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"checkpoint does not describe a diffusion model: {exc}") from None
        params = ckpt.config.get("estimator") or dict(
            block_kind=net_cfg.block_kind.value, base_features=net_cfg.base_features,
            dt=net_cfg.solver.dt, steps=net_cfg.solver.steps, dtype=net_cfg.dtype,
            **{k: v for k, v in train_cfg.to_dict().items()},
        )
        est = cls(**params)
        net = Denoiser(net_cfg).to(net_cfg.torch_dtype)
        load_parameters(net, ckpt)
        est.net_ = net
        est.schedule_ = train_cfg.schedule()
        est.num_classes_ = net_cfg.num_classes
        est.loss_log_ = []
        est.epoch_losses_ = []
        return est


def untrained_generator(template: DiffusionGenerator, image_shape, num_classes: int) -> DiffusionGenerator:
    """A generator with freshly initialised weights and ``template``'s settings."""
    est = DiffusionGenerator(**template.get_params())
    net_cfg, train_cfg = est._configs(image_shape, num_classes)
    est.net_ = build_denoiser(net_cfg, est.seed)
    est.schedule_ = train_cfg.schedule()
    est.num_classes_ = num_classes
    est.loss_log_ = []
    est.epoch_losses_ = []
    return est
