"""Cellular and memristive cellular neural network blocks as diffusion-model denoisers."""

from .cellnn import SolverConfig, TemplateSet, integrate_layer
from .data_io import Dataset, load_dataset, make_toy_dataset
from .denoiser import BlockKind, DenoiserConfig, build_denoiser
from .diffusion import TrainConfig, make_schedule, sample, train
from .estimators import DiffusionGenerator
from .evalkit import FeatureExtractorClassifier, fid, frechet_distance
from .memristor import TaOxParams, integrate_mlayer

__version__ = "0.1.0"
