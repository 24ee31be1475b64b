from .factors import FactorVector, FACTOR_RANGES, SHAPE_NAMES
from .render import render
from .dataset import ToyDataset, sample_dataset, save_dataset, load_dataset
from .generator import FeatureMap, GeneratorConfig, LayeredGenerator, load_generator, save_generator
from .train_gan import GanConfig, train_generator, novelty_probe, factor_embedding
from .oracle import FactorOracle, OracleConfig, train_oracle, load_oracle, save_oracle

__all__ = [
    "FactorVector",
    "FACTOR_RANGES",
    "SHAPE_NAMES",
    "render",
    "ToyDataset",
    "sample_dataset",
    "save_dataset",
    "load_dataset",
    "FeatureMap",
    "GeneratorConfig",
    "LayeredGenerator",
    "load_generator",
    "save_generator",
    "GanConfig",
    "train_generator",
    "novelty_probe",
    "factor_embedding",
    "FactorOracle",
    "OracleConfig",
    "train_oracle",
    "load_oracle",
    "save_oracle",
]
