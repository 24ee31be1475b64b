"""Natural-transformation robustness pipeline on a layered toy generator.

The package is organized around one flow: render a controllable shape
dataset, train a layered generator on it, learn an inverse encoder,
discover interpretable latent directions, curate them into a catalog,
and use the task-irrelevant ones as an adversarial augmentation source
for classifier training.
"""

import torch

# Single-threaded kernels keep CPU runs bit-reproducible across machines.
torch.set_num_threads(1)

from .common import NatraError, MissingArtifactError, TrainingDivergedError  # noqa: E402

__all__ = [
    "NatraError",
    "MissingArtifactError",
    "TrainingDivergedError",
]

__version__ = "0.1.0"
