"""Adversarial training of the layered generator on rendered shapes.

The generator learns from two signals: a small discriminator for texture,
and an anchored regression target that pins the first few latent
coordinates to the ground-truth factors. Anchoring is what makes the
latent space land in the disentangled regime the rest of the pipeline
assumes; unused coordinates are fed unit noise with factor-independent
targets, so the generator learns to ignore them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..common import TrainingDivergedError, init_conv, init_linear, to_tensor, torch_generator
from .dataset import ToyDataset
from .factors import SHAPE_NAMES, SHAPE_SYMMETRY, FactorVector
from .generator import GeneratorConfig, LayeredGenerator

# Anchored coordinate layout: [class, pos_x, pos_y, scale, hue, rotation].
ANCHOR_DIM = 6
ANCHOR_AMPLITUDE = 1.5


def factor_embedding(factors: list, num_classes: int, latent_dim: int) -> np.ndarray:
    """Map factor vectors to their anchored latent coordinates.

    Returns (N, latent_dim) with zeros beyond the anchored block. Circular
    factors (hue, rotation) are mapped linearly onto [-A, A]; both ends of
    the interval render identically, which keeps the map continuous on the
    circle. Rotation is folded by the shape's symmetry first; circles sit
    at 0.
    """
    out = np.zeros((len(factors), latent_dim))
    a = ANCHOR_AMPLITUDE
    for i, f in enumerate(factors):
        order = SHAPE_SYMMETRY[SHAPE_NAMES[f.shape_class]]
        if num_classes > 1:
            out[i, 0] = (2.0 * f.shape_class / (num_classes - 1) - 1.0) * a
        out[i, 1] = f.pos_x / 0.3 * a
        out[i, 2] = f.pos_y / 0.3 * a
        out[i, 3] = (f.scale - 0.65) / 0.35 * a
        out[i, 4] = (f.hue / 180.0 - 1.0) * a
        if order > 0:
            period = 360.0 / order
            out[i, 5] = (f.folded_rotation() / period * 2.0 - 1.0) * a
    return out


class Discriminator(nn.Module):
    def __init__(self, image_size: int = 32, seed: int = 0):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 24, 3, stride=2, padding=1),
                nn.Conv2d(24, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 48, 3, stride=2, padding=1),
            ]
        )
        self.head = nn.Linear(48 * (image_size // 8) ** 2, 1)
        g = torch_generator(seed, "disc-init")
        for conv in self.convs:
            init_conv(conv, g)
        init_linear(self.head, g)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
        return h.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(1)


@dataclass
class GanConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3
    adv_weight: float = 0.1
    anchor_weight: float = 1.0
    anchor_jitter: float = 0.05
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


def train_generator(dataset: ToyDataset, config: GanConfig | None = None):
    """Train a LayeredGenerator on the dataset. Returns (generator, history)."""
    cfg = config or GanConfig()
    gen = LayeredGenerator(cfg.generator, seed=cfg.seed)
    disc = Discriminator(cfg.generator.image_size, seed=cfg.seed)
    d = cfg.generator.latent_dim

    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    bce = nn.BCEWithLogitsLoss()

    noise_gen = torch_generator(cfg.seed, "gan-noise")
    shuffle_gen = torch_generator(cfg.seed, "gan-shuffle")
    anchors = torch.from_numpy(
        factor_embedding(dataset.factors, dataset.num_classes, d)
    ).to(torch.float32)
    images = to_tensor(dataset.images)

    n = len(dataset)
    history = []
    step = 0

    def draw_codes(idx) -> torch.Tensor:
        # Latents from the anchored region: factor coordinates plus jitter,
        # unit noise on the unanchored block. Sampling the adversarial and
        # anchor latents here (not from the full prior) keeps the
        # discriminator from fighting the anchored interpolation structure.
        b = len(idx)
        z = anchors[idx] + cfg.anchor_jitter * torch.randn(b, d, generator=noise_gen)
        z[:, ANCHOR_DIM:] = torch.randn(b, d - ANCHOR_DIM, generator=noise_gen)
        return z

    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=shuffle_gen)
        sums = {"d_loss": 0.0, "adv_loss": 0.0, "anchor_loss": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            real = images[idx]
            b = len(idx)

            with torch.no_grad():
                fake = gen(draw_codes(idx))
            d_loss = bce(disc(real), torch.ones(b)) + bce(disc(fake), torch.zeros(b))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            # The generator's adversarial signal is feature matching against
            # the discriminator's features; plain non-saturating BCE turned
            # out to swamp the anchor term once the discriminator got
            # confident, while feature matching stays commensurate.
            real_feats = disc.features(real).mean(dim=0).detach()
            fake_feats = disc.features(gen(draw_codes(idx))).mean(dim=0)
            adv_loss = ((fake_feats - real_feats) ** 2).mean()
            anchor_loss = torch.mean((gen(draw_codes(idx)) - real) ** 2)
            g_loss = cfg.adv_weight * adv_loss + cfg.anchor_weight * anchor_loss
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            for key, val in (("d_loss", d_loss), ("adv_loss", adv_loss), ("anchor_loss", anchor_loss)):
                v = float(val.detach())
                if not math.isfinite(v):
                    raise TrainingDivergedError("train_generator", step, v)
                sums[key] += v
            batches += 1
            step += 1
        history.append({"epoch": epoch, **{k: v / batches for k, v in sums.items()}})
    gen.eval()
    return gen, history


@torch.no_grad()
def novelty_probe(generator: LayeredGenerator, dataset: ToyDataset, n_samples: int = 64, seed: int = 0) -> float:
    """Mean over prior samples of the distance to the nearest training image.

    Distance is mean absolute per-pixel difference. Used as the trained-
    generator quality gate: decoded prior samples should look like (without
    copying) the training distribution.
    """
    g = torch_generator(seed, "novelty-probe")
    z = torch.randn(n_samples, generator.latent_dim, generator=g)
    decoded = generator(z)
    train = to_tensor(dataset.images)
    dists = []
    for i in range(n_samples):
        diff = (train - decoded[i : i + 1]).abs().mean(dim=(1, 2, 3))
        dists.append(float(diff.min()))
    return float(np.mean(dists))
