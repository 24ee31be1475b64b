"""Inverse encoder: batch inversion of the generator plus generator shifting.

Training alternates two updates per iteration. The z-step pulls the
encoder toward inverting the generator on prior samples (latent cycle
loss); the x-step pulls encoder-plus-generator reconstructions toward real
images (pixel + perceptual reconstruction loss). The generator is frozen
throughout. shift_generator is the converse move: freeze the encoder and
its codes for a small target set, then fine-tune a copy of the generator
so those codes reconstruct the targets better.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .common import (
    TrainingDivergedError,
    init_conv,
    init_linear,
    load_checkpoint_meta,
    load_state,
    np_rng,
    save_checkpoint,
    to_tensor,
    torch_generator,
)
from .toy.dataset import ToyDataset, sample_factors
from .toy.generator import LayeredGenerator
from .toy.train_gan import ANCHOR_DIM, factor_embedding


class Encoder(nn.Module):
    """Image -> latent code, the approximate inverse of the generator."""

    def __init__(self, latent_dim: int = 64, image_size: int = 32, seed: int = 0):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 24, 3, stride=2, padding=1),
                nn.Conv2d(24, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 48, 3, stride=2, padding=1),
            ]
        )
        feat = 48 * (image_size // 8) ** 2
        self.fc1 = nn.Linear(feat, 128)
        self.fc2 = nn.Linear(128, latent_dim)
        g = torch_generator(seed, "encoder-init")
        for conv in self.convs:
            init_conv(conv, g)
        init_linear(self.fc1, g)
        init_linear(self.fc2, g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
        h = torch.nn.functional.leaky_relu(self.fc1(h.flatten(1)), 0.2)
        return self.fc2(h)

    @torch.no_grad()
    def invert(self, image: np.ndarray) -> np.ndarray:
        """Invert one (H, W, C) image or a (B, H, W, C) batch."""
        single = np.asarray(image).ndim == 3
        z = self(to_tensor(image)).numpy().astype(np.float64)
        return z[0] if single else z


class PerceptualExtractor(nn.Module):
    """Frozen conv features for the perceptual reconstruction term.

    A three-conv classifier trained briefly on rendered shapes; features
    are tapped after each conv activation.
    """

    def __init__(self, num_classes: int = 2, image_size: int = 32, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 12, 3, stride=2, padding=1),
                nn.Conv2d(12, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 24, 3, stride=2, padding=1),
            ]
        )
        self.head = nn.Linear(24 * (image_size // 8) ** 2, num_classes)
        g = torch_generator(seed, "perceptual-init")
        for conv in self.convs:
            init_conv(conv, g)
        init_linear(self.head, g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
        return self.head(h.flatten(1))

    def features(self, x: torch.Tensor) -> list:
        taps = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
            taps.append(h)
        return taps

    def freeze(self) -> "PerceptualExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def train_perceptual(dataset: ToyDataset, epochs: int = 6, seed: int = 0) -> PerceptualExtractor:
    """Train the extractor as a plain classifier, then freeze it."""
    net = PerceptualExtractor(dataset.num_classes, dataset.images.shape[1], seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    images = to_tensor(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    shuffle = torch_generator(seed, "perceptual-shuffle")
    for _ in range(epochs):
        order = torch.randperm(len(dataset), generator=shuffle)
        for start in range(0, len(dataset), 64):
            idx = order[start : start + 64]
            loss = torch.nn.functional.cross_entropy(net(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net.freeze()


# ---------------------------------------------------------------------------
# Losses. Both reduce as mean-over-batch of per-example sums, so the
# values match the write-ups they implement rather than element means.
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    gamma1: float = 1.0  # pixel term weight
    gamma2: float = 0.1  # perceptual L1 weight
    pixel_loss: str = "l2"  # "l2" (squared error) or "mae" ablation switch

    def pixel_term(self, residual: torch.Tensor) -> torch.Tensor:
        flat = tuple(range(1, residual.ndim))
        if self.pixel_loss == "l2":
            return (residual**2).sum(dim=flat).mean()
        if self.pixel_loss == "mae":
            return residual.abs().sum(dim=flat).mean()
        raise ValueError(f"unknown pixel_loss {self.pixel_loss!r}")


def latent_cycle_loss(encoder, generator, z: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ||z - encoder(generator(z))||_2^2.

    The generated image is detached: this loss trains the encoder against
    a fixed generator.
    """
    x = generator(z)
    if isinstance(x, torch.Tensor):
        x = x.detach()
    z_hat = encoder(x)
    return ((z - z_hat) ** 2).sum(dim=tuple(range(1, z.ndim))).mean()


def reconstruction_loss(
    encoder,
    generator,
    x: torch.Tensor,
    weights: LossWeights | None = None,
    extractor: PerceptualExtractor | None = None,
) -> torch.Tensor:
    """gamma1 * ||x - g(e(x))||_2^2 + gamma2 * sum_l ||V_l(x) - V_l(g(e(x)))||_1.

    Norms are sums per example, averaged over the batch. The perceptual
    term is dropped when no extractor is given; weights.pixel_loss swaps
    the first term to MAE for ablations.
    """
    w = weights or LossWeights()
    x_hat = generator(encoder(x))
    loss = w.gamma1 * w.pixel_term(x - x_hat)
    if extractor is not None and w.gamma2 != 0.0:
        for fx, fx_hat in zip(extractor.features(x), extractor.features(x_hat)):
            loss = loss + w.gamma2 * (fx - fx_hat).abs().sum(dim=(1, 2, 3)).mean()
    return loss


@dataclass
class EncoderConfig:
    iterations: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    code_jitter: float = 0.15
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


def sample_region_codes(
    anchors: torch.Tensor,
    idx: torch.Tensor,
    jitter: float,
    gen: torch.Generator,
    anchor_dim: int = ANCHOR_DIM,
) -> torch.Tensor:
    """Fresh z-batch from the generator's operative latent region.

    Anchored coordinates get Gaussian jitter around the given anchors, the
    remaining coordinates are unit-normal. This is the distribution the
    generator was trained on, so the cycle loss teaches inversion where the
    generator actually embeds images. The jitter is wider than the training
    jitter on purpose: downstream latent attacks probe a tube around the
    manifold.
    """
    b = len(idx)
    d = anchors.shape[1]
    z = anchors[idx] + jitter * torch.randn(b, d, generator=gen)
    z[:, anchor_dim:] = torch.randn(b, d - anchor_dim, generator=gen)
    return z


def train_encoder(
    generator: LayeredGenerator,
    dataset: ToyDataset,
    config: EncoderConfig | None = None,
    extractor: PerceptualExtractor | None = None,
):
    """Train an encoder against a frozen generator. Returns (encoder, history).

    Each iteration applies the latent cycle update and then the image
    reconstruction update. History rows carry both loss values.
    """
    cfg = config or EncoderConfig()
    d = generator.latent_dim
    encoder = Encoder(d, generator.config.image_size, seed=cfg.seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)

    generator = generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)

    images = to_tensor(dataset.images)
    anchors = torch.from_numpy(
        factor_embedding(dataset.factors, dataset.num_classes, d)
    ).to(torch.float32)
    noise = torch_generator(cfg.seed, "encoder-noise")
    shuffle = torch_generator(cfg.seed, "encoder-shuffle")
    order = torch.randperm(len(dataset), generator=shuffle)
    cursor = 0

    history = []
    for it in range(cfg.iterations):
        rows = torch.randint(len(dataset), (cfg.batch_size,), generator=noise)
        z = sample_region_codes(anchors, rows, cfg.code_jitter, noise)
        cycle = latent_cycle_loss(encoder, generator, z)
        opt.zero_grad()
        cycle.backward()
        opt.step()

        if cursor + cfg.batch_size > len(dataset):
            order = torch.randperm(len(dataset), generator=shuffle)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        recon = reconstruction_loss(encoder, generator, images[idx], cfg.weights, extractor)
        opt.zero_grad()
        recon.backward()
        opt.step()

        row = {"iteration": it, "cycle_loss": float(cycle.detach()), "recon_loss": float(recon.detach())}
        for key in ("cycle_loss", "recon_loss"):
            if not math.isfinite(row[key]):
                raise TrainingDivergedError("train_encoder", it, row[key])
        history.append(row)

    encoder.eval()
    for p in generator.parameters():
        p.requires_grad_(True)
    return encoder, history


def _held_out_codes(generator: LayeredGenerator, n: int, seed: int, jitter: float) -> torch.Tensor:
    rng = np_rng(seed, "cycle-holdout-factors")
    factors = [sample_factors(rng, int(rng.integers(0, 2))) for _ in range(n)]
    anchors = torch.from_numpy(factor_embedding(factors, 2, generator.latent_dim)).to(torch.float32)
    g = torch_generator(seed, "cycle-holdout-noise")
    return sample_region_codes(anchors, torch.arange(n), jitter, g)


@torch.no_grad()
def held_out_cycle_error(
    encoder: Encoder, generator: LayeredGenerator, n: int = 256, seed: int = 1, jitter: float = 0.15
) -> float:
    """Mean cycle loss on fresh held-out codes from the operative region."""
    z = _held_out_codes(generator, n, seed, jitter)
    z_hat = encoder(generator(z))
    return float(((z - z_hat) ** 2).sum(dim=1).mean())


@torch.no_grad()
def held_out_linf_ratio(
    encoder: Encoder, generator: LayeredGenerator, n: int = 100, seed: int = 1, jitter: float = 0.15
) -> float:
    """Mean ||z - enc(g(z))||_inf over held-out z, relative to mean ||z||_inf."""
    z = _held_out_codes(generator, n, seed, jitter)
    z_hat = encoder(generator(z))
    err = (z - z_hat).abs().amax(dim=1).mean()
    scale = z.abs().amax(dim=1).mean()
    return float(err / scale)


# ---------------------------------------------------------------------------
# Generator shifting.
# ---------------------------------------------------------------------------


@dataclass
class ShiftConfig:
    steps: int = 100
    lr: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass
class ShiftReport:
    target_loss_before: float
    target_loss_after: float
    original_loss_before: float | None = None
    original_loss_after: float | None = None
    best_step: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _fixed_code_loss(generator, codes, x, weights, extractor):
    x_hat = generator(codes)
    loss = weights.gamma1 * weights.pixel_term(x - x_hat)
    if extractor is not None and weights.gamma2 != 0.0:
        for fx, fx_hat in zip(extractor.features(x), extractor.features(x_hat)):
            loss = loss + weights.gamma2 * (fx - fx_hat).abs().sum(dim=(1, 2, 3)).mean()
    return loss


def shift_generator(
    generator: LayeredGenerator,
    encoder: Encoder,
    target_images: np.ndarray,
    config: ShiftConfig | None = None,
    extractor: PerceptualExtractor | None = None,
    original_images: np.ndarray | None = None,
):
    """Fine-tune a copy of the generator toward a small target set.

    The encoder and the codes it assigns to the targets stay fixed; only
    generator weights move. The returned generator is the best iterate
    under the target reconstruction loss, so that loss never ends up above
    its starting value. Returns (shifted_generator, ShiftReport).
    """
    cfg = config or ShiftConfig()
    shifted = copy.deepcopy(generator)
    shifted.train()
    for p in shifted.parameters():
        p.requires_grad_(True)

    x = to_tensor(target_images)
    codes = torch.from_numpy(np.atleast_2d(encoder.invert(target_images))).to(torch.float32)
    x_orig = to_tensor(original_images) if original_images is not None else None
    codes_orig = (
        torch.from_numpy(np.atleast_2d(encoder.invert(original_images))).to(torch.float32)
        if original_images is not None
        else None
    )

    def target_loss() -> float:
        with torch.no_grad():
            return float(_fixed_code_loss(shifted, codes, x, cfg.weights, extractor))

    def original_loss() -> float | None:
        if x_orig is None:
            return None
        with torch.no_grad():
            return float(_fixed_code_loss(shifted, codes_orig, x_orig, cfg.weights, extractor))

    report = ShiftReport(
        target_loss_before=target_loss(),
        target_loss_after=0.0,
        original_loss_before=original_loss(),
    )

    opt = torch.optim.Adam(shifted.parameters(), lr=cfg.lr)
    best = report.target_loss_before
    best_state = copy.deepcopy(shifted.state_dict())
    best_step = 0
    for step in range(cfg.steps):
        loss = _fixed_code_loss(shifted, codes, x, cfg.weights, extractor)
        if not math.isfinite(float(loss.detach())):
            raise TrainingDivergedError("shift_generator", step, float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
        current = target_loss()
        if current < best:
            best = current
            best_state = copy.deepcopy(shifted.state_dict())
            best_step = step + 1

    shifted.load_state_dict(best_state)
    shifted.eval()
    report.target_loss_after = best
    report.original_loss_after = original_loss()
    report.best_step = best_step
    return shifted, report


# ---------------------------------------------------------------------------
# Persistence.
# ---------------------------------------------------------------------------


def save_encoder(path: Path | str, encoder: Encoder) -> str:
    return save_checkpoint(
        path,
        encoder,
        {"kind": "encoder", "latent_dim": encoder.latent_dim, "image_size": encoder.image_size},
    )


def load_encoder(path: Path | str) -> Encoder:
    meta = load_checkpoint_meta(path)
    enc = Encoder(meta["latent_dim"], meta["image_size"])
    enc.load_state_dict(load_state(path))
    enc.eval()
    return enc


def save_perceptual(path: Path | str, extractor: PerceptualExtractor) -> str:
    return save_checkpoint(
        path,
        extractor,
        {
            "kind": "perceptual_extractor",
            "num_classes": extractor.num_classes,
            "image_size": extractor.image_size,
        },
    )


def load_perceptual(path: Path | str) -> PerceptualExtractor:
    meta = load_checkpoint_meta(path)
    net = PerceptualExtractor(meta["num_classes"], meta["image_size"])
    net.load_state_dict(load_state(path))
    return net.freeze()
