"""Latent code expansion: multi-code reconstruction at a split layer.

A single inverted code often misses local detail. Expansion keeps N codes
and blends their head() feature maps with per-channel importance vectors
before running tail(), so different codes can contribute different
regions' channels. N=1 with unit importances reduces exactly to decode().
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .common import NatraError, to_images, to_tensor, torch_generator
from .inversion import Encoder, LossWeights, PerceptualExtractor
from .toy.generator import LayeredGenerator


@dataclass
class ExpandedLatent:
    """N latent codes with channel importances, composed at split_layer."""

    codes: np.ndarray  # (N, D)
    importances: np.ndarray  # (N, C_l)
    split_layer: int

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    def validate(self, generator: LayeredGenerator) -> None:
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError("codes must be a (N>=1, D) array")
        if self.codes.shape[1] != generator.latent_dim:
            raise ValueError(
                f"code dim {self.codes.shape[1]} != generator latent dim {generator.latent_dim}"
            )
        channels = generator.layer_shapes[self.split_layer - 1][2]
        if self.importances.shape != (self.codes.shape[0], channels):
            raise ValueError(
                f"importances shape {self.importances.shape} does not match "
                f"{self.codes.shape[0]} codes x {channels} channels at layer {self.split_layer}"
            )
        if not np.isfinite(self.importances).all():
            raise ValueError("importances must be finite")

    def to_json(self) -> str:
        return json.dumps(
            {
                "split_layer": self.split_layer,
                "codes": self.codes.tolist(),
                "importances": self.importances.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ExpandedLatent":
        obj = json.loads(text)
        return cls(
            codes=np.array(obj["codes"], dtype=np.float64),
            importances=np.array(obj["importances"], dtype=np.float64),
            split_layer=int(obj["split_layer"]),
        )


def compose_tensor(
    generator: LayeredGenerator,
    codes: torch.Tensor,
    importances: torch.Tensor,
    split_layer: int,
    offset: torch.Tensor | None = None,
) -> torch.Tensor:
    """Differentiable composition; returns a (1, C, H, W) image tensor.

    codes (N, D) and importances (N, C_l) may require grad. offset is an
    optional (L, D) per-layer shift added to every code's stack, the
    handle used for latent-space attacks on expanded inversions.
    """
    n = codes.shape[0]
    stacks = generator.as_stack(codes)  # (N, L, D)
    if offset is not None:
        stacks = stacks + offset.reshape(1, *offset.shape).to(stacks.dtype)
    fm = generator.head(stacks, split_layer)
    weighted = fm.features * importances.reshape(n, -1, 1, 1).to(fm.features.dtype)
    merged = weighted.sum(dim=0, keepdim=True)
    mean_codes = stacks.mean(dim=0, keepdim=True)
    return generator.tail(merged, split_layer, codes=mean_codes)


def compose(generator: LayeredGenerator, exp: ExpandedLatent) -> np.ndarray:
    """Compose an expanded latent to a (H, W, C) image."""
    exp.validate(generator)
    with torch.no_grad():
        out = compose_tensor(
            generator,
            torch.from_numpy(np.asarray(exp.codes)).to(torch.float32),
            torch.from_numpy(np.asarray(exp.importances)).to(torch.float32),
            exp.split_layer,
        )
    return to_images(out)[0]


def reconstruction_error(generator: LayeredGenerator, exp: ExpandedLatent, x: np.ndarray) -> float:
    """Plain pixel MSE between x and the composed reconstruction."""
    recon = compose(generator, exp)
    return float(np.mean((np.asarray(x, dtype=np.float64) - recon) ** 2))


def expansion_loss(
    generator: LayeredGenerator,
    codes: torch.Tensor,
    importances: torch.Tensor,
    split_layer: int,
    target: torch.Tensor,
    weights: LossWeights | None = None,
    extractor: PerceptualExtractor | None = None,
) -> torch.Tensor:
    """Reconstruction objective: gamma1 * SSE + gamma2 * perceptual L1 sum."""
    w = weights or LossWeights()
    x_hat = compose_tensor(generator, codes, importances, split_layer)
    loss = w.gamma1 * ((target - x_hat) ** 2).sum()
    if extractor is not None and w.gamma2 != 0.0:
        for fx, fx_hat in zip(extractor.features(target), extractor.features(x_hat)):
            loss = loss + w.gamma2 * (fx - fx_hat).abs().sum()
    return loss


@dataclass
class FitConfig:
    n_codes: int = 4
    split_layer: int | None = None  # default: L // 2
    iterations: int = 500
    # The summed loss has a steep landscape; steps above ~3e-3 oscillate
    # instead of converging on realizable targets.
    step: float = 1e-3
    jitter: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass
class FitResult:
    expanded: ExpandedLatent
    best_loss: float
    best_iteration: int
    losses: list


def fit_expanded(
    generator: LayeredGenerator,
    x: np.ndarray,
    encoder: Encoder,
    config: FitConfig | None = None,
    extractor: PerceptualExtractor | None = None,
) -> FitResult:
    """Fit an expanded latent to one target image by gradient descent.

    Codes start at the encoder's inversion plus per-code Gaussian jitter;
    importances start at all-ones / N. Plain fixed-step gradient descent,
    returning the best iterate seen (including the initialization).
    """
    cfg = config or FitConfig()
    split = cfg.split_layer if cfg.split_layer is not None else generator.num_layers // 2
    if cfg.n_codes < 1:
        raise ValueError("n_codes must be >= 1")
    generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)

    d = generator.latent_dim
    channels = generator.layer_shapes[split - 1][2]
    g = torch_generator(cfg.seed, "fit-expanded")
    z0 = torch.from_numpy(encoder.invert(x)).to(torch.float32)
    codes = z0.reshape(1, d) + cfg.jitter * torch.randn(cfg.n_codes, d, generator=g)
    importances = torch.full((cfg.n_codes, channels), 1.0 / cfg.n_codes)
    codes.requires_grad_(True)
    importances.requires_grad_(True)
    target = to_tensor(x)

    def loss_now() -> torch.Tensor:
        return expansion_loss(generator, codes, importances, split, target, cfg.weights, extractor)

    def snapshot() -> ExpandedLatent:
        return ExpandedLatent(
            codes=codes.detach().numpy().astype(np.float64).copy(),
            importances=importances.detach().numpy().astype(np.float64).copy(),
            split_layer=split,
        )

    best = float(loss_now().detach())
    best_exp = snapshot()
    best_iter = 0
    losses = [best]
    for it in range(cfg.iterations):
        loss = loss_now()
        grads = torch.autograd.grad(loss, [codes, importances])
        with torch.no_grad():
            codes -= cfg.step * grads[0]
            importances -= cfg.step * grads[1]
        value = float(loss_now().detach())
        if not math.isfinite(value):
            raise NatraError(f"fit_expanded: loss became non-finite at iteration {it}")
        losses.append(value)
        if value < best:
            best = value
            best_exp = snapshot()
            best_iter = it + 1

    for p in generator.parameters():
        p.requires_grad_(True)
    return FitResult(expanded=best_exp, best_loss=best, best_iteration=best_iter, losses=losses)


def fit_expanded_batch(
    generator: LayeredGenerator,
    targets: np.ndarray,
    encoder: Encoder,
    config: FitConfig | None = None,
    extractor: PerceptualExtractor | None = None,
) -> list:
    """Fit many targets in one vectorized descent; same math as fit_expanded.

    The joint loss is the sum of independent per-target objectives, so the
    gradient seen by each target's parameters matches its standalone run.
    Returns a list of FitResult.
    """
    cfg = config or FitConfig()
    split = cfg.split_layer if cfg.split_layer is not None else generator.num_layers // 2
    if cfg.n_codes < 1:
        raise ValueError("n_codes must be >= 1")
    generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)

    b = targets.shape[0]
    n, d = cfg.n_codes, generator.latent_dim
    channels = generator.layer_shapes[split - 1][2]
    # Same stream as fit_expanded: a batch of one must reproduce the
    # standalone run.
    g = torch_generator(cfg.seed, "fit-expanded")
    z0 = torch.from_numpy(np.atleast_2d(encoder.invert(targets))).to(torch.float32)
    codes = z0.reshape(b, 1, d) + cfg.jitter * torch.randn(b, n, d, generator=g)
    importances = torch.full((b, n, channels), 1.0 / n)
    codes.requires_grad_(True)
    importances.requires_grad_(True)
    target = to_tensor(targets)

    def per_target_loss() -> torch.Tensor:
        stacks = generator.as_stack(codes.reshape(b * n, d))  # (b*n, L, D)
        fm = generator.head(stacks, split)
        weighted = fm.features * importances.reshape(b * n, channels, 1, 1)
        merged = weighted.reshape(b, n, *weighted.shape[1:]).sum(dim=1)
        mean_codes = stacks.reshape(b, n, generator.num_layers, d).mean(dim=1)
        x_hat = generator.tail(merged, split, codes=mean_codes)
        flat = tuple(range(1, 4))
        loss = cfg.weights.gamma1 * ((target - x_hat) ** 2).sum(dim=flat)
        if extractor is not None and cfg.weights.gamma2 != 0.0:
            for fx, fx_hat in zip(extractor.features(target), extractor.features(x_hat)):
                loss = loss + cfg.weights.gamma2 * (fx - fx_hat).abs().sum(dim=flat)
        return loss

    vals = per_target_loss().detach()
    best = vals.clone()
    best_codes = codes.detach().clone()
    best_imps = importances.detach().clone()
    best_iters = torch.zeros(b, dtype=torch.long)
    losses = [vals.tolist()]
    for it in range(cfg.iterations):
        loss_vec = per_target_loss()
        grads = torch.autograd.grad(loss_vec.sum(), [codes, importances])
        with torch.no_grad():
            codes -= cfg.step * grads[0]
            importances -= cfg.step * grads[1]
        vals = per_target_loss().detach()
        if not torch.isfinite(vals).all():
            raise NatraError(f"fit_expanded_batch: loss became non-finite at iteration {it}")
        improved = vals < best
        with torch.no_grad():
            best = torch.where(improved, vals, best)
            best_codes[improved] = codes.detach()[improved]
            best_imps[improved] = importances.detach()[improved]
            best_iters[improved] = it + 1
        losses.append(vals.tolist())

    for p in generator.parameters():
        p.requires_grad_(True)
    results = []
    for i in range(b):
        exp = ExpandedLatent(
            codes=best_codes[i].numpy().astype(np.float64),
            importances=best_imps[i].numpy().astype(np.float64),
            split_layer=split,
        )
        results.append(
            FitResult(
                expanded=exp,
                best_loss=float(best[i]),
                best_iteration=int(best_iters[i]),
                losses=[row[i] for row in losses],
            )
        )
    return results


def save_expanded(path: Path | str, exp: ExpandedLatent) -> None:
    Path(path).write_text(exp.to_json() + "\n")


def load_expanded(path: Path | str) -> ExpandedLatent:
    from .common import MissingArtifactError

    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return ExpandedLatent.from_json(path.read_text())
