"""Factor-estimation oracle: reads ground-truth factors back from images.

A small convnet trained on (render(f), f) pairs. Circular factors are
regressed as sin/cos pairs so estimates stay continuous on the circle;
rotation is regressed as sin/cos of (symmetry_order * angle) and masked
out for rotation-symmetric shapes. Noise, blur and shading-depth jitter
keep the oracle usable on generator output, which is softer and shades
shallower than crisp renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..common import (
    TrainingDivergedError,
    init_conv,
    init_linear,
    load_checkpoint_meta,
    load_state,
    save_checkpoint,
    to_tensor,
    torch_generator,
)
from .dataset import ToyDataset, sample_dataset
from .factors import SHAPE_NAMES, SHAPE_SYMMETRY
from .render import SHADE_VALUE, hue_color, shade_coverage

REGRESSION_HEADS = ("pos_x", "pos_y", "scale", "hue_sin", "hue_cos", "rot_sin", "rot_cos")


def factor_targets(dataset: ToyDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """(targets (N, 7), mask (N, 7)) of normalized regression targets."""
    n = len(dataset)
    t = np.zeros((n, len(REGRESSION_HEADS)))
    mask = np.ones_like(t)
    for i, f in enumerate(dataset.factors):
        order = SHAPE_SYMMETRY[SHAPE_NAMES[f.shape_class]]
        t[i, 0] = f.pos_x / 0.3
        t[i, 1] = f.pos_y / 0.3
        t[i, 2] = (f.scale - 0.65) / 0.35
        hue = math.radians(f.hue)
        t[i, 3] = math.sin(hue)
        t[i, 4] = math.cos(hue)
        if order > 0:
            rot = math.radians(f.rotation) * order
            t[i, 5] = math.sin(rot)
            t[i, 6] = math.cos(rot)
        else:
            mask[i, 5:] = 0.0
    return torch.from_numpy(t).to(torch.float32), torch.from_numpy(mask).to(torch.float32)


class FactorOracle(nn.Module):
    def __init__(self, num_classes: int = 2, image_size: int = 32, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 24, 3, stride=2, padding=1),
                nn.Conv2d(24, 32, 3, stride=2, padding=1),
            ]
        )
        feat = 32 * (image_size // 8) ** 2
        self.trunk = nn.Linear(feat, 128)
        self.class_head = nn.Linear(128, num_classes)
        self.reg_head = nn.Linear(128, len(REGRESSION_HEADS))
        g = torch_generator(seed, "oracle-init")
        for conv in self.convs:
            init_conv(conv, g)
        for lin in (self.trunk, self.class_head, self.reg_head):
            init_linear(lin, g)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
        h = torch.nn.functional.leaky_relu(self.trunk(h.flatten(1)), 0.2)
        return self.class_head(h), self.reg_head(h)

    @torch.no_grad()
    def estimate(self, images: np.ndarray) -> dict:
        """Factor estimates for (B, H, W, C) or single images.

        Returns arrays keyed by factor: denormalized pos_x/pos_y/scale,
        raw sin/cos pairs, wrapped hue/rotation in degrees, class_probs
        and shape_class. Rotation uses the symmetry order of the predicted
        class and is meaningless for rotation-symmetric predictions.
        """
        single = np.asarray(images).ndim == 3
        logits, reg = self(to_tensor(images))
        probs = torch.softmax(logits, dim=1).numpy().astype(np.float64)
        reg = reg.numpy().astype(np.float64)
        pred = probs.argmax(axis=1)
        orders = np.array([max(SHAPE_SYMMETRY[SHAPE_NAMES[c]], 1) for c in pred])
        hue = np.degrees(np.arctan2(reg[:, 3], reg[:, 4])) % 360.0
        rot = (np.degrees(np.arctan2(reg[:, 5], reg[:, 6])) % 360.0) / orders
        out = {
            "class_probs": probs,
            "shape_class": pred,
            "pos_x": reg[:, 0] * 0.3,
            "pos_y": reg[:, 1] * 0.3,
            "scale": reg[:, 2] * 0.35 + 0.65,
            "hue_sin": reg[:, 3],
            "hue_cos": reg[:, 4],
            "rot_sin": reg[:, 5],
            "rot_cos": reg[:, 6],
            "hue": hue,
            "rotation": rot,
        }
        if single:
            out = {k: v[0] for k, v in out.items()}
        return out

    @torch.no_grad()
    def predict_class(self, images: np.ndarray) -> np.ndarray:
        logits, _ = self(to_tensor(images))
        return logits.argmax(dim=1).numpy()


@dataclass
class OracleConfig:
    n_train: int = 6144
    epochs: int = 16
    batch_size: int = 64
    lr: float = 1.5e-3
    noise_std: float = 0.03
    seed: int = 0


# Rotation only appears on half the examples (circles are masked) and its
# sin/cos targets are the hardest heads, so they get extra loss weight.
HEAD_WEIGHTS = torch.tensor([1.0, 1.0, 1.0, 1.0, 1.0, 2.5, 2.5])


SHADE_DEPTH_RANGE = (0.45, 0.88)


def shade_depth_terms(data, image_size: int) -> torch.Tensor:
    """Per-example shade-editing term shade_cov * fg, (N, 3, H, W).

    Multiplying a row by (k - SHADE_VALUE) and adding it to the render
    re-renders that example's shading at depth k; rows for unshaded
    shapes are zero and editing them is a no-op.
    """
    terms = torch.zeros((len(data), 3, image_size, image_size))
    for i, f in enumerate(data.factors):
        cov = shade_coverage(f, image_size)
        if cov.any():
            term = cov[:, :, None] * hue_color(f.hue)
            terms[i] = torch.from_numpy(term.transpose(2, 0, 1)).float()
    return terms


def train_oracle(num_classes: int = 2, config: OracleConfig | None = None, image_size: int = 32):
    """Train the oracle on freshly rendered shapes. Returns (oracle, accuracy).

    Accuracy is class accuracy on a held-out rendered set.
    """
    cfg = config or OracleConfig()
    data = sample_dataset(cfg.n_train, seed=cfg.seed + 101, num_classes=num_classes, size=image_size)
    held = sample_dataset(512, seed=cfg.seed + 202, num_classes=num_classes, size=image_size)

    oracle = FactorOracle(num_classes, image_size, seed=cfg.seed)
    opt = torch.optim.Adam(oracle.parameters(), lr=cfg.lr)
    targets, mask = factor_targets(data)
    labels = torch.from_numpy(data.labels)
    images = to_tensor(data.images)
    shade_terms = shade_depth_terms(data, image_size)
    depth_lo, depth_hi = SHADE_DEPTH_RANGE
    noise_gen = torch_generator(cfg.seed, "oracle-noise")
    shuffle_gen = torch_generator(cfg.seed, "oracle-shuffle")

    step = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(len(data), generator=shuffle_gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = images[idx]
            # Generator output shades shallower than the renderer's law, so
            # an oracle keyed to the exact depth puts those images right on
            # its class boundary. Jittering the depth both ways keeps the
            # boundary clear of them; factor targets are unaffected.
            k = depth_lo + (depth_hi - depth_lo) * torch.rand(
                (len(idx), 1, 1, 1), generator=noise_gen
            )
            x = x + (k - SHADE_VALUE) * shade_terms[idx]
            x = x + cfg.noise_std * torch.randn(x.shape, generator=noise_gen)
            # A third of the batches also see a 3x3 box blur, approximating
            # the softer edges of generator output.
            if step % 3 == 2:
                x = torch.nn.functional.avg_pool2d(x, 3, stride=1, padding=1)
            logits, reg = oracle(x)
            class_loss = torch.nn.functional.cross_entropy(logits, labels[idx])
            mw = mask[idx] * HEAD_WEIGHTS
            reg_loss = (mw * (reg - targets[idx]) ** 2).sum() / mw.sum().clamp(min=1.0)
            loss = class_loss + 2.0 * reg_loss
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError("train_oracle", step, float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1

    oracle.eval()
    acc = float((oracle.predict_class(held.images) == held.labels).mean())
    return oracle, acc


def save_oracle(path: Path | str, oracle: FactorOracle) -> str:
    return save_checkpoint(
        path,
        oracle,
        {"kind": "factor_oracle", "num_classes": oracle.num_classes, "image_size": oracle.image_size},
    )


def load_oracle(path: Path | str) -> FactorOracle:
    meta = load_checkpoint_meta(path)
    oracle = FactorOracle(meta["num_classes"], meta["image_size"])
    oracle.load_state_dict(load_state(path))
    oracle.eval()
    return oracle
